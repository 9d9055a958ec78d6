"""Prompting and evaluation harness for multiple-choice medical QA.

The harness runs a ladder of prompting strategies (zero-shot, random
few-shot, few-shot chain-of-thought, kNN few-shot chain-of-thought, and a
shuffled-option self-consistency ensemble) against any model served over an
HTTP completions endpoint, and scores the results on MedQA, MedMCQA,
PubMedQA, and the medical subjects of MMLU.
"""

__version__ = "0.1.0"
