"""Byte-exact prompt assembly for all prompting strategies.

Target-model prompts follow one template: an instruction block, zero or five
exemplar blocks, then the test question block, with one blank line between
blocks. Exemplar blocks are

    ### Question: {question} {options}
    ### Explanation: {chain of thought}     <- chain-of-thought strategies only
    ### Answer: {correct answer}

and the test block repeats the question line and ends exactly at the
strategy's sentinel ("### Explanation:" for chain-of-thought strategies,
"### Answer:" otherwise) with no trailing newline. Teacher prompts for
explanation generation use a separate fixed template (``TEACHER_TEMPLATE``).

Options render inline as "(A) text (B) text ..."; datasets whose options are
bare answer words (PubMedQA) render the words alone, "(yes) (no) (maybe)",
while keeping letter labels internally so voting and scoring are uniform.

Option shuffling for ensemble runs is a pure function of
(seed, item id, run index): the SHA-256 of that key, reduced mod n!, is
unranked into a permutation via the Lehmer code, so every rerun presents the
same shuffles regardless of execution order.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import NamedTuple

from .corpus import Dataset, McqItem
from .errors import ConfigError

__all__ = [
    "Strategy",
    "PromptBundle",
    "CotExemplar",
    "ShuffleResult",
    "SENTINEL_ANSWER",
    "SENTINEL_EXPLANATION",
    "FEWSHOT_SIZE",
    "TEACHER_TEMPLATE",
    "assemble_prompt",
    "teacher_prompt",
    "shuffle_options",
    "unshuffle_options",
    "identity_permutation",
    "uses_word_options",
    "render_options_inline",
    "extraction_tokens",
    "template_fingerprint",
]


class Strategy(str, Enum):
    ZERO_SHOT = "zero_shot"
    RANDOM_FEWSHOT = "random_fewshot"
    RANDOM_FEWSHOT_COT = "random_fewshot_cot"
    KNN_FEWSHOT_COT = "knn_fewshot_cot"

    @property
    def cot(self) -> bool:
        return self in (Strategy.RANDOM_FEWSHOT_COT, Strategy.KNN_FEWSHOT_COT)

    @property
    def fewshot(self) -> bool:
        return self is not Strategy.ZERO_SHOT


FEWSHOT_SIZE = 5

QUESTION_HEADING = "### Question:"
EXPLANATION_HEADING = "### Explanation:"
ANSWER_HEADING = "### Answer:"
OPTIONS_HEADING = "### Options:"

SENTINEL_ANSWER = ANSWER_HEADING
SENTINEL_EXPLANATION = EXPLANATION_HEADING

TEACHER_TEMPLATE = (
    "You are a medical expert. Answer the following multiple choice question "
    "from the medical domain based on following instructions.\n"
    "1. Output a brief explanation summarizing and providing context to the "
    "question under the heading 'Explanation' in about 5 sentences.\n"
    "2. Select the correct option and provide the correct option under the "
    "heading 'Answer'.\n"
    "3. Always select one of the four options provided as the answer.\n"
    "4. If the options are ambiguous or the question does not have enough "
    "context, select the one that best answers the question.\n"
    "\n"
    "### Question: {question}\n"
    "### Options: {options}"
)


@dataclass(frozen=True)
class CotExemplar:
    """A worked example: a pool item plus its (possibly empty) explanation.

    ``verified`` means a teacher model produced the explanation and its
    extracted answer matched the item's gold label. Chain-of-thought prompts
    accept only verified exemplars; answer-only few-shot prompts use
    unverified exemplars with an empty explanation.
    """

    item: McqItem
    explanation: str = ""
    verified: bool = False

    def __post_init__(self):
        if self.verified and not self.explanation.strip():
            raise ConfigError(f"{self.item.id}: verified exemplar without an explanation")


@dataclass(frozen=True)
class PromptBundle:
    text: str
    permutation: dict[str, str]  # canonical label -> presented label
    strategy: Strategy
    item_id: str
    exemplar_ids: tuple[str, ...]
    dataset: Dataset
    options: tuple[tuple[str, str], ...]  # presented (label, text) pairs
    sentinel: str
    run_index: int = 0

    def to_canonical(self, presented_label: str) -> str:
        for canonical, presented in self.permutation.items():
            if presented == presented_label:
                return canonical
        raise KeyError(presented_label)


class ShuffleResult(NamedTuple):
    item: McqItem
    permutation: dict[str, str]  # canonical label -> presented label


def uses_word_options(dataset: Dataset) -> bool:
    """True when prompts show the option texts as bare answer tokens."""
    return dataset is Dataset.PUBMEDQA


def _option_fragment(dataset: Dataset, label: str, text: str) -> str:
    if uses_word_options(dataset):
        return f"({text})"
    return f"({label}) {text}"


def render_options_inline(dataset: Dataset, options: tuple[tuple[str, str], ...]) -> str:
    return " ".join(_option_fragment(dataset, label, text) for label, text in options)


def _answer_reference(item: McqItem) -> str:
    """How an exemplar's correct answer is written after "### Answer:"."""
    if uses_word_options(item.dataset):
        return item.gold_text
    return f"({item.gold}) {item.gold_text}"


def _question_with_context(item: McqItem) -> str:
    if item.context:
        return f"{item.context} {item.question}"
    return item.question


def _question_line(item: McqItem) -> str:
    inline = render_options_inline(item.dataset, item.options)
    return f"{QUESTION_HEADING} {_question_with_context(item)} {inline}"


def _exemplar_block(exemplar: CotExemplar, cot: bool) -> str:
    lines = [_question_line(exemplar.item)]
    if cot:
        lines.append(f"{EXPLANATION_HEADING} {exemplar.explanation}")
    lines.append(f"{ANSWER_HEADING} {_answer_reference(exemplar.item)}")
    return "\n".join(lines)


def assemble_prompt(
    strategy: Strategy,
    instruction: str,
    exemplars: list[CotExemplar],
    item: McqItem,
    permutation: dict[str, str] | None = None,
    run_index: int = 0,
) -> PromptBundle:
    """Render the full prompt for *item* (already shuffled, if applicable).

    *permutation* records how the item's canonical labels map to the labels
    presented in its options; omit it for an unshuffled item.
    """
    if not instruction or not instruction.strip():
        raise ConfigError("instruction must be non-empty")
    expected = FEWSHOT_SIZE if strategy.fewshot else 0
    if len(exemplars) != expected:
        raise ConfigError(
            f"{strategy.value} needs exactly {expected} exemplars, got {len(exemplars)}"
        )
    if strategy.cot:
        bad = [e.item.id for e in exemplars if not e.verified]
        if bad:
            raise ConfigError(f"unverified exemplars in a chain-of-thought prompt: {bad}")
    if permutation is None:
        permutation = identity_permutation(item)
    if sorted(permutation) != sorted(item.labels) or sorted(permutation.values()) != sorted(item.labels):
        raise ConfigError(f"{item.id}: permutation is not a bijection over {item.labels}")

    sentinel = SENTINEL_EXPLANATION if strategy.cot else SENTINEL_ANSWER
    blocks = [instruction]
    blocks.extend(_exemplar_block(e, strategy.cot) for e in exemplars)
    blocks.append(f"{_question_line(item)}\n{sentinel}")
    text = "\n\n".join(blocks)
    # The test block must end at its sentinel: nothing, in particular no gold
    # answer text, may follow it.
    assert text.endswith(sentinel)
    return PromptBundle(
        text=text,
        permutation=dict(permutation),
        strategy=strategy,
        item_id=item.id,
        exemplar_ids=tuple(e.item.id for e in exemplars),
        dataset=item.dataset,
        options=item.options,
        sentinel=sentinel,
        run_index=run_index,
    )


def teacher_prompt(item: McqItem) -> str:
    """The fixed explanation-generation prompt for one pool item."""
    return TEACHER_TEMPLATE.format(
        question=_question_with_context(item),
        options=render_options_inline(item.dataset, item.options),
    )


def identity_permutation(item: McqItem) -> dict[str, str]:
    return {label: label for label in item.labels}


def _unrank_lehmer(rank: int, n: int) -> list[int]:
    digits = []
    for i in range(1, n + 1):
        digits.append(rank % i)
        rank //= i
    digits.reverse()
    pool = list(range(n))
    return [pool.pop(d) for d in digits]


def _permutation_indices(seed: int, item_id: str, run_index: int, n: int) -> list[int]:
    key = f"{seed}|{item_id}|{run_index}".encode("utf-8")
    rank = int.from_bytes(hashlib.sha256(key).digest(), "big") % math.factorial(n)
    return _unrank_lehmer(rank, n)


def shuffle_options(item: McqItem, seed: int, run_index: int) -> ShuffleResult:
    """Deterministically permute *item*'s option texts among its labels.

    presented[i] = original[perm[i]], so the returned mapping sends each
    canonical label to the presented label its text now sits under, and the
    gold label moves with its text.
    """
    labels = item.labels
    n = len(labels)
    perm = _permutation_indices(seed, item.id, run_index, n)
    presented_options = tuple((labels[i], item.options[perm[i]][1]) for i in range(n))
    to_presented = {labels[perm[i]]: labels[i] for i in range(n)}
    shuffled = replace(item, options=presented_options, gold=to_presented[item.gold])
    shuffled.validate()
    return ShuffleResult(item=shuffled, permutation=to_presented)


def unshuffle_options(item: McqItem, permutation: dict[str, str]) -> McqItem:
    """Invert shuffle_options: recover the originally ordered item."""
    presented_text = {label: text for label, text in item.options}
    options = tuple(
        (canonical, presented_text[presented]) for canonical, presented in sorted(permutation.items())
    )
    to_canonical = {presented: canonical for canonical, presented in permutation.items()}
    original = replace(item, options=options, gold=to_canonical[item.gold])
    original.validate()
    return original


def extraction_tokens(item: McqItem) -> tuple[tuple[str, ...], dict[str, str] | None]:
    """(presented labels, word token -> presented label) for answer parsing.

    The word map is None for datasets whose prompts show letter labels.
    """
    labels = item.labels
    if uses_word_options(item.dataset):
        return labels, {text: label for label, text in item.options}
    return labels, None


def template_fingerprint() -> str:
    """Hash of every literal template byte that shapes a prompt."""
    parts = [
        QUESTION_HEADING,
        EXPLANATION_HEADING,
        ANSWER_HEADING,
        OPTIONS_HEADING,
        TEACHER_TEMPLATE,
        "\n\n",  # block joiner
    ]
    return hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()
