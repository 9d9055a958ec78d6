"""Acceptance suite: one test per shipping criterion.

Each test's first docstring line is the label printed in the terminal
acceptance summary. Two tests exercise live endpoints / official data files
and skip unless their environment variables are set; everything else runs
hermetically against scripted in-process endpoints.
"""

import itertools
import json
import os
import random
import time
from dataclasses import replace

import numpy as np
import pytest
import yaml

import golden_data as gd
from conftest import make_item
from medharness.cli import main
from medharness.corpus import CorpusStore, Dataset, Split, write_normalized
from medharness.modelgw import (
    FlakyGoldPolicy,
    GarbagePolicy,
    GenerationRequest,
    GoldAnswerPolicy,
    complete,
    mock_model,
)
from medharness.parsing import INVALID, extract_answer
from medharness.promptkit import (
    Strategy,
    assemble_prompt,
    extraction_tokens,
    shuffle_options,
    teacher_prompt,
)
from medharness.retrieval import build_index, nearest, token_bucket
from medharness.runner import LADDER, Stage, aggregate_votes, run_benchmark
from medharness.teacher import build_exemplars, random_candidate_stream

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

LIVE_VARS = (
    "MEDHARNESS_TARGET_URL",
    "MEDHARNESS_TARGET_MODEL",
    "MEDHARNESS_TEACHER_URL",
    "MEDHARNESS_TEACHER_MODEL",
    "MEDHARNESS_DATA_DIR",
)

needs_live_endpoint = pytest.mark.skipif(
    not all(os.environ.get(v) for v in LIVE_VARS),
    reason="integration profile: set " + ", ".join(LIVE_VARS),
)

needs_data_dir = pytest.mark.skipif(
    not os.environ.get("MEDHARNESS_DATA_DIR"),
    reason="official benchmark files: set MEDHARNESS_DATA_DIR",
)


# -- criterion 1: live-endpoint reproduction (optional) ----------------------

@needs_live_endpoint
def test_live_medqa_ensemble_accuracy(tmp_path):
    """live MedQA ensemble accuracy within 1.5 points of 72.6.

    Runs the real pipeline against the supplied completion endpoints on the
    official MedQA test split. Stochastic (temperature 0.4 sampling), hence
    the tolerance band.
    """
    data_dir = os.environ["MEDHARNESS_DATA_DIR"]
    for split, filename in (("test", "medqa_test.jsonl"), ("train", "medqa_train.jsonl")):
        source = os.path.join(data_dir, filename)
        assert os.path.exists(source), f"expected {source}"
        assert main(["ingest", "--dataset", "medqa", "--split", split,
                     "--source", source, "--corpus-dir", str(tmp_path / "corpus")]) == 0

    doc = {
        "corpus_dir": "corpus",
        "output_dir": "out",
        "cache_dir": "cache",
        "seed": 0,
        "target": {"url": os.environ["MEDHARNESS_TARGET_URL"],
                   "model": os.environ["MEDHARNESS_TARGET_MODEL"]},
        "teacher": {"url": os.environ["MEDHARNESS_TEACHER_URL"],
                    "model": os.environ["MEDHARNESS_TEACHER_MODEL"]},
    }
    key_env = os.environ.get("MEDHARNESS_API_KEY_ENV")
    if key_env:
        doc["target"]["api_key_env"] = key_env
        doc["teacher"]["api_key_env"] = key_env
    config = tmp_path / "config.yaml"
    config.write_text(yaml.safe_dump(doc), encoding="utf-8")

    assert main(["run", "--config", str(config), "--dataset", "medqa",
                 "--stage", "ensemble", "--resume"]) == 0
    report = json.loads(
        (tmp_path / "out" / "medqa" / "ensemble.report.json").read_text(encoding="utf-8"))
    assert report["n_items"] == 1273
    assert 72.6 - 1.5 <= report["accuracy_percent"] <= 72.6 + 1.5


# -- criterion 2: end-to-end mock ladder --------------------------------------

TOY_DIM = 512
TOY_THRESHOLDS = {
    "zero_shot": 584,
    "random_fewshot": 615,
    "random_fewshot_cot": 666,
    "knn_fewshot_cot": 695,
    "ensemble": 726,
}
TOY_PERCENTS = [58.4, 61.5, 66.6, 69.5, 72.6]
OPTION_TEXTS = ("choice alpha", "choice beta", "choice gamma", "choice delta")


def _sample_tokens(prefix, count, forbidden, pairwise_distinct):
    """Scan `{prefix}0, {prefix}1, ...` for tokens hashing outside `forbidden`.

    With `pairwise_distinct` each accepted token's bucket is added to the
    forbidden set, so the sample occupies `count` distinct buckets.
    """
    forbidden = set(forbidden)
    out = []
    k = 0
    while len(out) < count:
        candidate = f"{prefix}{k}"
        k += 1
        bucket = token_bucket(candidate, TOY_DIM)
        if bucket in forbidden:
            continue
        if pairwise_distinct:
            forbidden.add(bucket)
        out.append(candidate)
    return out


def build_toy_benchmark(tmp_path, n_test=1000, n_buckets=40, per_bucket=5):
    """A 1,000-item benchmark whose similarity structure is engineered.

    Pool questions share a topic word per group of five; test questions carry
    exactly one topic word plus tokens hashing into otherwise-unused buckets,
    so each test item's five nearest pool neighbors are its topic group by
    construction. A scripted answer table then dictates, per item, which
    ladder stages answer correctly: item i is correct at a stage iff
    i < threshold(stage).
    """
    fixed = ["pool", "marker", "slot"] + [str(s) for s in range(per_bucket)]
    reserved = {token_bucket(t, TOY_DIM) for t in fixed + ["case"]}
    assert len(reserved) == len(fixed) + 1, "fixed template tokens collide; change them"
    topic_words = _sample_tokens("w", n_buckets, reserved, pairwise_distinct=True)
    pool_buckets = reserved | {token_bucket(w, TOY_DIM) for w in topic_words}
    id_words = _sample_tokens("t", n_test, pool_buckets, pairwise_distinct=False)

    pool_items = []
    for b in range(n_buckets):
        for s in range(per_bucket):
            i = b * per_bucket + s
            gold = "ABCD"[i % 4]
            pool_items.append(make_item(
                i, split=Split.TRAIN,
                question=f"Pool marker {topic_words[b]} slot {s}.",
                options=tuple(zip("ABCD", OPTION_TEXTS)),
                gold=gold,
            ))

    test_items = []
    table = {}
    for i in range(n_test):
        gold = "ABCD"[i % 4]
        question = f"Case {id_words[i]} marker {topic_words[i % n_buckets]}."
        test_items.append(make_item(
            i, question=question,
            options=tuple(zip("ABCD", OPTION_TEXTS)),
            gold=gold,
        ))
        table[question] = {
            "gold": OPTION_TEXTS["ABCD".index(gold)],
            "wrong": OPTION_TEXTS[("ABCD".index(gold) + 1) % 4],
            "stages": [s.value for s in LADDER if i < TOY_THRESHOLDS[s.value]],
        }

    corpus = tmp_path / "corpus"
    write_normalized(test_items, corpus / "medqa" / "test.jsonl")
    write_normalized(pool_items, corpus / "medqa" / "train.jsonl")

    # The classifier tells the two chain-of-thought prompt shapes apart by
    # the exemplar question set, so the randomly drawn set must not equal any
    # topic group. The random stream is a documented contract, so the head
    # is recomputable here; spanning two or more topic groups suffices.
    stream_head = random_candidate_stream([it.id for it in pool_items], seed=0)[:5]
    head_groups = {int(pid.split("-")[1]) // per_bucket for pid in stream_head}
    assert len(head_groups) >= 2, "random exemplars landed in one topic group; change the seed"
    by_id = {it.id: it for it in pool_items}
    random_questions = [by_id[pid].question for pid in stream_head]

    target_policy = tmp_path / "target_policy.json"
    target_policy.write_text(json.dumps({
        "policy": "stage_table",
        "table": table,
        "random_exemplar_questions": random_questions,
    }), encoding="utf-8")
    teacher_policy = tmp_path / "teacher_policy.json"
    teacher_policy.write_text(json.dumps({
        "policy": "gold",
        "answers": {it.question: it.gold_text for it in pool_items},
    }), encoding="utf-8")

    config = tmp_path / "config.yaml"
    config.write_text(yaml.safe_dump({
        "corpus_dir": "corpus",
        "output_dir": "out",
        "cache_dir": "cache",
        "seed": 0,
        "target": {"url": f"mock:{target_policy}", "model": "scripted-target"},
        "teacher": {"url": f"mock:{teacher_policy}", "model": "scripted-teacher"},
    }), encoding="utf-8")
    return config


def test_mock_ladder_ablation(tmp_path):
    """mock ladder ablation reproduces designed accuracies exactly.

    A scripted endpoint answers each of 1,000 toy items correctly at exactly
    the ladder stages its answer-table row names, so the ablation over the
    full pipeline (ingestion, indexing, teacher verification, five stages,
    voting) must land on the designed percentages with zero tolerance, in
    ladder order, in under a minute.
    """
    config = build_toy_benchmark(tmp_path)
    started = time.monotonic()
    assert main(["ablate", "--config", str(config), "--dataset", "medqa"]) == 0
    elapsed = time.monotonic() - started
    assert elapsed < 60.0, f"ablation took {elapsed:.1f}s"

    table = json.loads(
        (tmp_path / "out" / "medqa" / "ablation.json").read_text(encoding="utf-8"))
    assert [row["stage"] for row in table["rows"]] == [s.value for s in LADDER]
    assert [row["accuracy_percent"] for row in table["rows"]] == TOY_PERCENTS
    assert [row["n_correct"] for row in table["rows"]] == [
        TOY_THRESHOLDS[s.value] for s in LADDER]
    assert all(row["n_items"] == 1000 for row in table["rows"])
    assert [row["delta"] for row in table["rows"]] == [None, 3.1, 5.1, 2.9, 3.1]


# -- criterion 3: voting oracle -----------------------------------------------

def vote_oracle(decisions):
    """Brute-force restatement of the voting rule: drop invalid runs, count,
    and break ties toward the earliest run holding a tied label."""
    counts = {}
    for d in decisions:
        if d != INVALID:
            counts[d] = counts.get(d, 0) + 1
    if not counts:
        return INVALID, False
    top = max(counts.values())
    tied = [label for label, n in counts.items() if n == top]
    if len(tied) == 1:
        return tied[0], False
    for d in decisions:
        if d in tied:
            return d, True
    raise AssertionError("unreachable")


def test_voting_matches_brute_force_oracle():
    """ensemble vote matches a brute-force oracle on 10,000 multisets."""
    rng = random.Random(99)
    alphabet = ["A", "B", "C", "D", INVALID]
    for trial in range(10_000):
        n_runs = rng.randint(1, 7)
        decisions = [rng.choice(alphabet) for _ in range(n_runs)]
        assert aggregate_votes(decisions) == vote_oracle(decisions), decisions


# -- criterion 4: shuffle invariance ------------------------------------------

def test_decision_invariant_under_all_permutations():
    """canonical decision constant across all 24 option permutations.

    A permutation-covariant mock (it answers by option text, so its pick
    moves with the shuffle) must map back to the same canonical label under
    every presentation; plus 10,000 seeded shuffle round trips invert
    cleanly.
    """
    item = gd.TEST_ITEM
    endpoint = mock_model(GoldAnswerPolicy({item.question: item.gold_text}))
    labels = list(item.labels)
    decisions = set()
    for assignment in itertools.permutations(range(4)):
        permutation = {labels[c]: labels[assignment[c]] for c in range(4)}
        presented_options = [None] * 4
        for c in range(4):
            presented_options[assignment[c]] = (labels[assignment[c]], item.options[c][1])
        presented = replace(item, options=tuple(presented_options),
                            gold=permutation[item.gold])
        presented.validate()
        bundle = assemble_prompt(Strategy.ZERO_SHOT, gd.MEDQA_INSTRUCTION, [],
                                 presented, permutation=permutation)
        response = complete(
            GenerationRequest(model_id="mock", prompt=bundle.text), endpoint)
        option_labels, word_tokens = extraction_tokens(presented)
        presented_label = extract_answer(response.text, option_labels, word_tokens)
        inverse = {p: c for c, p in permutation.items()}
        decisions.add(inverse[presented_label])
    assert decisions == {item.gold}

    rng = random.Random(4242)
    for trial in range(10_000):
        subject = item if trial % 2 == 0 else gd.PUBMEDQA_ITEM
        seed = rng.randrange(10**9)
        run_index = rng.randrange(10**6)
        presented, permutation = shuffle_options(subject, seed, run_index)
        presented.validate()
        assert sorted(permutation) == sorted(subject.labels)
        assert sorted(permutation.values()) == sorted(subject.labels)
        for canonical in subject.labels:
            assert presented.option_text(permutation[canonical]) == \
                subject.option_text(canonical)
        assert presented.gold == permutation[subject.gold]


# -- criterion 5: kNN oracle ---------------------------------------------------

def test_knn_matches_brute_force_cosine():
    """kNN top-5 matches a brute-force cosine scan on a 500-item pool.

    Includes exact ties (duplicated question texts) so the id tie order is
    exercised, not just the scores.
    """
    rng = random.Random(404)
    vocab = [f"term{j}" for j in range(80)]

    def text():
        return " ".join(rng.choices(vocab, k=8)) + "?"

    pool = []
    for i in range(500):
        question = pool[-1].question if i % 10 == 9 else text()
        pool.append(make_item(i, split=Split.TRAIN, question=question))
    queries = [make_item(i, question=text()) for i in range(50)]

    index = build_index(pool)
    provider = index.provider
    vectors = {item.id: provider.embed(item.question) for item in pool}
    for query in queries:
        qvec = provider.embed(query.question)
        oracle = sorted(
            ((item.id, float(np.dot(vectors[item.id], qvec))) for item in pool),
            key=lambda pair: (-pair[1], pair[0]),
        )[:5]
        got = nearest(query, index, 5)
        assert list(got.neighbors) == oracle, query.id


# -- criterion 6: retry and replacement semantics ------------------------------

def test_retry_and_teacher_replacement(tmp_path, tiny_pool):
    """garbage answers burn exactly 5 tries and failed teachers are replaced.

    A target that never produces a parseable answer must spend exactly the
    5-try validity budget per item before the item is marked incorrect; a
    teacher candidate that fails verification 3 times must be replaced by
    the next neighbor down the similarity ranking (rank 6 for a k of 5).
    """
    items = [make_item(i, question=f"Retry case number {i}?") for i in range(3)]
    endpoint = mock_model(GarbagePolicy())
    rows = run_benchmark(items, Stage.ZERO_SHOT, endpoint, gd.MEDQA_INSTRUCTION,
                         lambda item: [], tmp_path / "garbage.trace.jsonl")
    assert endpoint.call_count == 5 * len(items)
    for row in rows:
        assert row["n_calls"] == 5
        assert not row["correct"]
        assert row["decision"] == INVALID

    query = make_item(0, question="Toy query about topics?")
    index = build_index(tiny_pool)
    neighbors = nearest(query, index, k=5)
    ranked = [i for i, _ in index.rank_all(neighbors.query_vector, exclude_id=query.id)]
    pool_items = {it.id: it for it in tiny_pool}
    failing = pool_items[ranked[1]]
    teacher = mock_model(FlakyGoldPolicy(
        {it.question: it.gold_text for it in tiny_pool},
        fail_questions={failing.question},
        n_wrong=3,
    ))
    exemplars, outcomes = build_exemplars(neighbors, index, pool_items, teacher)
    assert [ex.item.id for ex in exemplars] == [
        ranked[0], ranked[2], ranked[3], ranked[4], ranked[5]]
    rejected = [o for o in outcomes if not o.accepted]
    assert [o.item_id for o in rejected] == [failing.id]
    assert rejected[0].attempts == 3
    assert teacher.call_count == 5 + 3


# -- criterion 7: golden prompt files ------------------------------------------

def fixture_bytes(name):
    with open(os.path.join(FIXTURES, "prompts", name), "rb") as f:
        return f.read()


def test_prompts_match_golden_fixtures():
    """assembled prompts are byte-identical to the frozen fixtures."""
    random_plain = [gd.exemplar(i, cot=False) for i in gd.RANDOM_ORDER]
    random_cot = [gd.exemplar(i, cot=True) for i in gd.RANDOM_ORDER]
    knn_cot = [gd.exemplar(i, cot=True) for i in gd.KNN_ORDER]
    shuffled, perm = shuffle_options(gd.TEST_ITEM, gd.SHUFFLE_SEED, gd.SHUFFLE_RUN)

    built = {
        "medqa_zero_shot.txt": assemble_prompt(
            Strategy.ZERO_SHOT, gd.MEDQA_INSTRUCTION, [], gd.TEST_ITEM).text,
        "medqa_random_fewshot.txt": assemble_prompt(
            Strategy.RANDOM_FEWSHOT, gd.MEDQA_INSTRUCTION, random_plain,
            gd.TEST_ITEM).text,
        "medqa_random_fewshot_cot.txt": assemble_prompt(
            Strategy.RANDOM_FEWSHOT_COT, gd.MEDQA_INSTRUCTION, random_cot,
            gd.TEST_ITEM).text,
        "medqa_knn_fewshot_cot.txt": assemble_prompt(
            Strategy.KNN_FEWSHOT_COT, gd.MEDQA_INSTRUCTION, knn_cot,
            gd.TEST_ITEM).text,
        "medqa_zero_shot_shuffled_run3.txt": assemble_prompt(
            Strategy.ZERO_SHOT, gd.MEDQA_INSTRUCTION, [], shuffled,
            permutation=perm, run_index=gd.SHUFFLE_RUN).text,
        "pubmedqa_zero_shot.txt": assemble_prompt(
            Strategy.ZERO_SHOT, gd.PUBMEDQA_INSTRUCTION, [], gd.PUBMEDQA_ITEM).text,
        "teacher_medqa.txt": teacher_prompt(gd.TEST_ITEM),
        "teacher_pubmedqa.txt": teacher_prompt(gd.PUBMEDQA_ITEM),
    }
    fixture_names = sorted(os.listdir(os.path.join(FIXTURES, "prompts")))
    assert sorted(built) == fixture_names, "fixture set drifted"
    for name, text in built.items():
        assert text.encode("utf-8") + b"\n" == fixture_bytes(name), name


# -- criterion 8: parser corpus -------------------------------------------------

def test_parser_corpus():
    """every labeled extraction fixture parses to its hand-assigned label."""
    with open(os.path.join(FIXTURES, "parser_cases.json"), encoding="utf-8") as f:
        doc = json.load(f)
    cases = doc["cases"]
    labeled = [c for c in cases if c["expected"] is not None]
    garbage = [c for c in cases if c["expected"] is None]
    assert len(labeled) >= 20
    assert len(garbage) >= 5
    assert any("Hence, the answer is D" in c["raw"] for c in labeled)
    assert any(c["raw"].strip() == "(A)" for c in labeled)
    for case in cases:
        got = extract_answer(case["raw"], list(case["labels"]),
                             case.get("word_tokens"))
        expected = case["expected"] if case["expected"] is not None else INVALID
        assert got == expected, case["name"]


# -- criterion 9: official dataset counts (optional) ----------------------------

@needs_data_dir
def test_official_dataset_counts(tmp_path):
    """ingesting the official benchmark files yields the published counts."""
    data_dir = os.environ["MEDHARNESS_DATA_DIR"]
    sources = {
        Dataset.MEDQA: ("medqa_test.jsonl", 1273),
        Dataset.MEDMCQA: ("medmcqa_dev.json", 4183),
        Dataset.PUBMEDQA: ("pubmedqa_test.json", 500),
        Dataset.MMLU_MED: ("mmlu_med", 1785),
    }
    splits = {Dataset.MEDMCQA: "dev"}
    store = CorpusStore(tmp_path / "corpus")
    for dataset, (filename, expected) in sources.items():
        source = os.path.join(data_dir, filename)
        assert os.path.exists(source), f"expected {source}"
        split = splits.get(dataset, "test")
        assert main(["ingest", "--dataset", dataset.value, "--split", split,
                     "--source", source, "--corpus-dir", str(store.root)]) == 0
        items = store.load(dataset, Split(split))
        assert len(items) == expected, dataset.value

    pubmed = store.load(Dataset.PUBMEDQA, Split.TEST)
    assert all(len(item.options) == 3 for item in pubmed)
    assert all(item.context and item.context.strip() for item in pubmed)
