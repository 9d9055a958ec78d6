"""Shared fixtures plus a terminal summary for the acceptance suite."""

import sys
from pathlib import Path

import pytest

# golden_data.py lives beside the tests, outside any package.
sys.path.insert(0, str(Path(__file__).parent))

from medharness.corpus import Dataset, McqItem, Split  # noqa: E402

_ACCEPTANCE: dict[str, dict] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        if Path(str(item.fspath)).name == "test_acceptance.py":
            doc = (item.function.__doc__ or "").strip().splitlines()
            label = doc[0].rstrip(".") if doc else item.name
            _ACCEPTANCE[item.nodeid] = {"label": label, "outcome": "NOT RUN"}


def pytest_runtest_logreport(report):
    info = _ACCEPTANCE.get(report.nodeid)
    if info is None:
        return
    if report.when == "call":
        info["outcome"] = "PASSED" if report.passed else "FAILED"
    elif report.when == "setup":
        if report.skipped:
            info["outcome"] = "SKIPPED"
        elif report.failed:
            info["outcome"] = "FAILED"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE):
        info = _ACCEPTANCE[nodeid]
        terminalreporter.write_line(f"ACCEPTANCE {info['label']}: {info['outcome']}")


def make_item(
    i: int,
    split: Split = Split.TEST,
    dataset: Dataset = Dataset.MEDQA,
    question: str | None = None,
    options: tuple = (("A", "alpha"), ("B", "beta"), ("C", "gamma"), ("D", "delta")),
    gold: str = "A",
    **kwargs,
) -> McqItem:
    """Small valid item for tests that don't care about realistic content."""
    item = McqItem(
        id=f"{split.value}-{i:05d}",
        dataset=dataset,
        split=split,
        question=question or f"Toy question number {i}?",
        options=options,
        gold=gold,
        **kwargs,
    )
    item.validate()
    return item


@pytest.fixture
def tiny_pool():
    return [
        make_item(i, split=Split.TRAIN, question=f"Pool question about topic {i}?", gold="B")
        for i in range(8)
    ]
