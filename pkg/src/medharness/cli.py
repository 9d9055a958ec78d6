"""Command-line interface.

Subcommands mirror the pipeline: `ingest` normalizes raw benchmark files,
`index` embeds the training pool, `gen-cot` pre-builds verified exemplar
explanations, `run` executes one prompting stage, `ablate` executes the whole
ladder and tabulates it, `report` recomputes summaries from existing traces.

Exit codes: 1 configuration problems, 2 data problems, 3 endpoint problems,
4 incomplete runs.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .config import (
    RunConfig,
    build_endpoint,
    config_fingerprint,
    instruction_for,
    load_config,
)
from .corpus import CorpusStore, Dataset, McqItem, Split, load_dataset
from .errors import ConfigError, DataError, EndpointError, IncompleteRunError
from .metrics import (
    ablation,
    build_report,
    render_ablation_text,
    subject_breakdown,
    write_report,
)
from .modelgw import default_max_tokens
from .promptkit import assemble_prompt, identity_permutation
from .retrieval import RemoteProvider, VectorIndex, build_index, nearest
from .runner import LADDER, Stage, run_benchmark
from .teacher import CotCache, build_exemplars, build_random_exemplars

STAGE_NAMES = [stage.value for stage in LADDER]


@click.group()
def cli():
    """Prompting-ladder evaluation harness for multiple-choice medical QA."""


def _dataset(value: str) -> Dataset:
    try:
        return Dataset(value)
    except ValueError:
        raise click.UsageError(f"unknown dataset {value!r}; pick from "
                               f"{', '.join(d.value for d in Dataset)}")


def _split(value: str) -> Split:
    try:
        return Split(value)
    except ValueError:
        raise click.UsageError(f"unknown split {value!r}")


@cli.command()
@click.option("--dataset", "dataset_name", required=True)
@click.option("--split", "split_name", required=True)
@click.option("--source", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--corpus-dir", required=True, type=click.Path(path_type=Path))
def ingest(dataset_name: str, split_name: str, source: Path, corpus_dir: Path):
    """Normalize one raw benchmark file (or directory) into the corpus store."""
    dataset = _dataset(dataset_name)
    split = _split(split_name)
    result = load_dataset(dataset, split, source)
    store = CorpusStore(corpus_dir)
    store.save(result)
    click.echo(
        f"{dataset.value}/{split.value}: {result.manifest.item_count} items "
        f"({result.manifest.rejected_count} rejected) -> {store.corpus_path(dataset, split)}"
    )


def _index_path(config: RunConfig, dataset: Dataset) -> Path:
    return config.cache_dir / "index" / f"{dataset.value}.jsonl"


def _embedding_provider(config: RunConfig):
    if config.embedding is None:
        return None
    endpoint = build_endpoint(config.embedding, config.retry)
    return RemoteProvider(endpoint, config.embedding.model_id)


def _load_or_build_index(config: RunConfig, dataset: Dataset, pool: list[McqItem],
                         force: bool = False) -> VectorIndex:
    path = _index_path(config, dataset)
    provider = _embedding_provider(config)
    if path.exists() and not force:
        index = VectorIndex.load(path, provider=provider)
        missing = set(item.id for item in pool) - set(index.ids)
        if missing:
            raise DataError(
                f"{path}: index lacks {len(missing)} pool items; rebuild with `index`"
            )
        return index
    index = build_index(pool, provider=provider)
    index.save(path)
    return index


@cli.command("index")
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path))
@click.option("--dataset", "dataset_name", required=True)
def index_cmd(config_path: Path, dataset_name: str):
    """Embed the training pool and persist the similarity index."""
    config = load_config(config_path)
    dataset = _dataset(dataset_name)
    store = CorpusStore(config.corpus_dir)
    pool = store.training_pool(dataset)
    index = _load_or_build_index(config, dataset, pool, force=True)
    click.echo(f"{dataset.value}: indexed {len(index)} pool items "
               f"({index.provider.provider_id}) -> {_index_path(config, dataset)}")


def _teacher_endpoint(config: RunConfig):
    if config.teacher is None:
        raise ConfigError("this stage needs a teacher endpoint; add a `teacher:` block")
    return build_endpoint(config.teacher, config.retry)


def _exemplar_provider(config: RunConfig, dataset: Dataset, stage: Stage,
                       store: CorpusStore, allow_teacher: bool = True):
    """Stage-appropriate exemplar source. Returns (provider, n_teacher_like)."""
    if stage is Stage.ZERO_SHOT:
        return lambda item: []
    pool = store.training_pool(dataset)
    if stage is Stage.RANDOM_FEWSHOT:
        fixed, _ = build_random_exemplars(pool, config.seed, n=config.n_fewshot, cot=False)
        return lambda item: fixed
    cache = CotCache(config.cache_dir)
    teacher = _teacher_endpoint(config) if allow_teacher else _CacheOnlyTeacher(config)
    if stage is Stage.RANDOM_FEWSHOT_COT:
        fixed, _ = build_random_exemplars(
            pool, config.seed, teacher=teacher, cache=cache, n=config.n_fewshot, cot=True
        )
        return lambda item: fixed
    index = _load_or_build_index(config, dataset, pool)
    pool_items = {item.id: item for item in pool}
    memo: dict[str, list] = {}

    def provider(item: McqItem):
        if item.id not in memo:
            neighbor_set = nearest(item, index, config.k_neighbors)
            exemplars, _ = build_exemplars(
                neighbor_set, index, pool_items, teacher, cache=cache, n=config.n_fewshot
            )
            if any(e.item.id == item.id for e in exemplars):
                raise DataError(f"{item.id}: exemplar pool leaked the test item")
            memo[item.id] = exemplars
        return memo[item.id]

    return provider


class _CacheOnlyTeacher:
    """Teacher stand-in for dry runs: any actual call is a configuration error."""

    def __init__(self, config: RunConfig):
        self.model_id = config.teacher.model_id if config.teacher else "none"

    def complete(self, request):
        raise ConfigError(
            "dry run would need a teacher call; run `gen-cot` first to warm the cache"
        )


def _trace_path(config: RunConfig, dataset: Dataset, stage: Stage) -> Path:
    return config.output_dir / dataset.value / f"{stage.value}.trace.jsonl"


def _report_path(config: RunConfig, dataset: Dataset, stage: Stage) -> Path:
    return config.output_dir / dataset.value / f"{stage.value}.report.json"


def _test_items(store: CorpusStore, dataset: Dataset, limit: int | None) -> list[McqItem]:
    items = store.load(dataset, Split.TEST)
    if limit is not None:
        if limit < 1:
            raise ConfigError(f"--limit must be >= 1, got {limit}")
        items = items[:limit]
    return items


def _run_stage(config: RunConfig, dataset: Dataset, stage: Stage, resume: bool,
               concurrency: int | None, limit: int | None, echo=click.echo) -> dict:
    store = CorpusStore(config.corpus_dir)
    items = _test_items(store, dataset, limit)
    instruction = instruction_for(config, dataset)
    target = build_endpoint(config.target, config.retry)
    provider = _exemplar_provider(config, dataset, stage, store)
    trace_path = _trace_path(config, dataset, stage)
    rows = run_benchmark(
        items,
        stage,
        target,
        instruction,
        provider,
        trace_path,
        seed=config.seed,
        ensemble=config.ensemble,
        max_tries=config.max_validity_tries,
        concurrency=concurrency if concurrency is not None else config.concurrency,
        resume=resume,
        request_seed=config.seed,
    )
    fingerprint = config_fingerprint(config, dataset)
    report = build_report(
        rows, dataset, Split.TEST.value, stage, fingerprint,
        expected_ids=[item.id for item in items],
    )
    write_report(report, _report_path(config, dataset, stage))
    echo(
        f"{dataset.value}/{stage.value}: {report['accuracy_percent']:.1f}% "
        f"({report['n_correct']}/{report['n_items']}), "
        f"{report['invalid_count']} invalid, trace {trace_path}"
    )
    return report


def _print_dry_run(config: RunConfig, dataset: Dataset, stage: Stage, limit: int | None):
    store = CorpusStore(config.corpus_dir)
    items = _test_items(store, dataset, limit)
    if not items:
        raise DataError(f"{dataset.value}: no test items")
    item = items[0]
    provider = _exemplar_provider(config, dataset, stage, store, allow_teacher=False)
    exemplars = provider(item)
    strategy = stage.strategy
    bundle = assemble_prompt(
        strategy, instruction_for(config, dataset), exemplars, item,
        permutation=identity_permutation(item),
    )
    temperature = config.ensemble.temperature if stage.is_ensemble else 0.0
    max_tokens = default_max_tokens(exemplars) if strategy.cot else default_max_tokens([])
    click.echo(bundle.text)
    click.echo("---")
    click.echo(f"model: {config.target.model_id}")
    click.echo(f"stage: {stage.value}  items: {len(items)}")
    stop_json = json.dumps(["\n### Question:"])
    click.echo(f"temperature: {temperature}  max_tokens: {max_tokens}  "
               f"stop: {stop_json}  seed: {config.seed}")
    if stage.is_ensemble:
        click.echo(f"ensemble runs: {config.ensemble.n_runs} (shuffled options per run)")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path))
@click.option("--dataset", "dataset_name", required=True)
@click.option("--stage", "stage_name", required=True, type=click.Choice(STAGE_NAMES))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--resume", is_flag=True, help="Continue a partially written trace.")
@click.option("--dry-run", is_flag=True, help="Print the first prompt and parameters; no calls.")
@click.option("--concurrency", type=int, default=None)
@click.option("--limit", type=int, default=None, help="Evaluate only the first N items.")
def run(config_path: Path, dataset_name: str, stage_name: str, seed: int | None,
        resume: bool, dry_run: bool, concurrency: int | None, limit: int | None):
    """Run one prompting stage over a dataset's test split."""
    config = load_config(config_path)
    if seed is not None:
        config = _with_seed(config, seed)
    dataset = _dataset(dataset_name)
    stage = Stage(stage_name)
    if dry_run:
        _print_dry_run(config, dataset, stage, limit)
        return
    _run_stage(config, dataset, stage, resume, concurrency, limit)


def _with_seed(config: RunConfig, seed: int) -> RunConfig:
    from dataclasses import replace

    return replace(config, seed=seed)


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path))
@click.option("--dataset", "dataset_name", required=True)
@click.option("--seed", type=int, default=None)
@click.option("--concurrency", type=int, default=None)
@click.option("--limit", type=int, default=None)
def ablate(config_path: Path, dataset_name: str, seed: int | None,
           concurrency: int | None, limit: int | None):
    """Run every ladder stage in order and tabulate the ablation."""
    config = load_config(config_path)
    if seed is not None:
        config = _with_seed(config, seed)
    dataset = _dataset(dataset_name)
    reports = [
        _run_stage(config, dataset, stage, resume=True, concurrency=concurrency, limit=limit)
        for stage in LADDER
    ]
    table = ablation(reports)
    out_dir = config.output_dir / dataset.value
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(
        json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    text = render_ablation_text(table)
    (out_dir / "ablation.txt").write_text(text, encoding="utf-8")
    click.echo(text, nl=False)


@cli.command("gen-cot")
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path))
@click.option("--dataset", "dataset_name", required=True)
@click.option("--kind", type=click.Choice(["knn", "random"]), default="knn")
@click.option("--limit", type=int, default=None, help="Only the first N test items (knn).")
def gen_cot(config_path: Path, dataset_name: str, kind: str, limit: int | None):
    """Pre-generate verified exemplar explanations into the cache."""
    config = load_config(config_path)
    dataset = _dataset(dataset_name)
    store = CorpusStore(config.corpus_dir)
    pool = store.training_pool(dataset)
    cache = CotCache(config.cache_dir)
    teacher = _teacher_endpoint(config)
    if kind == "random":
        exemplars, outcomes = build_random_exemplars(
            pool, config.seed, teacher=teacher, cache=cache, n=config.n_fewshot, cot=True
        )
        fresh = sum(1 for o in outcomes if o.accepted and not o.from_cache)
        click.echo(f"{dataset.value}: {len(exemplars)} random exemplars verified "
                   f"({fresh} newly generated)")
        return
    index = _load_or_build_index(config, dataset, pool)
    pool_items = {item.id: item for item in pool}
    items = _test_items(store, dataset, limit)
    n_fresh = 0
    for item in items:
        neighbor_set = nearest(item, index, config.k_neighbors)
        _, outcomes = build_exemplars(
            neighbor_set, index, pool_items, teacher, cache=cache, n=config.n_fewshot
        )
        n_fresh += sum(1 for o in outcomes if o.accepted and not o.from_cache)
    click.echo(f"{dataset.value}: exemplars ready for {len(items)} items "
               f"({n_fresh} explanations newly generated)")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(path_type=Path))
@click.option("--dataset", "dataset_name", required=True)
@click.option("--limit", type=int, default=None)
def report(config_path: Path, dataset_name: str, limit: int | None):
    """Rebuild reports from existing traces; tabulate when the ladder is complete."""
    from .runner import read_trace

    config = load_config(config_path)
    dataset = _dataset(dataset_name)
    store = CorpusStore(config.corpus_dir)
    items = _test_items(store, dataset, limit)
    expected = [item.id for item in items]
    fingerprint = config_fingerprint(config, dataset)
    reports = []
    for stage in LADDER:
        trace_path = _trace_path(config, dataset, stage)
        rows = read_trace(trace_path)
        if not rows:
            continue
        rep = build_report(rows, dataset, Split.TEST.value, stage, fingerprint,
                           expected_ids=expected)
        write_report(rep, _report_path(config, dataset, stage))
        reports.append(rep)
        click.echo(f"{stage.value}: {rep['accuracy_percent']:.1f}% "
                   f"({rep['n_correct']}/{rep['n_items']})")
    if not reports:
        raise DataError(f"{dataset.value}: no traces under {config.output_dir}")
    if len(reports) == len(LADDER):
        table = ablation(reports)
        out_dir = config.output_dir / dataset.value
        (out_dir / "ablation.json").write_text(
            json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        (out_dir / "ablation.txt").write_text(render_ablation_text(table), encoding="utf-8")
        click.echo(render_ablation_text(table), nl=False)
    if dataset is Dataset.MMLU_MED:
        best = reports[-1]
        rows = read_trace(_trace_path(config, dataset, Stage(best["stage"])))
        breakdown = subject_breakdown(rows, items)
        (config.output_dir / dataset.value / "subjects.json").write_text(
            json.dumps(breakdown, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        for subject, stats in breakdown["subjects"].items():
            click.echo(f"  {subject}: {stats['accuracy_percent']:.1f}% "
                       f"({stats['n_correct']}/{stats['n_items']})")


def main(argv=None) -> int:
    """Entry point with stable exit codes."""
    try:
        result = cli.main(args=argv, standalone_mode=False)
        return 0 if result is None else int(result or 0)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except DataError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except EndpointError as exc:
        click.echo(f"error: {exc}", err=True)
        return 3
    except IncompleteRunError as exc:
        click.echo(f"error: {exc}", err=True)
        return 4
    except click.Abort:
        click.echo("aborted", err=True)
        return 130


if __name__ == "__main__":
    sys.exit(main())
