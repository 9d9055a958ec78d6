"""Run configuration: YAML loading, defaults, and the config fingerprint.

A run config names the corpus and output directories, the seed, and up to
three endpoints (target, teacher, embedding). Credentials never appear in
the file; an endpoint block names the environment variable holding its key.
The fingerprint digests everything that determines a run's outputs except
the prompting stage, so reports from different stages of the same setup can
be checked as comparable before they land in one ablation table.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .corpus import Dataset
from .errors import ConfigError
from .modelgw import RetryPolicy, open_endpoint
from .promptkit import template_fingerprint
from .runner import EnsembleConfig, MAX_VALIDITY_TRIES

__all__ = [
    "EndpointConfig",
    "RunConfig",
    "load_config",
    "default_instruction",
    "instruction_for",
    "config_fingerprint",
    "build_endpoint",
]

BUILTIN_EMBEDDING = "builtin"


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    model_id: str
    api_key_env: str | None = None
    timeout: float = 120.0


@dataclass(frozen=True)
class RunConfig:
    corpus_dir: Path
    output_dir: Path
    cache_dir: Path
    target: EndpointConfig
    teacher: EndpointConfig | None = None
    embedding: EndpointConfig | None = None
    seed: int = 0
    concurrency: int = 1
    k_neighbors: int = 5
    n_fewshot: int = 5
    max_validity_tries: int = MAX_VALIDITY_TRIES
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    instructions: dict = field(default_factory=dict)


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise ConfigError(f"{context}: missing required key {key!r}")
    return mapping[key]


def _check_keys(mapping: dict, allowed: set[str], context: str) -> None:
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {unknown}")


def _endpoint_block(block, context: str) -> EndpointConfig:
    if not isinstance(block, dict):
        raise ConfigError(f"{context}: expected a mapping")
    _check_keys(block, {"url", "model", "api_key_env", "timeout"}, context)
    return EndpointConfig(
        url=str(_require(block, "url", context)),
        model_id=str(_require(block, "model", context)),
        api_key_env=block.get("api_key_env"),
        timeout=float(block.get("timeout", 120.0)),
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file missing: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    _check_keys(
        raw,
        {
            "corpus_dir", "output_dir", "cache_dir", "seed", "concurrency",
            "k_neighbors", "n_fewshot", "max_validity_tries",
            "target", "teacher", "embedding", "ensemble", "retry", "instructions",
        },
        str(path),
    )

    ensemble_raw = raw.get("ensemble", {}) or {}
    _check_keys(ensemble_raw, {"runs", "temperature"}, f"{path}: ensemble")
    ensemble = EnsembleConfig(
        n_runs=int(ensemble_raw.get("runs", 5)),
        temperature=float(ensemble_raw.get("temperature", 0.4)),
    )

    retry_raw = raw.get("retry", {}) or {}
    _check_keys(retry_raw, {"max_retries", "backoff_base", "backoff_cap"}, f"{path}: retry")
    retry = RetryPolicy(
        max_retries=int(retry_raw.get("max_retries", 3)),
        backoff_base=float(retry_raw.get("backoff_base", 0.25)),
        backoff_cap=float(retry_raw.get("backoff_cap", 8.0)),
    )

    instructions = raw.get("instructions", {}) or {}
    if not isinstance(instructions, dict):
        raise ConfigError(f"{path}: instructions must map dataset names to strings")
    known = {d.value for d in Dataset}
    for key, value in instructions.items():
        if key not in known:
            raise ConfigError(f"{path}: instructions name unknown dataset {key!r}")
        if not isinstance(value, str) or not value.strip():
            raise ConfigError(f"{path}: instruction override for {key} must be non-empty text")

    base = path.parent

    def _dir(key: str) -> Path:
        value = Path(str(_require(raw, key, str(path))))
        return value if value.is_absolute() else base / value

    teacher = raw.get("teacher")
    embedding = raw.get("embedding")
    concurrency = int(raw.get("concurrency", 1))
    if concurrency < 1:
        raise ConfigError(f"{path}: concurrency must be >= 1")
    return RunConfig(
        corpus_dir=_dir("corpus_dir"),
        output_dir=_dir("output_dir"),
        cache_dir=_dir("cache_dir"),
        target=_endpoint_block(_require(raw, "target", str(path)), f"{path}: target"),
        teacher=_endpoint_block(teacher, f"{path}: teacher") if teacher else None,
        embedding=_endpoint_block(embedding, f"{path}: embedding") if embedding else None,
        seed=int(raw.get("seed", 0)),
        concurrency=concurrency,
        k_neighbors=int(raw.get("k_neighbors", 5)),
        n_fewshot=int(raw.get("n_fewshot", 5)),
        max_validity_tries=int(raw.get("max_validity_tries", MAX_VALIDITY_TRIES)),
        ensemble=ensemble,
        retry=retry,
        instructions=dict(instructions),
    )


def _load_default_instructions() -> dict:
    text = resources.files("medharness").joinpath("data/default_instructions.yaml").read_text(
        encoding="utf-8"
    )
    return yaml.safe_load(text)


_DEFAULT_INSTRUCTIONS: dict | None = None


def default_instruction(dataset: Dataset) -> str:
    global _DEFAULT_INSTRUCTIONS
    if _DEFAULT_INSTRUCTIONS is None:
        _DEFAULT_INSTRUCTIONS = _load_default_instructions()
    return _DEFAULT_INSTRUCTIONS[Dataset(dataset).value]


def instruction_for(config: RunConfig, dataset: Dataset) -> str:
    override = config.instructions.get(Dataset(dataset).value)
    return override if override else default_instruction(dataset)


def config_fingerprint(config: RunConfig, dataset: Dataset) -> str:
    """Digest of everything that shapes results except the stage itself."""
    material = {
        "dataset": Dataset(dataset).value,
        "instruction": instruction_for(config, dataset),
        "template": template_fingerprint(),
        "seed": config.seed,
        "target_model": config.target.model_id,
        "teacher_model": config.teacher.model_id if config.teacher else None,
        "embedding_model": config.embedding.model_id if config.embedding else BUILTIN_EMBEDDING,
        "ensemble": {"runs": config.ensemble.n_runs, "temperature": config.ensemble.temperature},
        "k_neighbors": config.k_neighbors,
        "n_fewshot": config.n_fewshot,
        "max_validity_tries": config.max_validity_tries,
    }
    canon = json.dumps(material, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def build_endpoint(spec: EndpointConfig, retry: RetryPolicy | None = None):
    """Open the endpoint a config block describes (`mock:` URLs run in process)."""
    kwargs = {}
    if not spec.url.startswith("mock:"):
        kwargs = {"timeout": spec.timeout, "retry": retry or RetryPolicy()}
    return open_endpoint(spec.url, spec.model_id, api_key_env=spec.api_key_env, **kwargs)
