"""HTTP inference boundary: completions, embeddings, and scripted mocks.

Every model call in the harness goes through `complete()` against an endpoint
object. Real endpoints speak the common completions wire shape
(POST {base}/v1/completions, POST {base}/v1/embeddings). Mock endpoints run
in process, parse the prompt they are handed, and answer from a scripted
policy, which is what the offline test suite and the `mock:` URL scheme use.

Transient transport faults (timeouts, connection drops, 429, 5xx) retry with
exponential backoff; anything else fails immediately. A well-formed response
is never retried, whatever its text says.
"""

from __future__ import annotations

import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, EndpointError

__all__ = [
    "GenerationRequest",
    "GenerationResponse",
    "RetryPolicy",
    "HttpEndpoint",
    "MockEndpoint",
    "mock_model",
    "complete",
    "default_max_tokens",
    "open_endpoint",
    "parse_prompt_tail",
    "GoldAnswerPolicy",
    "GarbagePolicy",
    "FixedTextPolicy",
    "SequencePolicy",
    "FlakyGoldPolicy",
    "StageTablePolicy",
]

MIN_COT_MAX_TOKENS = 256
MAX_COT_MAX_TOKENS = 1024
ANSWER_ONLY_MAX_TOKENS = 32


@dataclass(frozen=True)
class GenerationRequest:
    model_id: str
    prompt: str
    temperature: float = 0.0
    max_tokens: int = ANSWER_ONLY_MAX_TOKENS
    stop_sequences: tuple[str, ...] = ()
    seed: int | None = None

    def __post_init__(self):
        if not self.prompt:
            raise ConfigError("empty prompt")
        if self.temperature < 0.0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise ConfigError(f"max_tokens must be >= 1, got {self.max_tokens}")


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    finish_reason: str = "stop"
    usage: dict = field(default_factory=dict)
    latency: float = 0.0
    retries: int = 0


def default_max_tokens(exemplars, tokenizer=None) -> int:
    """Token budget for a completion, sized from the exemplar explanations.

    Answer-only prompts get a small fixed budget. When explanations are
    present the budget is 1.5x their mean token length, clamped to
    [256, 1024] so one terse or rambling exemplar set cannot starve or
    flood the generation.
    """
    tok = tokenizer or (lambda text: text.split())
    lengths = [len(tok(e.explanation)) for e in exemplars if e.explanation.strip()]
    if not lengths:
        return ANSWER_ONLY_MAX_TOKENS
    target = math.ceil(1.5 * (sum(lengths) / len(lengths)))
    return max(MIN_COT_MAX_TOKENS, min(MAX_COT_MAX_TOKENS, target))


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 3
    backoff_base: float = 0.25
    backoff_cap: float = 8.0

    def delay(self, attempt: int) -> float:
        return min(self.backoff_cap, self.backoff_base * (2 ** attempt))


class HttpEndpoint:
    """Completions/embeddings endpoint over HTTP."""

    def __init__(
        self,
        base_url: str,
        model_id: str,
        api_key_env: str | None = None,
        timeout: float = 120.0,
        retry: RetryPolicy | None = None,
        sleep=time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_id = model_id
        self.timeout = timeout
        self.retry = retry or RetryPolicy()
        self._sleep = sleep
        self._api_key = None
        if api_key_env:
            key = os.environ.get(api_key_env)
            if not key:
                raise ConfigError(f"credential variable {api_key_env} is not set")
            self._api_key = key
        self._session = None

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        return headers

    def _post_json(self, path: str, payload: dict) -> tuple[dict, int]:
        import requests

        if self._session is None:
            self._session = requests.Session()
        url = f"{self.base_url}{path}"
        retries = 0
        attempt = 0
        while True:
            try:
                resp = self._session.post(
                    url, json=payload, headers=self._headers(), timeout=self.timeout
                )
                status = resp.status_code
                if status == 429 or 500 <= status <= 599:
                    raise _Transient(f"status {status}")
                if status != 200:
                    raise EndpointError(f"{url}: HTTP {status}: {resp.text[:300]}")
                try:
                    return resp.json(), retries
                except ValueError as exc:
                    raise EndpointError(f"{url}: non-JSON response body") from exc
            except (_Transient, requests.Timeout, requests.ConnectionError) as exc:
                if attempt >= self.retry.max_retries:
                    raise EndpointError(f"{url}: gave up after {attempt + 1} attempts: {exc}") from None
                self._sleep(self.retry.delay(attempt))
                attempt += 1
                retries += 1

    def complete(self, request: GenerationRequest) -> GenerationResponse:
        payload: dict = {
            "model": request.model_id,
            "prompt": request.prompt,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.stop_sequences:
            payload["stop"] = list(request.stop_sequences)
        if request.seed is not None:
            payload["seed"] = request.seed
        started = time.monotonic()
        data, retries = self._post_json("/v1/completions", payload)
        latency = time.monotonic() - started
        try:
            choice = data["choices"][0]
            text = choice["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise EndpointError(f"malformed completion response: {exc!r}") from exc
        if not isinstance(text, str):
            raise EndpointError("malformed completion response: text is not a string")
        return GenerationResponse(
            text=text,
            finish_reason=choice.get("finish_reason", "stop"),
            usage=data.get("usage", {}),
            latency=latency,
            retries=retries,
        )

    def embed_batch(self, texts: list[str], model: str) -> list[list[float]]:
        payload = {"model": model, "input": list(texts)}
        data, _ = self._post_json("/v1/embeddings", payload)
        try:
            rows = sorted(data["data"], key=lambda row: row["index"])
            vectors = [row["embedding"] for row in rows]
        except (KeyError, TypeError) as exc:
            raise EndpointError(f"malformed embeddings response: {exc!r}") from exc
        if len(vectors) != len(texts):
            raise EndpointError(
                f"embeddings response has {len(vectors)} vectors for {len(texts)} inputs"
            )
        return vectors


class _Transient(Exception):
    """Retryable transport condition (429/5xx), internal to HttpEndpoint."""


# -- prompt parsing shared by the mock policies ------------------------


def parse_prompt_tail(prompt: str) -> dict:
    """Split the final question block of a prompt into its parts.

    Returns question text, presented (token, text) option pairs, exemplar
    question texts, and whether the prompt ends at an explanation heading.
    Mocks key their behavior off these parts, so scripted corpora must keep
    parentheses out of question and option text.
    """
    marker = "### Question: "
    start = prompt.rfind(marker)
    if start < 0:
        raise EndpointError("mock endpoint: prompt has no question heading")
    segment = prompt[start + len(marker):]
    options_line = None
    if "\n### Options: " in segment:
        segment, rest = segment.split("\n### Options: ", 1)
        options_line = rest.split("\n", 1)[0]
    else:
        segment = segment.split("\n###", 1)[0]
    source = options_line if options_line is not None else segment
    tokens = list(re.finditer(r"\(([^()\n]+)\)", source))
    options: list[tuple[str, str]] = []
    for i, m in enumerate(tokens):
        end = tokens[i + 1].start() if i + 1 < len(tokens) else len(source)
        text = source[m.end():end].strip()
        options.append((m.group(1), text if text else m.group(1)))
    question = source[: tokens[0].start()].strip() if tokens else segment.strip()
    if options_line is not None and tokens:
        question = segment.strip()

    exemplar_questions = []
    for chunk in prompt.split(marker)[1:-1]:
        body = chunk.split("\n###", 1)[0]
        first = re.search(r"\(([^()\n]+)\)", body)
        exemplar_questions.append(body[: first.start()].strip() if first else body.strip())

    return {
        "question": question,
        "options": options,
        "exemplar_questions": exemplar_questions,
        "wants_explanation": prompt.endswith("### Explanation:"),
        "is_teacher": options_line is not None,
    }


def _word_options(options: list[tuple[str, str]]) -> bool:
    return all(token == text for token, text in options)


def _answer_line(options: list[tuple[str, str]], text: str) -> str:
    for token, opt_text in options:
        if opt_text == text or token == text:
            if _word_options(options):
                return f"### Answer: {token}"
            return f"### Answer: ({token}) {opt_text}"
    raise EndpointError(f"mock endpoint: no presented option has text {text!r}")


class GoldAnswerPolicy:
    """Answer with the designated text's presented token, optionally with a
    short explanation first; one table row per question text."""

    def __init__(self, answers: dict[str, str], explanations: dict[str, str] | None = None):
        self.answers = dict(answers)
        self.explanations = dict(explanations or {})

    def __call__(self, request: GenerationRequest, occurrence: int) -> str:
        parts = parse_prompt_tail(request.prompt)
        q = parts["question"]
        if q not in self.answers:
            raise EndpointError(f"mock endpoint: no scripted answer for question {q!r}")
        answer = _answer_line(parts["options"], self.answers[q])
        if parts["wants_explanation"] or parts["is_teacher"]:
            expl = self.explanations.get(q, f"Reasoning about {q.split('?')[0][:60]}.")
            return f"### Explanation: {expl}\n{answer}"
        return answer


class GarbagePolicy:
    """Always emit text no answer can be extracted from."""

    def __init__(self, text: str = "I am unable to determine the correct option."):
        self.text = text

    def __call__(self, request: GenerationRequest, occurrence: int) -> str:
        return self.text


class FixedTextPolicy:
    """Always emit one literal string, whatever the prompt."""

    def __init__(self, text: str):
        self.text = text

    def __call__(self, request: GenerationRequest, occurrence: int) -> str:
        return self.text


class SequencePolicy:
    """Emit scripted outputs in order per distinct prompt, repeating the last."""

    def __init__(self, outputs: list[str]):
        if not outputs:
            raise ConfigError("sequence policy needs at least one output")
        self.outputs = list(outputs)

    def __call__(self, request: GenerationRequest, occurrence: int) -> str:
        return self.outputs[min(occurrence, len(self.outputs) - 1)]


class FlakyGoldPolicy:
    """Answer wrongly the first `n_wrong` times a failing question is asked,
    then correctly; other questions are answered correctly at once."""

    def __init__(
        self,
        answers: dict[str, str],
        fail_questions: set[str] | None = None,
        n_wrong: int = 3,
        wrong_mode: str = "wrong_option",
    ):
        self.gold = GoldAnswerPolicy(answers)
        self.fail_questions = set(fail_questions or ())
        self.n_wrong = n_wrong
        if wrong_mode not in ("wrong_option", "garbage"):
            raise ConfigError(f"unknown wrong_mode {wrong_mode!r}")
        self.wrong_mode = wrong_mode

    def __call__(self, request: GenerationRequest, occurrence: int) -> str:
        parts = parse_prompt_tail(request.prompt)
        q = parts["question"]
        if q in self.fail_questions and occurrence < self.n_wrong:
            if self.wrong_mode == "garbage":
                return "I really cannot say."
            gold_text = self.gold.answers.get(q)
            for token, text in parts["options"]:
                if text != gold_text and token != gold_text:
                    line = _answer_line(parts["options"], text)
                    return f"### Explanation: A tempting but wrong line of reasoning.\n{line}"
        return self.gold(request, occurrence)


class StageTablePolicy:
    """Decide correctness per (question, prompt shape) from a scripted table.

    The prompt shape is classified from what the policy can see: sampling
    temperature, the number of question blocks, the final heading, and
    whether the exemplar questions match a designated set.
    """

    def __init__(self, table: dict[str, dict], random_exemplar_questions: set[str]):
        # table[question] = {"gold": text, "wrong": text, "stages": [shape, ...]}
        self.table = dict(table)
        self.random_exemplar_questions = set(random_exemplar_questions)

    def classify(self, request: GenerationRequest, parts: dict) -> str:
        if request.temperature >= 0.2:
            return "ensemble"
        if not parts["exemplar_questions"]:
            return "zero_shot"
        if not parts["wants_explanation"]:
            return "random_fewshot"
        if set(parts["exemplar_questions"]) == self.random_exemplar_questions:
            return "random_fewshot_cot"
        return "knn_fewshot_cot"

    def __call__(self, request: GenerationRequest, occurrence: int) -> str:
        parts = parse_prompt_tail(request.prompt)
        q = parts["question"]
        if q not in self.table:
            raise EndpointError(f"mock endpoint: no table row for question {q!r}")
        row = self.table[q]
        shape = self.classify(request, parts)
        text = row["gold"] if shape in row["stages"] else row["wrong"]
        answer = _answer_line(parts["options"], text)
        if parts["wants_explanation"] or parts["is_teacher"]:
            return f"### Explanation: Scripted reasoning.\n{answer}"
        return answer


class MockEndpoint:
    """In-process endpoint driven by a policy callable.

    The policy receives the request plus how many times this exact prompt
    byte string has been seen before, so retry behavior can be scripted.
    Thread-safe; counts every call.
    """

    def __init__(self, policy, model_id: str = "mock"):
        self.policy = policy
        self.model_id = model_id
        self.call_count = 0
        self.prompts: list[str] = []
        self._occurrences: dict[str, int] = {}
        self._lock = threading.Lock()

    def complete(self, request: GenerationRequest) -> GenerationResponse:
        with self._lock:
            n = self._occurrences.get(request.prompt, 0)
            self._occurrences[request.prompt] = n + 1
            self.call_count += 1
            self.prompts.append(request.prompt)
        text = self.policy(request, n)
        return GenerationResponse(text=text, finish_reason="stop", usage={}, latency=0.0)

    def calls_for(self, prompt: str) -> int:
        with self._lock:
            return self._occurrences.get(prompt, 0)


def mock_model(policy) -> MockEndpoint:
    return MockEndpoint(policy)


_POLICY_REGISTRY = {
    "gold": lambda spec: GoldAnswerPolicy(spec["answers"], spec.get("explanations")),
    "garbage": lambda spec: GarbagePolicy(spec.get("text", "I am unable to determine the correct option.")),
    "fixed_text": lambda spec: FixedTextPolicy(spec["text"]),
    "sequence": lambda spec: SequencePolicy(spec["outputs"]),
    "flaky_gold": lambda spec: FlakyGoldPolicy(
        spec["answers"],
        set(spec.get("fail_questions", ())),
        spec.get("n_wrong", 3),
        spec.get("wrong_mode", "wrong_option"),
    ),
    "stage_table": lambda spec: StageTablePolicy(
        spec["table"], set(spec["random_exemplar_questions"])
    ),
}


def mock_from_file(path: str | Path) -> MockEndpoint:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"mock policy file missing: {path}")
    spec = json.loads(path.read_text(encoding="utf-8"))
    name = spec.get("policy")
    if name not in _POLICY_REGISTRY:
        raise ConfigError(f"unknown mock policy {name!r} in {path}")
    return MockEndpoint(_POLICY_REGISTRY[name](spec), model_id=spec.get("model_id", "mock"))


def open_endpoint(url: str, model_id: str, api_key_env: str | None = None, **kwargs):
    """Endpoint factory: `mock:<policy.json>` runs in process, else HTTP."""
    if url.startswith("mock:"):
        endpoint = mock_from_file(url[len("mock:"):])
        endpoint.model_id = model_id or endpoint.model_id
        return endpoint
    return HttpEndpoint(url, model_id, api_key_env=api_key_env, **kwargs)


def complete(request: GenerationRequest, endpoint) -> GenerationResponse:
    """Single entry point for all completions; never mutates the prompt."""
    return endpoint.complete(request)
