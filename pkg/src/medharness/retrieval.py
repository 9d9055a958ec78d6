"""Embedding index and exact cosine nearest-neighbor search over the pool.

Similarity is the cosine of question-text embeddings (contexts excluded),
computed per pair in float64 so results match a brute-force scan bit for bit.
Ordering is (similarity descending, item id ascending); search is exhaustive,
never approximate.

Two embedding providers exist: a remote one backed by an embeddings endpoint,
and a builtin deterministic lexical one (hashed term frequency weighted by
inverse document frequency, L2-normalized) that needs no network and anchors
the offline test suite. Indexes persist as JSON lines: one header with
provider metadata, then one vector per pool item.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from hashlib import blake2b
from pathlib import Path

import numpy as np

from .corpus import McqItem
from .errors import DataError

__all__ = [
    "EmbeddingVector",
    "NeighborSet",
    "BuiltinProvider",
    "RemoteProvider",
    "VectorIndex",
    "build_index",
    "nearest",
    "next_most_similar",
    "token_bucket",
    "tokenize",
]

DEFAULT_DIM = 512

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def token_bucket(token: str, dim: int) -> int:
    """Stable hash bucket for a token; independent of process and platform."""
    digest = blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dim


@dataclass(frozen=True)
class EmbeddingVector:
    item_id: str
    values: np.ndarray
    provider_id: str


@dataclass(frozen=True)
class NeighborSet:
    query_id: str
    neighbors: tuple[tuple[str, float], ...]
    # Retained so replacements beyond the initial k can be ranked without
    # re-embedding; not part of the value.
    query_vector: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(item_id for item_id, _ in self.neighbors)


class BuiltinProvider:
    """Deterministic lexical embeddings: hashed tf-idf, L2-normalized.

    idf is fit on the pool at index build time: ln((1+N)/(1+df)) + 1 per hash
    bucket, where df counts pool documents containing the bucket. Buckets
    unseen at fit time get the df=0 weight.
    """

    def __init__(self, dim: int = DEFAULT_DIM, idf: dict[int, float] | None = None, n_docs: int = 0):
        self.dim = dim
        self.idf = dict(idf or {})
        self.n_docs = n_docs

    @property
    def provider_id(self) -> str:
        return f"builtin-tfidf-v1:dim={self.dim}"

    @classmethod
    def fit(cls, texts: list[str], dim: int = DEFAULT_DIM) -> "BuiltinProvider":
        df: dict[int, int] = {}
        for text in texts:
            buckets = {token_bucket(tok, dim) for tok in tokenize(text)}
            for b in buckets:
                df[b] = df.get(b, 0) + 1
        n = len(texts)
        idf = {b: math.log((1 + n) / (1 + count)) + 1.0 for b, count in df.items()}
        return cls(dim=dim, idf=idf, n_docs=n)

    def _bucket_weight(self, bucket: int) -> float:
        try:
            return self.idf[bucket]
        except KeyError:
            return math.log((1 + self.n_docs) / 1) + 1.0

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise DataError("cannot embed empty text")
        vec = np.zeros(self.dim, dtype=np.float64)
        for tok in tokens:
            b = token_bucket(tok, self.dim)
            vec[b] += self._bucket_weight(b)
        norm = float(np.linalg.norm(vec))
        return vec / norm


class RemoteProvider:
    """Embeddings from an endpoint; dimension fixed by the first response."""

    def __init__(self, endpoint, model: str):
        self.endpoint = endpoint
        self.model = model
        self.dim: int | None = None

    @property
    def provider_id(self) -> str:
        return f"remote:{self.model}"

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise DataError("cannot embed empty text")
        [values] = self.endpoint.embed_batch([text], self.model)
        vec = np.asarray(values, dtype=np.float64)
        if self.dim is None:
            self.dim = vec.shape[0]
        elif vec.shape[0] != self.dim:
            raise DataError(f"embedding dimension changed: {vec.shape[0]} != {self.dim}")
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise DataError("endpoint returned a zero embedding")
        return vec / norm


class VectorIndex:
    """Immutable set of pool vectors with exact cosine search."""

    def __init__(self, provider, ids: list[str], vectors: list[np.ndarray]):
        if len(ids) != len(set(ids)):
            raise DataError("duplicate item ids in index")
        self.provider = provider
        self._ids = list(ids)
        self._vectors = [np.asarray(v, dtype=np.float64) for v in vectors]

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    def embed_query(self, item: McqItem) -> np.ndarray:
        # Similarity is over question text only; contexts stay out.
        return self.provider.embed(item.question)

    def rank_all(self, query_vector: np.ndarray, exclude_id: str | None = None) -> list[tuple[str, float]]:
        scored = []
        for item_id, vec in zip(self._ids, self._vectors):
            if item_id == exclude_id:
                continue
            # One np.dot per pair keeps the arithmetic identical to the
            # brute-force oracle; no blocked matmul reassociation.
            scored.append((item_id, float(np.dot(vec, query_vector))))
        scored.sort(key=lambda pair: (-pair[1], pair[0]))
        return scored

    def nearest(self, query: McqItem, k: int) -> NeighborSet:
        if k < 1:
            raise DataError("k must be >= 1")
        if k > len(self._ids):
            raise DataError(f"k={k} exceeds pool size {len(self._ids)}")
        qvec = self.embed_query(query)
        ranked = self.rank_all(qvec, exclude_id=query.id)
        if len(ranked) < k:
            raise DataError(f"k={k} exceeds available pool after excluding {query.id}")
        return NeighborSet(query_id=query.id, neighbors=tuple(ranked[:k]), query_vector=qvec)

    # -- persistence ---------------------------------------------------

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header: dict = {
            "schema": 1,
            "provider_id": self.provider.provider_id,
            "dim": int(self._vectors[0].shape[0]) if self._vectors else 0,
            "count": len(self._ids),
        }
        if isinstance(self.provider, BuiltinProvider):
            header["idf"] = {str(b): w for b, w in sorted(self.provider.idf.items())}
            header["n_docs"] = self.provider.n_docs
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for item_id, vec in zip(self._ids, self._vectors):
                f.write(json.dumps({"item_id": item_id, "values": vec.tolist()}) + "\n")

    @classmethod
    def load(cls, path: str | Path, provider=None) -> "VectorIndex":
        path = Path(path)
        if not path.exists():
            raise DataError(f"index file missing: {path}")
        with open(path, encoding="utf-8") as f:
            try:
                header = json.loads(f.readline())
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: bad index header: {exc}") from exc
            if provider is None:
                if not header["provider_id"].startswith("builtin-tfidf-v1"):
                    raise DataError(
                        f"{path}: index was built by {header['provider_id']}; pass that provider to load it"
                    )
                provider = BuiltinProvider(
                    dim=header["dim"],
                    idf={int(b): w for b, w in header.get("idf", {}).items()},
                    n_docs=header.get("n_docs", 0),
                )
            if provider.provider_id != header["provider_id"]:
                raise DataError(
                    f"{path}: index provider {header['provider_id']} does not match {provider.provider_id}"
                )
            ids, vectors = [], []
            for line in f:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                ids.append(row["item_id"])
                vectors.append(np.asarray(row["values"], dtype=np.float64))
        if len(ids) != header["count"]:
            raise DataError(f"{path}: header count {header['count']} != {len(ids)} rows")
        return cls(provider, ids, vectors)


def build_index(pool: list[McqItem], provider=None) -> VectorIndex:
    """Embed every pool item's question; fit the builtin provider if none given."""
    if not pool:
        raise DataError("cannot index an empty pool")
    if provider is None:
        provider = BuiltinProvider.fit([item.question for item in pool])
    ids = [item.id for item in pool]
    vectors = [provider.embed(item.question) for item in pool]
    return VectorIndex(provider, ids, vectors)


def nearest(query: McqItem, index: VectorIndex, k: int) -> NeighborSet:
    return index.nearest(query, k)


def next_most_similar(neighbor_set: NeighborSet, consumed: set[str], index: VectorIndex) -> str:
    """Highest-similarity pool id not yet consumed, beyond the initial k if needed."""
    if neighbor_set.query_vector is None:
        raise DataError(f"{neighbor_set.query_id}: neighbor set lacks its query vector")
    ranked = index.rank_all(neighbor_set.query_vector, exclude_id=neighbor_set.query_id)
    for item_id, _ in ranked:
        if item_id not in consumed:
            return item_id
    raise DataError(f"{neighbor_set.query_id}: pool exhausted while seeking replacements")
