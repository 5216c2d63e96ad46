"""Shared primitives: vocabulary, token sequences, distributions, embeddings.

Token sequences are plain tuples of ints and distributions are read-only
float64 numpy vectors. Both are immutable, so they can be shared between
drafter workers without copying.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_TOL = 1e-9

TokenSeq = tuple  # tuple[int, ...]


class DomainError(ValueError):
    """Input outside an operation's domain (bad token id, zero vector, ...)."""


class DegenerateResidual(ArithmeticError):
    """max(0, o - q) is identically zero, so there is nothing to renormalize."""


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    eos_id: int

    def __post_init__(self):
        if len(self.tokens) < 2:
            raise DomainError("vocabulary needs at least 2 tokens")
        if not 0 <= self.eos_id < len(self.tokens):
            raise DomainError(f"eos id {self.eos_id} outside [0, {len(self.tokens)})")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def check(self, token: int) -> int:
        if not isinstance(token, (int, np.integer)) or not 0 <= token < self.size:
            raise DomainError(f"token id {token!r} not in vocabulary of size {self.size}")
        return int(token)

    def check_seq(self, ids: Sequence[int]) -> TokenSeq:
        return tuple(self.check(t) for t in ids)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


class EmbeddingTable:
    """One fixed vector per token id, used for draft-accuracy scoring."""

    def __init__(self, vectors):
        arr = np.array(vectors, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] == 0:
            raise DomainError("embeddings must be a non-empty (vocab, dim) matrix")
        norms = np.linalg.norm(arr, axis=1)
        if np.any(norms == 0):
            bad = int(np.flatnonzero(norms == 0)[0])
            raise DomainError(f"embedding for token {bad} has zero norm")
        arr.setflags(write=False)
        self.vectors = arr

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]

    def __getitem__(self, token: int) -> np.ndarray:
        if not 0 <= token < len(self):
            raise DomainError(f"no embedding for token {token}")
        return self.vectors[token]


def as_distribution(probs, size: int | None = None) -> np.ndarray:
    """Validate ``probs`` and return it as a read-only float64 vector."""
    arr = np.array(probs, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DomainError("distribution must be a non-empty vector")
    if size is not None and arr.size != size:
        raise DomainError(f"distribution has length {arr.size}, expected {size}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise DomainError("distribution entries must be finite and non-negative")
    if abs(arr.sum() - 1.0) > PROB_TOL:
        raise DomainError(f"distribution sums to {arr.sum()!r}, not 1")
    arr.setflags(write=False)
    return arr


def normalize(weights) -> np.ndarray:
    arr = np.array(weights, dtype=np.float64)
    total = arr.sum()
    if total <= 0:
        raise DomainError("cannot normalize a vector with no positive mass")
    arr /= total
    arr.setflags(write=False)
    return arr


def one_hot(token: int, size: int) -> np.ndarray:
    arr = np.zeros(size)
    arr[token] = 1.0
    arr.setflags(write=False)
    return arr


def concat(prefix: Sequence[int], token: int, vocab: Vocabulary | None = None) -> TokenSeq:
    if vocab is not None:
        token = vocab.check(token)
    elif not isinstance(token, (int, np.integer)) or token < 0:
        raise DomainError(f"invalid token id {token!r}")
    return tuple(prefix) + (int(token),)


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DomainError(f"dimension mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DomainError("cosine similarity of a zero-norm vector")
    # clip guards against 1.0000000000000002 from rounding
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def residual_distribution(o, q) -> np.ndarray:
    """norm(max(0, o - q)); raises DegenerateResidual when o <= q everywhere."""
    o = np.asarray(o, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if o.shape != q.shape:
        raise DomainError("residual of distributions over different vocabularies")
    diff = np.maximum(o - q, 0.0)
    total = diff.sum()
    if total <= 0.0:
        raise DegenerateResidual("target and draft distributions coincide")
    diff /= total
    diff.setflags(write=False)
    return diff


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def load_vocabulary(path) -> tuple[Vocabulary, EmbeddingTable | None]:
    """Read ``{"tokens", "eos", "embedding_dim", "embeddings"}`` JSON."""
    doc = json.loads(Path(path).read_text())
    return vocabulary_from_dict(doc)


def vocabulary_from_dict(doc: dict) -> tuple[Vocabulary, EmbeddingTable | None]:
    vocab = Vocabulary(tuple(str(t) for t in doc["tokens"]), int(doc["eos"]))
    table = None
    if doc.get("embeddings") is not None:
        table = EmbeddingTable(doc["embeddings"])
        if len(table) != vocab.size:
            raise DomainError(f"{len(table)} embeddings for {vocab.size} tokens")
        dim = doc.get("embedding_dim")
        if dim is not None and int(dim) != table.dim:
            raise DomainError(f"embedding_dim {dim} but vectors have length {table.dim}")
    return vocab, table


def vocabulary_to_dict(vocab: Vocabulary, table: EmbeddingTable | None = None) -> dict:
    doc = {"tokens": list(vocab.tokens), "eos": vocab.eos_id}
    if table is not None:
        doc["embedding_dim"] = table.dim
        doc["embeddings"] = table.vectors.tolist()
    return doc

