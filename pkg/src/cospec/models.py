"""Next-token models: the abstraction plus tabular stand-ins for drafters and target."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import DomainError, as_distribution, normalize


class Model(Protocol):
    vocab_size: int

    def next_distribution(self, context: Sequence[int]) -> np.ndarray: ...


class TabularModel:
    """Order-n lookup table keyed by the last n context tokens.

    Contexts shorter than ``order`` or missing from the table get ``fallback``.
    """

    def __init__(self, order: int, table: Mapping[tuple, object], fallback, name: str = ""):
        if order < 0:
            raise DomainError("order must be >= 0")
        self.order = int(order)
        self.fallback = as_distribution(fallback)
        self.vocab_size = self.fallback.size
        self.name = name
        self.table: dict[tuple, np.ndarray] = {}
        for ctx, probs in table.items():
            ctx = tuple(int(t) for t in ctx)
            if len(ctx) != self.order:
                raise DomainError(f"context {ctx} has length {len(ctx)}, order is {self.order}")
            if any(not 0 <= t < self.vocab_size for t in ctx):
                raise DomainError(f"context {ctx} has ids outside the vocabulary")
            self.table[ctx] = as_distribution(probs, self.vocab_size)

    def key(self, context: Sequence[int]) -> tuple | None:
        if len(context) < self.order:
            return None
        return tuple(context[len(context) - self.order:])

    def next_distribution(self, context: Sequence[int]) -> np.ndarray:
        key = self.key(context)
        if key is None:
            return self.fallback
        return self.table.get(key, self.fallback)

    def __repr__(self):
        return f"TabularModel(name={self.name!r}, order={self.order}, entries={len(self.table)})"

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "fallback": self.fallback.tolist(),
            "entries": [
                {"ctx": list(ctx), "probs": probs.tolist()}
                for ctx, probs in sorted(self.table.items())
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict, name: str = "") -> "TabularModel":
        table = {tuple(e["ctx"]): e["probs"] for e in doc.get("entries", [])}
        return cls(int(doc["order"]), table, doc["fallback"], name=name)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TabularModel":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), name=path.stem)


@dataclass(frozen=True)
class DomainProfile:
    domain_id: str
    bias_strength: float

    def __post_init__(self):
        if not 0.0 <= self.bias_strength <= 1.0:
            raise DomainError(f"bias_strength {self.bias_strength} outside [0, 1]")


def specialize(base: TabularModel, profile: DomainProfile, domain_table: TabularModel) -> TabularModel:
    """Mix a shared base table with a domain table, context by context."""
    if base.vocab_size != domain_table.vocab_size:
        raise DomainError("base and domain tables use different vocabularies")
    if base.order != domain_table.order:
        raise DomainError("base and domain tables have different orders")
    w = profile.bias_strength

    def mix(p, q):
        if w == 0.0:
            return p
        if w == 1.0:
            return q
        return normalize((1.0 - w) * p + w * q)

    table = {}
    for ctx in sorted(set(base.table) | set(domain_table.table)):
        table[ctx] = mix(base.table.get(ctx, base.fallback),
                         domain_table.table.get(ctx, domain_table.fallback))
    fallback = mix(base.fallback, domain_table.fallback)
    return TabularModel(base.order, table, fallback, name=f"{base.name}+{profile.domain_id}")


class FailingModel:
    """Wraps a model and raises ``NodeFailure`` after a number of calls.

    Used to exercise the drop-the-branch policy for drafter failures.
    """

    def __init__(self, inner, fail_after: int):
        self.inner = inner
        self.vocab_size = inner.vocab_size
        self.calls = 0
        self.fail_after = fail_after

    def next_distribution(self, context):
        self.calls += 1
        if self.calls > self.fail_after:
            raise NodeFailure(f"model failed after {self.fail_after} calls")
        return self.inner.next_distribution(context)


class NodeFailure(RuntimeError):
    pass
