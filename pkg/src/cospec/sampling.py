"""Seeded random source shared by routing and verification.

Every random decision in the engine goes through one of three calls:
``accept(p)`` (a Bernoulli draw from one uniform), ``categorical(probs)``
(inverse-CDF from one uniform) and ``randrange(n)``. Keeping the surface this
small lets the exact-enumeration oracle substitute a branching sampler and
walk every outcome of the real code path.
"""

from __future__ import annotations

import numpy as np


class Sampler:
    def __init__(self, seed=None, *, generator: np.random.Generator | None = None):
        self.rng = generator if generator is not None else np.random.default_rng(seed)

    @classmethod
    def for_request(cls, seed: int, request_id: int, stream: int) -> "Sampler":
        # independent stream per (request, purpose); schedule order never matters
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(request_id, stream))
        return cls(generator=np.random.Generator(np.random.PCG64(ss)))

    def uniform(self) -> float:
        return float(self.rng.random())

    def accept(self, p: float) -> bool:
        return self.uniform() < p

    def categorical(self, probs) -> int:
        probs = np.asarray(probs, dtype=np.float64)
        cdf = np.cumsum(probs)
        u = self.uniform() * cdf[-1]
        idx = int(np.searchsorted(cdf, u, side="right"))
        if idx >= probs.size:
            idx = int(np.flatnonzero(probs > 0)[-1])
        return idx

    def randrange(self, n: int) -> int:
        return int(self.rng.integers(n))
