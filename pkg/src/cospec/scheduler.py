"""Batch assignment and speculation budgeting for the verification server.

A plan selects requests from the pool, trims their draft budgets so the
batch stays under the token cap, and minimises T_ttl / b + lambda * Gamma
subject to latency and memory caps.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


class InfeasibleError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class AffineLatency:
    """ms = c0 + cb * batch + cl * length + ct * tokens; all coefficients >= 0."""
    c0: float = 0.0
    cb: float = 0.0
    cl: float = 0.0
    ct: float = 0.0

    def __post_init__(self):
        if min(self.c0, self.cb, self.cl, self.ct) < 0:
            raise ValueError(f"latency coefficients must be non-negative: {self}")

    def __call__(self, b: int, l: int, tokens: float) -> float:
        return self.c0 + self.cb * b + self.cl * l + self.ct * tokens

    def to_dict(self) -> dict:
        return {"c0": self.c0, "cb": self.cb, "cl": self.cl, "ct": self.ct}

    @classmethod
    def from_dict(cls, doc: dict) -> "AffineLatency":
        return cls(**{k: float(doc.get(k, 0.0)) for k in ("c0", "cb", "cl", "ct")})


@dataclass(frozen=True)
class LatencyModel:
    ssm: AffineLatency = AffineLatency(1.0, 0.5, 0.001, 2.0)
    llm: AffineLatency = AffineLatency(20.0, 1.0, 0.01, 0.5)

    def t_ssm(self, b, l, gamma):
        return self.ssm(b, l, gamma)

    def t_llm(self, b, l, total):
        return self.llm(b, l, total)

    def to_dict(self) -> dict:
        return {"ssm": self.ssm.to_dict(), "llm": self.llm.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "LatencyModel":
        return cls(AffineLatency.from_dict(doc.get("ssm", {})),
                   AffineLatency.from_dict(doc.get("llm", {})))


@dataclass(frozen=True)
class SchedulerConfig:
    lam: float = 0.01
    t_max: float = 1e9
    m_max: float = 16.0
    gamma_max: int = 64
    solver: str = "exact"           # exact | greedy
    exact_threshold: int = 12
    gamma0: int = 4
    gamma_cap: int = 8
    adapt_gamma: bool = True

    def __post_init__(self):
        if self.t_max <= 0 or self.m_max <= 0 or self.gamma_max <= 0:
            raise ValueError("scheduler caps must be positive")
        if self.solver not in ("exact", "greedy"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.gamma0 < 1 or self.gamma_cap < 1:
            raise ValueError("gamma0 and gamma_cap must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "SchedulerConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown scheduler keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class Request:
    id: int
    prompt: tuple
    max_new: int = 128
    arrival_ms: float = 0.0
    domain: str = ""
    mem: float = 1.0
    gamma: int = 4
    generated: list = field(default_factory=list)
    accept_len_last: int = 0
    steps: int = 0

    @property
    def seq_len(self) -> int:
        return len(self.prompt) + len(self.generated)

    @property
    def remaining(self) -> int:
        return self.max_new - len(self.generated)


@dataclass
class BatchPlan:
    selected: tuple = ()            # pool indices, ascending
    gammas: tuple = ()              # trimmed budgets aligned with ``selected``
    critical_len: int = 0
    ttl: float = 0.0
    objective: float = float("inf")
    infeasible: str | None = None   # violated constraint when nothing fits

    @property
    def b(self) -> int:
        return len(self.selected)

    @property
    def total_tokens(self) -> int:
        return int(sum(self.gammas))

    def mask(self, pool_size: int) -> list[int]:
        sel = set(self.selected)
        return [1 if i in sel else 0 for i in range(pool_size)]


def predict_ttl(b: int, l: int, gammas: Sequence[int], lat: LatencyModel) -> float:
    """Slowest sequential drafter plus one batched verification pass."""
    if b < 1 or not gammas:
        raise ValueError("cannot predict latency of an empty batch")
    draft = max(lat.t_ssm(b, l, g) for g in gammas)
    return draft + lat.t_llm(b, l, sum(gammas))


def adaptive_speculation(gammas: Sequence[int], gamma_max: int) -> list[int]:
    """Trim budgets by repeatedly decrementing the largest (lowest index on ties).

    Computed in closed form: every budget is capped at level h + 1, where h is
    the highest level whose capped sum fits, then the lowest-indexed budgets
    sitting at h + 1 absorb the remaining excess.
    """
    g = [int(x) for x in gammas]
    if any(x < 1 for x in g):
        raise ValueError("every gamma must be >= 1")
    if len(g) > gamma_max:
        raise InfeasibleError(f"{len(g)} requests cannot each keep a draft token under Gamma_max={gamma_max}")
    if sum(g) <= gamma_max:
        return g
    arr = np.array(g)
    lo, hi = 1, int(arr.max())          # sum(min(g, lo)) <= gamma_max < sum(min(g, hi))
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if np.minimum(arr, mid).sum() <= gamma_max:
            lo = mid
        else:
            hi = mid
    h = lo
    out = np.minimum(arr, h + 1)
    excess = int(out.sum()) - gamma_max
    for i in range(len(out)):
        if excess == 0:
            break
        if out[i] == h + 1:
            out[i] -= 1
            excess -= 1
    return out.tolist()


def evaluate(pool: Sequence[Request], idx: Sequence[int], cfg: SchedulerConfig,
             lat: LatencyModel) -> BatchPlan:
    """Plan for a fixed selection; ``infeasible`` names the first violated cap."""
    idx = tuple(sorted(idx))
    b = len(idx)
    mem = sum(pool[i].mem for i in idx)
    if mem > cfg.m_max:
        return BatchPlan(idx, infeasible="memory")
    if b > cfg.gamma_max:
        return BatchPlan(idx, infeasible="token_budget")
    gammas = tuple(adaptive_speculation([pool[i].gamma for i in idx], cfg.gamma_max))
    l = max(pool[i].seq_len for i in idx)
    ttl = predict_ttl(b, l, gammas, lat)
    if ttl > cfg.t_max:
        return BatchPlan(idx, gammas, l, ttl, infeasible="latency")
    obj = ttl / b + cfg.lam * sum(gammas)
    return BatchPlan(idx, gammas, l, ttl, obj)


def _better(a: BatchPlan, b: BatchPlan | None) -> bool:
    if b is None:
        return True
    if a.objective != b.objective:
        return a.objective < b.objective
    if a.b != b.b:
        return a.b > b.b
    return a.selected < b.selected


def _exact(pool, cfg, lat) -> BatchPlan | None:
    """Depth-first enumeration of subsets; memory only grows, so prune on it."""
    n = len(pool)
    best = None
    chosen: list[int] = []

    def dfs(start: int, mem: float):
        nonlocal best
        for i in range(start, n):
            m = mem + pool[i].mem
            if m > cfg.m_max:
                continue
            chosen.append(i)
            plan = evaluate(pool, chosen, cfg, lat)
            if plan.infeasible is None and _better(plan, best):
                best = plan
            if len(chosen) < cfg.gamma_max:
                dfs(i + 1, m)
            chosen.pop()

    dfs(0, 0.0)
    return best


def _greedy(pool, cfg, lat) -> BatchPlan | None:
    order = sorted(range(len(pool)), key=lambda i: (pool[i].seq_len, i))
    best = None
    chosen: list[int] = []
    for i in order:
        plan = evaluate(pool, chosen + [i], cfg, lat)
        if plan.infeasible is not None:
            continue
        if best is not None and not plan.objective < best.objective:
            break
        chosen.append(i)
        best = plan
    return best


def batch_assign(pool: Sequence[Request], cfg: SchedulerConfig, lat: LatencyModel) -> BatchPlan:
    if not pool:
        raise ValueError("batch_assign needs a non-empty pool")
    if cfg.solver == "exact" and len(pool) <= cfg.exact_threshold:
        best = _exact(pool, cfg, lat)
    else:
        best = _greedy(pool, cfg, lat)
    if best is None:
        return BatchPlan(infeasible=_diagnose(pool, cfg, lat))
    return best


def _diagnose(pool, cfg, lat) -> str:
    """Name the constraints that rule out every single-request batch."""
    reasons = {evaluate(pool, [i], cfg, lat).infeasible for i in range(len(pool))}
    reasons.discard(None)
    return "+".join(sorted(reasons)) or "unknown"


def update_gamma(req: Request, accept_len: int, cfg: SchedulerConfig) -> None:
    req.accept_len_last = accept_len
    if cfg.adapt_gamma:
        req.gamma = int(min(max(accept_len + 1, 1), cfg.gamma_cap))


REGRESSORS = ("b", "l", "tokens")


def calibrate(samples: Sequence[Sequence[float]]) -> tuple[AffineLatency, dict]:
    """Least-squares fit of ms = c0 + cb*b + cl*l + ct*tokens.

    Returns the clamped coefficients and residual statistics.
    """
    data = np.asarray(samples, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise CalibrationError("no calibration samples")
    if data.shape[1] != 4:
        raise CalibrationError("samples must have columns b, l, tokens, ms")
    if data.shape[0] < 4:
        raise CalibrationError(f"need at least 4 samples, got {data.shape[0]}")
    X = np.column_stack([np.ones(len(data)), data[:, :3]])
    y = data[:, 3]
    for j, name in enumerate(REGRESSORS, start=1):
        if np.unique(X[:, j]).size < 2:
            raise CalibrationError(f"regressor '{name}' takes a single value; cannot fit its slope")
        if np.linalg.matrix_rank(X[:, : j + 1]) < j + 1:
            raise CalibrationError(f"regressor '{name}' is collinear with earlier columns")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    coef = np.maximum(coef, 0.0)
    resid = y - X @ coef
    stats = {
        "n": int(len(y)),
        "rmse": float(np.sqrt(np.mean(resid ** 2))),
        "max_abs": float(np.max(np.abs(resid))),
    }
    return AffineLatency(*(float(c) for c in coef)), stats


def read_samples(path) -> list[list[float]]:
    """Parse a ``b,l,tokens,ms`` CSV."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["b", "l", "tokens", "ms"]:
            raise CalibrationError(f"{path}: expected header b,l,tokens,ms")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[k]) for k in ("b", "l", "tokens", "ms")])
            except (TypeError, ValueError) as exc:
                raise CalibrationError(f"{path}:{lineno}: {exc}") from None
    return rows
