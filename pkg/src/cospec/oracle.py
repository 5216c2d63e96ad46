"""Exact enumeration of every random outcome of the verification code.

The branching sampler below replaces ``Sampler`` and re-runs a callable once
per leaf of its decision tree, so the probabilities obtained are those of
the production code path itself, not of a re-derivation. The expected side
of each comparison comes straight from the target model.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import normalize
from .models import TabularModel
from .sampling import Sampler
from .verification import DraftTree, verify_linear, verify_tree


class BranchingSampler(Sampler):
    """Follows a scripted list of branch indices, then takes branch 0."""

    def __init__(self, script: list[int]):
        self.script = script
        self.taken: list[int] = []
        self.weight = 1.0
        self.pending: list[list[int]] = []

    def _branch(self, options: list[tuple[object, float]]):
        pos = len(self.taken)
        if pos < len(self.script):
            k = self.script[pos]
        else:
            k = 0
            for alt in range(1, len(options)):
                self.pending.append(self.taken + [alt])
        self.taken.append(k)
        value, w = options[k]
        self.weight *= w
        return value

    def uniform(self) -> float:
        raise TypeError("continuous draws cannot be enumerated")

    def accept(self, p: float) -> bool:
        if p >= 1.0:
            return True
        if p <= 0.0:
            return False
        return self._branch([(True, p), (False, 1.0 - p)])

    def categorical(self, probs) -> int:
        probs = np.asarray(probs, dtype=np.float64)
        total = probs.sum()
        opts = [(int(i), probs[i] / total) for i in np.flatnonzero(probs > 0)]
        return self._branch(opts)

    def randrange(self, n: int) -> int:
        return self._branch([(i, 1.0 / n) for i in range(n)])


def enumerate_outcomes(fn: Callable[[Sampler], object]) -> list[tuple[float, object]]:
    """Return ``[(probability, result), ...]`` over all leaves of ``fn``."""
    out = []
    stack: list[list[int]] = [[]]
    while stack:
        s = BranchingSampler(stack.pop())
        result = fn(s)
        out.append((s.weight, result))
        stack.extend(s.pending)
    return out


def emitted_tvd(outcomes, target, prefix) -> float:
    """Largest per-position TVD between emitted tokens and the target.

    For position j the event is "the first j emitted tokens were accepted
    drafts and equal a given tuple". Conditional on any such event the
    token at position j must follow ``target(prefix + tuple)``. The
    comparison is made on joint masses so rare events cannot inflate it.
    """
    worst = 0.0
    max_len = max(len(r.accepted) for _, r in outcomes)
    for j in range(max_len):
        joint: dict[tuple, np.ndarray] = {}
        for w, r in outcomes:
            if r.accept_len < j:
                continue
            head = tuple(r.accepted[:j])
            if head not in joint:
                joint[head] = np.zeros(target.vocab_size)
            joint[head][r.accepted[j]] += w
        tvd = 0.0
        for head, mass in joint.items():
            o = np.asarray(target.next_distribution(tuple(prefix) + head))
            tvd += 0.5 * np.abs(mass - mass.sum() * o).sum()
        worst = max(worst, tvd)
    return worst


def random_distribution(rng: np.random.Generator, size: int, sparsity: float = 0.3):
    while True:
        w = rng.dirichlet(np.full(size, rng.choice([0.3, 1.0, 3.0])))
        mask = rng.random(size) >= sparsity
        w = w * mask
        if w.sum() > 0:
            return normalize(w)


def random_model(rng: np.random.Generator, vocab: int, order: int = 1, name: str = "") -> TabularModel:
    from itertools import product
    table = {ctx: random_distribution(rng, vocab) for ctx in product(range(vocab), repeat=order)}
    return TabularModel(order, table, random_distribution(rng, vocab, 0.0), name=name)


@dataclass
class LinearCase:
    target: TabularModel
    drafter: TabularModel
    prefix: tuple
    gamma: int

    def step(self, sampler: Sampler):
        ctx = self.prefix
        draft, dists = [], []
        for _ in range(self.gamma):
            q = self.drafter.next_distribution(ctx)
            tok = sampler.categorical(q)
            draft.append(tok)
            dists.append(q)
            ctx = ctx + (tok,)
        return verify_linear(self.target, self.prefix, draft, dists, sampler)

    def tvd(self) -> float:
        return emitted_tvd(enumerate_outcomes(self.step), self.target, self.prefix)


def random_linear_case(rng: np.random.Generator, max_vocab: int = 6, max_gamma: int = 3) -> LinearCase:
    vocab = int(rng.integers(2, max_vocab + 1))
    gamma = int(rng.integers(1, max_gamma + 1))
    target = random_model(rng, vocab, name="target")
    kind = rng.random()
    if kind < 0.1:
        drafter = target
    else:
        drafter = random_model(rng, vocab, name="drafter")
    prefix = (int(rng.integers(vocab)),)
    return LinearCase(target, drafter, prefix, gamma)


class LazySampledTree(DraftTree):
    """Sampled draft tree whose children are drawn only when visited.

    Sibling k at depth d is drawn from ``drafters[k]`` with earlier siblings'
    tokens excluded, exactly as an eagerly built tree would be; deferring
    the draw does not change the joint law because subtrees are drawn
    independently given their path.
    """

    def __init__(self, drafters, prefix, branching, sampler: Sampler):
        super().__init__(prefix[-1] if prefix else None, sampled=True, max_depth=len(branching))
        self.drafters = drafters
        self.prefix = tuple(prefix)
        self.branching = branching
        self.sampler = sampler

    def iter_children(self, node: int):
        depth = self.nodes[node].depth
        if depth >= len(self.branching):
            return
        ctx = self.prefix + self.path_tokens(node)
        for k in range(self.branching[depth]):
            kids = self.nodes[node].children
            if k < len(kids):
                yield kids[k]
                continue
            q = np.asarray(self.drafters[k].next_distribution(ctx))
            restricted = q.copy()
            restricted[[self.nodes[c].token for c in kids]] = 0.0
            if restricted.sum() <= 0.0:
                return
            tok = self.sampler.categorical(restricted)
            yield self.add(node, tok, float(q[tok]), k, q)


@dataclass
class TreeCase:
    target: TabularModel
    drafters: list
    prefix: tuple
    branching: list[int]
    greedy_tree: DraftTree | None = None

    def step(self, sampler: Sampler):
        if self.greedy_tree is not None:
            return verify_tree(self.target, self.prefix, self.greedy_tree, sampler)
        tree = LazySampledTree(self.drafters, self.prefix, self.branching, sampler)
        return verify_tree(self.target, self.prefix, tree, sampler)

    def tvd(self) -> float:
        return emitted_tvd(enumerate_outcomes(self.step), self.target, self.prefix)


def random_tree_case(rng: np.random.Generator, max_vocab: int = 5, max_siblings: int = 3,
                     max_depth: int = 2, greedy: bool = False) -> TreeCase:
    vocab = int(rng.integers(2, max_vocab + 1))
    depth = int(rng.integers(1, max_depth + 1))
    branching = [int(rng.integers(1, min(max_siblings, vocab) + 1)) for _ in range(depth)]
    target = random_model(rng, vocab, name="target")
    drafters = [random_model(rng, vocab, name=f"d{k}") for k in range(max_siblings)]
    prefix = (int(rng.integers(vocab)),)
    case = TreeCase(target, drafters, prefix, branching)
    if greedy:
        case.greedy_tree = random_greedy_tree(rng, vocab, prefix, branching)
    return case


def random_greedy_tree(rng, vocab, prefix, branching) -> DraftTree:
    tree = DraftTree(prefix[-1], sampled=False)
    frontier = [DraftTree.ROOT]
    for width in branching:
        nxt = []
        for node in frontier:
            for tok in rng.choice(vocab, size=width, replace=False):
                nxt.append(tree.add(node, int(tok), float(rng.uniform(0.05, 1.0)), 0))
        frontier = nxt
    return tree


def check_distribution(trials: int, max_vocab: int, max_gamma: int, seed: int = 0,
                       tree: bool = False):
    """Run ``trials`` random cases; yield ``(case, tvd)`` for each."""
    rng = np.random.default_rng(seed)
    for i in range(trials):
        if tree:
            case = random_tree_case(rng, max_vocab=max_vocab, max_depth=max_gamma,
                                    greedy=bool(i % 4 == 3))
        else:
            case = random_linear_case(rng, max_vocab, max_gamma)
        yield case, case.tvd()


def outcome_distribution(outcomes) -> dict:
    dist = defaultdict(float)
    for w, r in outcomes:
        dist[tuple(r.accepted)] += w
    return dict(dist)
