"""Cooperative draft generation: request routing, token fusion, tree selection.

Routing scores combine a drafter's own confidence with how well its past
drafts matched what the target accepted; fusion broadcasts the most
confident token of each iteration back to every routed drafter.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .core import DomainError, EmbeddingTable, cosine_sim
from .models import NodeFailure
from .sampling import Sampler
from .verification import DraftTree, VerificationResult

CLAMP_EPS = 1e-3
PRIOR = 0.5


@dataclass(frozen=True)
class RoutingPolicy:
    alpha: float = 0.9
    beta: float = 0.6
    tau: float = 2.0
    fanout: int = 2
    decay: float = 0.9          # pull of non-routed scores toward the prior
    inherit_column_means: bool = False

    def __post_init__(self):
        if not 0.0 <= self.beta <= self.alpha <= 1.0:
            raise DomainError(f"need 1 >= alpha >= beta >= 0, got alpha={self.alpha}, beta={self.beta}")
        if self.tau < 0:
            raise DomainError("tau must be >= 0")
        if self.fanout < 1:
            raise DomainError("fanout must be >= 1")
        if not 0.0 <= self.decay <= 1.0:
            raise DomainError("decay must be in [0, 1]")


class RoutingMatrix:
    """Per-request score rows, one column per drafter node."""

    def __init__(self, n_nodes: int):
        self.n_nodes = n_nodes
        self.rows: dict[int, np.ndarray] = {}

    def add(self, request_id: int, inherit: bool = False) -> np.ndarray:
        if inherit and self.rows:
            row = np.mean(np.stack(list(self.rows.values())), axis=0)
        else:
            row = np.full(self.n_nodes, PRIOR)
        self.rows[request_id] = row
        return row

    def remove(self, request_id: int) -> None:
        self.rows.pop(request_id, None)

    def __getitem__(self, request_id: int) -> np.ndarray:
        return self.rows[request_id]

    def __setitem__(self, request_id: int, row) -> None:
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (self.n_nodes,) or np.any(row <= 0) or np.any(row >= 1):
            raise DomainError("routing scores must lie strictly inside (0, 1)")
        self.rows[request_id] = row

    def __contains__(self, request_id):
        return request_id in self.rows

    def __len__(self):
        return len(self.rows)


def _clamp(x):
    return np.clip(np.asarray(x, dtype=np.float64), CLAMP_EPS, 1.0 - CLAMP_EPS)


def draft_accuracy(draft: Sequence[int], accepted: Sequence[int], accept_len: int,
                   table: EmbeddingTable) -> np.ndarray:
    if accept_len > len(accepted):
        raise DomainError("accept_len exceeds the accepted sequence")
    acc = np.zeros(len(draft))
    for i in range(min(accept_len, len(draft))):
        acc[i] = cosine_sim(table[accepted[i]], table[draft[i]])
    return acc


def routing_score(confidences, accuracies) -> float:
    """Mean over positions of c*d / (c*d + (1-c)*(1-d)), inputs clamped to (0, 1)."""
    c = _clamp(confidences)
    d = _clamp(accuracies)
    if c.shape != d.shape or c.size == 0:
        raise DomainError("confidences and accuracies must be equally long and non-empty")
    cd = c * d
    return float(np.mean(cd / (cd + (1.0 - c) * (1.0 - d))))


def top_nodes(row, k: int, exclude=()) -> list[int]:
    order = sorted((i for i in range(len(row)) if i not in exclude), key=lambda i: (-row[i], i))
    return order[:k]


def route_request(row, policy: RoutingPolicy, accept_len: float, rng: Sampler,
                  fanout: int | None = None) -> tuple[int, ...]:
    """Pick ``fanout`` distinct drafters for one request.

    Each slot independently uses the top-score operator with probability
    alpha (exploration mode, accept_len < tau) or beta (exploitation),
    otherwise a uniform pick among the nodes not yet chosen.
    """
    n = len(row)
    k = min(policy.fanout if fanout is None else fanout, n)
    p_top = policy.alpha if accept_len < policy.tau else policy.beta
    chosen: list[int] = []
    for _ in range(k):
        if rng.accept(p_top):
            chosen.append(top_nodes(row, 1, exclude=chosen)[0])
        else:
            free = [i for i in range(n) if i not in chosen]
            chosen.append(free[rng.randrange(len(free))])
    return tuple(sorted(chosen))


class Candidate(NamedTuple):
    node: int
    token: int
    conf: float


def fuse_step(candidates: Sequence) -> Candidate:
    """Highest-confidence candidate; ties go to the lowest node id, then token id."""
    if not candidates:
        raise DomainError("token fusion needs at least one candidate")
    best = min((Candidate(*c) for c in candidates), key=lambda c: (-c.conf, c.node, c.token))
    return best


@dataclass
class Branch:
    tokens: list = field(default_factory=list)
    confs: list = field(default_factory=list)
    dists: list = field(default_factory=list)

    def push(self, token, conf, dist):
        self.tokens.append(token)
        self.confs.append(conf)
        self.dists.append(dist)


@dataclass
class DraftRound:
    """Everything a round of K fused iterations produced.

    ``own[n]`` is node n's pure greedy continuation. ``fused_cand[n][i]``
    is node n's greedy token given the fused prefix up to i, and
    ``fused[i]`` the winning candidate of iteration i.
    """
    prefix: tuple
    K: int
    own: dict = field(default_factory=dict)
    fused_cand: dict = field(default_factory=dict)
    fused: list = field(default_factory=list)
    fused_dists: list = field(default_factory=list)
    dropped: list = field(default_factory=list)

    @property
    def nodes(self) -> list[int]:
        return sorted(self.own)

    @property
    def fused_tokens(self) -> list[int]:
        return [c.token for c in self.fused]


class RoundAborted(RuntimeError):
    """Every routed drafter failed during a round."""


def greedy_pick(dist) -> tuple[int, float]:
    tok = int(np.argmax(dist))
    return tok, float(dist[tok])


def drafter_step(model, prefix, own_tokens, fused_tokens):
    """One iteration on both branches for a single drafter."""
    q_own = np.asarray(model.next_distribution(tuple(prefix) + tuple(own_tokens)))
    if list(own_tokens) == list(fused_tokens):
        q_fused = q_own
    else:
        q_fused = np.asarray(model.next_distribution(tuple(prefix) + tuple(fused_tokens)))
    return q_own, q_fused


def cooperative_generate(nodes: Mapping[int, object], prefix: Sequence[int], K: int) -> DraftRound:
    if K < 1:
        raise DomainError("K must be >= 1")
    if not nodes:
        raise DomainError("cooperative generation needs at least one drafter")
    rnd = DraftRound(tuple(prefix), K)
    alive = dict(sorted(nodes.items()))
    for n in alive:
        rnd.own[n] = Branch()
        rnd.fused_cand[n] = Branch()
    for _ in range(K):
        cands = []
        for n, model in list(alive.items()):
            try:
                q_own, q_fused = drafter_step(model, prefix, rnd.own[n].tokens, rnd.fused_tokens)
            except NodeFailure:
                del alive[n]
                rnd.own.pop(n)
                rnd.fused_cand.pop(n)
                rnd.dropped.append(n)
                continue
            rnd.own[n].push(*greedy_pick(q_own), q_own)
            tok, conf = greedy_pick(q_fused)
            rnd.fused_cand[n].push(tok, conf, q_fused)
            cands.append((n, tok, conf))
        if not cands:
            raise RoundAborted("all routed drafters failed")
        win = fuse_step(cands)
        rnd.fused.append(win)
        rnd.fused_dists.append(rnd.fused_cand[win.node].dists[-1])
    return rnd


class _Trie:
    __slots__ = ("children", "token", "conf", "drafter", "dist")

    def __init__(self, token=-1, conf=1.0, drafter=-1, dist=None):
        self.children: dict[int, _Trie] = {}
        self.token = token
        self.conf = conf
        self.drafter = drafter
        self.dist = dist

    def insert(self, tokens, confs, drafters, dists):
        node = self
        for tok, conf, who, dist in zip(tokens, confs, drafters, dists):
            child = node.children.get(tok)
            if child is None:
                child = node.children[tok] = _Trie(tok, conf, who, dist)
            elif (-conf, who) < (-child.conf, child.drafter):
                child.conf, child.drafter, child.dist = conf, who, dist
            node = child


def tree_selection(rnd: DraftRound, budget: int) -> DraftTree:
    """Merge every branch into a prefix tree and keep the ``budget`` best nodes.

    A node's score is the product of confidences on its path. Best-first
    expansion from the root keeps the result prefix-closed.
    """
    if budget < 1:
        raise DomainError("tree budget must be >= 1")
    trie = _Trie()
    for n in rnd.nodes:
        b = rnd.own[n]
        trie.insert(b.tokens, b.confs, [n] * len(b.tokens), b.dists)
    fused = rnd.fused
    trie.insert([c.token for c in fused], [c.conf for c in fused],
                [c.node for c in fused], rnd.fused_dists)
    for n in rnd.nodes:
        fc = rnd.fused_cand[n]
        for i, tok in enumerate(fc.tokens):
            path = [c.token for c in fused[:i]] + [tok]
            confs = [c.conf for c in fused[:i]] + [fc.confs[i]]
            who = [c.node for c in fused[:i]] + [n]
            dists = list(rnd.fused_dists[:i]) + [fc.dists[i]]
            trie.insert(path, confs, who, dists)

    tree = DraftTree(rnd.prefix[-1] if rnd.prefix else None, sampled=False)
    heap: list = []
    counter = 0

    def push(tnode, parent_idx, parent_score, depth, path):
        nonlocal counter
        for tok in sorted(tnode.children):
            child = tnode.children[tok]
            score = parent_score * child.conf
            heapq.heappush(heap, (-score, depth + 1, path + (tok,), counter, child, parent_idx))
            counter += 1

    push(trie, DraftTree.ROOT, 1.0, 0, ())
    while heap and len(tree) < budget:
        neg, depth, path, _, tnode, parent_idx = heapq.heappop(heap)
        idx = tree.add(parent_idx, tnode.token, tnode.conf, tnode.drafter, tnode.dist)
        push(tnode, idx, -neg, depth, path)
    return tree


def update_routing(matrix: RoutingMatrix, request_id: int, rnd: DraftRound,
                   result: VerificationResult, table: EmbeddingTable,
                   policy: RoutingPolicy) -> np.ndarray:
    """Rescore routed nodes from this round; decay the others toward 0.5."""
    row = matrix[request_id].copy()
    for n in range(matrix.n_nodes):
        if n in rnd.own:
            branch = rnd.own[n]
            acc = draft_accuracy(branch.tokens, result.accepted, result.accept_len, table)
            row[n] = routing_score(branch.confs, acc)
        else:
            row[n] = PRIOR + policy.decay * (row[n] - PRIOR)
    matrix[request_id] = row
    return row
