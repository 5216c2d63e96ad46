"""Distribution-preserving verification of draft chains and draft trees."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .core import DegenerateResidual, one_hot, residual_distribution
from .sampling import Sampler


class ProtocolError(RuntimeError):
    """A drafter proposed a token its own distribution gives zero mass."""


@dataclass
class VerificationResult:
    accepted: tuple          # tokens to append: accepted drafts + one resampled/bonus token
    accept_len: int          # draft tokens accepted before the first rejection
    rejected_at: int | None = None
    per_node_draft: dict = field(default_factory=dict)

    @property
    def extra_token(self) -> int:
        return self.accepted[-1]


@dataclass
class TreeNode:
    token: int
    prob: float              # draft probability of ``token`` under its drafter
    drafter: int
    parent: int
    depth: int
    dist: np.ndarray | None = None   # drafter's full step distribution
    children: list = field(default_factory=list)


class DraftTree:
    """Prefix tree of draft tokens rooted at the last verified token.

    ``sampled=True`` means each node's token was drawn from ``dist`` with
    earlier siblings excluded; children are then visited in insertion
    (sampling) order. ``sampled=False`` means tokens were chosen
    deterministically (greedy drafting): the proposal is a point mass and
    children are visited by descending draft probability, ties by token id.
    """

    ROOT = 0

    def __init__(self, root_token: int | None = None, *, sampled: bool = False,
                 max_depth: int | None = None):
        self.sampled = sampled
        self.max_depth = max_depth
        self.nodes = [TreeNode(-1 if root_token is None else root_token, 1.0, -1, -1, 0)]

    def add(self, parent: int, token: int, prob: float, drafter: int = 0,
            dist=None) -> int:
        pnode = self.nodes[parent]
        if any(self.nodes[c].token == token for c in pnode.children):
            raise ValueError(f"node {parent} already has a child with token {token}")
        depth = pnode.depth + 1
        if self.max_depth is not None and depth > self.max_depth:
            raise ValueError(f"depth {depth} exceeds max depth {self.max_depth}")
        if dist is not None:
            dist = np.asarray(dist, dtype=np.float64)
        self.nodes.append(TreeNode(int(token), float(prob), int(drafter), parent, depth, dist))
        idx = len(self.nodes) - 1
        pnode.children.append(idx)
        return idx

    def add_path(self, tokens: Sequence[int], probs: Sequence[float],
                 drafter: int = 0, dists=None) -> int:
        node = self.ROOT
        for i, tok in enumerate(tokens):
            found = self.child_with_token(node, tok)
            if found is None:
                found = self.add(node, tok, probs[i], drafter, None if dists is None else dists[i])
            node = found
        return node

    def child_with_token(self, node: int, token: int) -> int | None:
        for c in self.nodes[node].children:
            if self.nodes[c].token == token:
                return c
        return None

    def iter_children(self, node: int) -> Iterator[int]:
        kids = self.nodes[node].children
        if self.sampled:
            return iter(list(kids))
        return iter(sorted(kids, key=lambda c: (-self.nodes[c].prob, self.nodes[c].token)))

    def proposal(self, node: int, vocab_size: int) -> np.ndarray:
        n = self.nodes[node]
        if self.sampled:
            if n.dist is None:
                raise ValueError(f"sampled tree node {node} carries no distribution")
            return n.dist
        return one_hot(n.token, vocab_size)

    def path_tokens(self, node: int) -> tuple:
        out = []
        while node != self.ROOT:
            out.append(self.nodes[node].token)
            node = self.nodes[node].parent
        return tuple(reversed(out))

    def __len__(self):
        """Number of draft (non-root) nodes."""
        return len(self.nodes) - 1

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.nodes)

    def is_prefix_closed(self) -> bool:
        return all(n.parent == -1 or 0 <= n.parent < i for i, n in enumerate(self.nodes))

    @classmethod
    def chain(cls, tokens, dists, drafter: int = 0) -> "DraftTree":
        """Single-path sampled tree; verifying it equals ``verify_linear``."""
        tree = cls(sampled=True)
        node = cls.ROOT
        for tok, dist in zip(tokens, dists):
            node = tree.add(node, tok, float(dist[tok]), drafter, dist)
        return tree


def _accept_prob(o_x: float, q_x: float) -> float:
    return 1.0 if o_x >= q_x else o_x / q_x


def _residual_or_target(o, q) -> np.ndarray:
    try:
        return residual_distribution(o, q)
    except DegenerateResidual:
        # all mass cancelled: any candidate is already distributed as o
        return np.asarray(o)


def verify_linear(target, prefix: Sequence[int], draft: Sequence[int],
                  draft_probs: Sequence, rng: Sampler) -> VerificationResult:
    if len(draft) == 0 or len(draft) != len(draft_probs):
        raise ValueError("draft and draft_probs must be non-empty and equally long")
    ctx = tuple(prefix)
    accepted = []
    for i, tok in enumerate(draft):
        q = np.asarray(draft_probs[i], dtype=np.float64)
        if q[tok] <= 0.0:
            raise ProtocolError(f"draft token {tok} at step {i} has zero draft probability")
        o = target.next_distribution(ctx)
        if rng.accept(_accept_prob(o[tok], q[tok])):
            accepted.append(int(tok))
            ctx = ctx + (int(tok),)
            continue
        fix = rng.categorical(_residual_or_target(o, q))
        return VerificationResult(tuple(accepted) + (fix,), len(accepted), rejected_at=i)
    bonus = sample_bonus(target, ctx, rng)
    return VerificationResult(tuple(accepted) + (bonus,), len(accepted))


def verify_tree(target, prefix: Sequence[int], tree: DraftTree, rng: Sampler) -> VerificationResult:
    """Walk the tree from the root, trying each node's children in visit order.

    Candidate k is accepted with probability min(1, o'(x)/q_k(x)), where
    q_k is the candidate's proposal restricted to tokens not yet tried at
    this node. On rejection o' becomes norm(max(0, o' - q_k)). When every
    child is rejected the emitted token is drawn from the final o'; a
    leaf reached by acceptance gets a bonus token from the target.
    """
    ctx = tuple(prefix)
    node = DraftTree.ROOT
    accepted: list[int] = []
    while True:
        o = np.asarray(target.next_distribution(ctx))
        o_cur = o
        tried: list[int] = []
        had_children = False
        for child in tree.iter_children(node):
            had_children = True
            tok = tree.nodes[child].token
            q = np.asarray(tree.proposal(child, o.size), dtype=np.float64)
            if tried:
                q = q.copy()
                q[tried] = 0.0
                mass = q.sum()
                q = q / mass if mass > 0 else q
            if q[tok] <= 0.0:
                raise ProtocolError(f"draft token {tok} has zero proposal probability")
            if rng.accept(_accept_prob(o_cur[tok], q[tok])):
                accepted.append(tok)
                ctx = ctx + (tok,)
                node = child
                break
            o_cur = _residual_or_target(o_cur, q)
            tried.append(tok)
        else:
            if had_children:
                fix = rng.categorical(o_cur)
                return VerificationResult(tuple(accepted) + (fix,), len(accepted),
                                          rejected_at=len(accepted))
            bonus = rng.categorical(o)
            return VerificationResult(tuple(accepted) + (bonus,), len(accepted))


def sample_bonus(target, full_prefix: Sequence[int], rng: Sampler) -> int:
    return rng.categorical(target.next_distribution(tuple(full_prefix)))
