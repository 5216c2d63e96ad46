import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cospec.core import DomainError, EmbeddingTable
from cospec.drafting import (PRIOR, Candidate, RoutingMatrix, RoutingPolicy, RoundAborted, cooperative_generate,
                             draft_accuracy, fuse_step, route_request, routing_score, tree_selection,
                             update_routing)
from cospec.models import FailingModel, NodeFailure, TabularModel
from cospec.sampling import Sampler
from cospec.verification import VerificationResult

EYE = EmbeddingTable(np.eye(4))


def table(rows, size=4):
    """Order-1 model from {token: next-token distribution}; unseen -> uniform."""
    return TabularModel(1, {(t,): p for t, p in rows.items()}, np.full(size, 1.0 / size))


def peaked(tok, p, size=4):
    row = np.full(size, (1.0 - p) / (size - 1))
    row[tok] = p
    return row


class TestAccuracy:
    def test_examples(self):
        assert list(draft_accuracy([1, 2, 3], [1, 2, 3, 0], 3, EYE)) == [1, 1, 1]
        assert list(draft_accuracy([1, 2, 3], [0, 1], 0, EYE)) == [0, 0, 0]
        assert list(draft_accuracy([1, 2], [0, 3], 1, EYE)) == [0, 0]

    def test_accept_len_too_long(self):
        with pytest.raises(DomainError):
            draft_accuracy([1], [1], 2, EYE)


class TestRoutingScore:
    def test_examples(self):
        assert routing_score([0.5], [0.5]) == 0.5
        assert routing_score([0.9], [0.9]) == pytest.approx(0.9878048780487805, abs=1e-15)
        assert routing_score([0.9, 0.5], [0.9, 0.5]) == pytest.approx(0.7439024390243902, abs=1e-15)

    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=8))
    def test_open_interval(self, pairs):
        c, d = zip(*pairs)
        assert 0.0 < routing_score(c, d) < 1.0

    def test_length_mismatch(self):
        with pytest.raises(DomainError):
            routing_score([0.5], [0.5, 0.5])


class TestRouteRequest:
    row = np.array([0.2, 0.9, 0.5, 0.7])

    def test_pure_top_k(self):
        pol = RoutingPolicy(alpha=1.0, beta=0.0, tau=2.0, fanout=2)
        assert route_request(self.row, pol, 0, Sampler(0)) == (1, 3)
        pol = RoutingPolicy(alpha=1.0, beta=1.0, tau=2.0, fanout=2)
        assert route_request(self.row, pol, 5, Sampler(0)) == (1, 3)

    def test_uniform_when_alpha_zero(self):
        pol = RoutingPolicy(alpha=0.0, beta=0.0, fanout=2)
        s = Sampler(9)
        counts = np.zeros(4)
        n = 100_000
        for _ in range(n):
            route = route_request(self.row, pol, 0, s)
            assert len(set(route)) == 2
            counts[list(route)] += 1
        assert np.all(np.abs(counts / n - 0.5) <= 0.01)

    def test_policy_bounds(self):
        with pytest.raises(DomainError):
            RoutingPolicy(alpha=0.5, beta=0.6)
        with pytest.raises(DomainError):
            RoutingPolicy(fanout=0)

    @given(st.integers(0, 2**31), st.integers(1, 6), st.floats(0, 5))
    def test_distinct_and_sized(self, seed, fanout, acc):
        route = route_request(self.row, RoutingPolicy(fanout=fanout), acc, Sampler(seed))
        assert len(route) == min(fanout, 4) == len(set(route))


class TestFuse:
    def test_examples(self):
        assert fuse_step([(0, 3, 0.4)]) == Candidate(0, 3, 0.4)
        assert fuse_step([(0, 1, 0.3), (1, 2, 0.7), (2, 3, 0.5)]).token == 2
        assert fuse_step([(2, 5, 0.7), (1, 6, 0.7)]) == Candidate(1, 6, 0.7)
        with pytest.raises(DomainError):
            fuse_step([])

    @given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 9), st.sampled_from([0.1, 0.5, 0.9])),
                    min_size=1, max_size=8, unique_by=lambda c: c[0]))
    def test_argmax_with_tie_break(self, cands):
        win = fuse_step(cands)
        best = max(c[2] for c in cands)
        assert win.conf == best
        assert win.node == min(c[0] for c in cands if c[2] == best)


class TestCooperativeGenerate:
    a = table({0: peaked(1, 0.6), 1: peaked(2, 0.6), 2: peaked(3, 0.6), 3: peaked(0, 0.6)})
    sure = table({0: peaked(2, 1.0), 2: peaked(1, 1.0), 1: peaked(3, 1.0), 3: peaked(0, 1.0)})

    def test_single_node_is_greedy_decode(self):
        rnd = cooperative_generate({0: self.a}, (0,), 4)
        assert rnd.fused_tokens == [1, 2, 3, 0] == rnd.own[0].tokens

    def test_identical_drafters(self):
        rnd = cooperative_generate({0: self.a, 1: self.a}, (0,), 3)
        assert rnd.fused_cand[0].tokens == rnd.own[0].tokens == rnd.own[1].tokens == rnd.fused_tokens

    def test_confident_drafter_wins(self):
        rnd = cooperative_generate({0: self.a, 1: self.sure}, (0,), 4)
        assert rnd.fused_tokens == rnd.own[1].tokens == [2, 1, 3, 0]
        assert all(c.node == 1 for c in rnd.fused)

    def test_branch_lengths(self):
        rnd = cooperative_generate({0: self.a, 2: self.sure}, (1,), 5)
        for n in rnd.nodes:
            assert len(rnd.own[n].tokens) == len(rnd.own[n].confs) == 5
            assert len(rnd.fused_cand[n].tokens) == 5

    def test_failure_drops_branch(self):
        rnd = cooperative_generate({0: self.a, 1: FailingModel(self.sure, 2)}, (0,), 4)
        assert rnd.nodes == [0] and rnd.dropped == [1]
        assert len(rnd.fused) == 4
        with pytest.raises(RoundAborted):
            cooperative_generate({0: FailingModel(self.a, 0)}, (0,), 2)


class TestTreeSelection:
    a = TestCooperativeGenerate.a

    def test_single_chain(self):
        rnd = cooperative_generate({0: self.a}, (0,), 3)
        tree = tree_selection(rnd, 10)
        assert len(tree) == 3 and tree.depth == 3
        assert tree.path_tokens(3) == (1, 2, 3)

    def test_divergence_at_second_step(self):
        b = table({0: peaked(1, 0.6), 1: peaked(0, 0.7)})
        rnd = cooperative_generate({0: self.a, 1: b}, (0,), 2)
        tree = tree_selection(rnd, 10)
        root_kids = tree.nodes[0].children
        assert len(root_kids) == 1
        assert sorted(tree.nodes[c].token for c in tree.nodes[root_kids[0]].children) == [0, 2]

    def test_budget_one(self):
        b = table({0: peaked(3, 0.8)})
        rnd = cooperative_generate({0: self.a, 1: b}, (0,), 3)
        tree = tree_selection(rnd, 1)
        assert len(tree) == 1
        assert tree.nodes[1].token == 3 and tree.nodes[1].prob == pytest.approx(0.8)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 4))
    def test_budget_and_prefix_closed(self, budget, K):
        b = table({0: peaked(3, 0.8), 3: peaked(2, 0.4)})
        rnd = cooperative_generate({0: self.a, 1: b}, (0,), K)
        tree = tree_selection(rnd, budget)
        assert 1 <= len(tree) <= budget and tree.is_prefix_closed()


class TestUpdateRouting:
    def setup_method(self):
        self.m = RoutingMatrix(3)
        self.m.add(0)
        self.pol = RoutingPolicy()
        self.rnd = cooperative_generate({0: TestCooperativeGenerate.sure}, (0,), 2)

    def test_exact_prefix_raises_score(self):
        res = VerificationResult((2, 1, 3), 2)
        row = update_routing(self.m, 0, self.rnd, res, EYE, self.pol)
        assert row[0] > PRIOR

    def test_rejected_uses_floor(self):
        res = VerificationResult((0,), 0, rejected_at=0)
        row = update_routing(self.m, 0, self.rnd, res, EYE, self.pol)
        assert row[0] == pytest.approx(routing_score([1.0, 1.0], [1e-3, 1e-3]))
        assert row[0] < PRIOR

    def test_decay_of_unrouted(self):
        self.m[0] = [0.5, 0.9, 0.5]
        row = update_routing(self.m, 0, self.rnd, VerificationResult((2, 1, 3), 2), EYE, self.pol)
        assert row[1] == pytest.approx(0.86, abs=1e-15)
        assert np.all((row > 0) & (row < 1))

    def test_matrix_rows(self):
        self.m.add(1, inherit=True)
        assert 1 in self.m and len(self.m) == 2
        self.m.remove(0)
        assert 0 not in self.m
        with pytest.raises(DomainError):
            self.m[1] = [0.0, 0.5, 0.5]
