import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cospec import verification
from cospec.core import normalize
from cospec.models import TabularModel
from cospec.oracle import (LazySampledTree, check_distribution, enumerate_outcomes, outcome_distribution,
                           random_linear_case, random_model, random_tree_case)
from cospec.sampling import Sampler
from cospec.verification import DraftTree, ProtocolError, sample_bonus, verify_linear, verify_tree


def const(*p):
    return TabularModel(0, {}, p)


def accept_mass(outcomes, at_least=1):
    return sum(w for w, r in outcomes if r.accept_len >= at_least)


class TestLinear:
    def test_equal_distributions_accept_everything(self):
        o = const(0.2, 0.3, 0.5)

        def step(s):
            draft = [s.categorical(o.fallback) for _ in range(3)]
            return verify_linear(o, (0,), draft, [o.fallback] * 3, s)

        outs = enumerate_outcomes(step)
        assert accept_mass(outs, 3) == pytest.approx(1.0, abs=1e-15)

    def test_point_mass_draft_half_accepted(self):
        o = const(0.5, 0.5)
        outs = enumerate_outcomes(lambda s: verify_linear(o, (), [0], [(1.0, 0.0)], s))
        dist = {}
        for w, r in outs:
            dist[r.accepted[0]] = dist.get(r.accepted[0], 0.0) + w
        assert accept_mass(outs) == pytest.approx(0.5, abs=1e-15)
        assert dist[0] == pytest.approx(0.5, abs=1e-15) and dist[1] == pytest.approx(0.5, abs=1e-15)

    def test_zero_probability_draft_is_protocol_error(self):
        with pytest.raises(ProtocolError):
            verify_linear(const(0.5, 0.5), (), [1], [(1.0, 0.0)], Sampler(0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_result_shape(self, seed):
        case = random_linear_case(np.random.default_rng(seed))
        res = case.step(Sampler(seed))
        assert 0 <= res.accept_len <= case.gamma
        assert len(res.accepted) == res.accept_len + 1

    def test_enumerated_mass_sums_to_one(self):
        case = random_linear_case(np.random.default_rng(5), 5, 3)
        assert sum(w for w, _ in enumerate_outcomes(case.step)) == pytest.approx(1.0, abs=1e-12)

    def test_oracle_preserves_target(self):
        worst = max(tvd for _, tvd in check_distribution(60, 6, 3, seed=11))
        assert worst <= 1e-12

    def test_oracle_detects_broken_residual(self, monkeypatch):
        monkeypatch.setattr(verification, "_residual_or_target", lambda o, q: np.asarray(o))
        worst = max(tvd for _, tvd in check_distribution(30, 4, 2, seed=3))
        assert worst > 1e-3


class TestTree:
    def test_chain_matches_linear_bit_for_bit(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            case = random_linear_case(rng, 6, 3)
            s = Sampler(int(rng.integers(1 << 30)))
            ctx, draft, dists = case.prefix, [], []
            for _ in range(case.gamma):
                q = case.drafter.next_distribution(ctx)
                draft.append(s.categorical(q))
                dists.append(q)
                ctx += (draft[-1],)
            seed = int(rng.integers(1 << 30))
            a = verify_linear(case.target, case.prefix, draft, dists, Sampler(seed))
            b = verify_tree(case.target, case.prefix, DraftTree.chain(draft, dists), Sampler(seed))
            assert (a.accepted, a.accept_len, a.rejected_at) == (b.accepted, b.accept_len, b.rejected_at)

    def test_second_sibling_raises_acceptance_sampled(self):
        # o=(.5,.5), q=(.8,.2): one sampled child accepts .8*.625 + .2*1 = .7; two siblings always accept
        o, q = const(0.5, 0.5), const(0.8, 0.2)
        one = enumerate_outcomes(lambda s: verify_tree(o, (0,), LazySampledTree([q], (0,), [1], s), s))
        two = enumerate_outcomes(lambda s: verify_tree(o, (0,), LazySampledTree([q, q], (0,), [2], s), s))
        assert accept_mass(one) == pytest.approx(0.7, abs=1e-15)
        assert accept_mass(two) == pytest.approx(1.0, abs=1e-15)

    def test_second_sibling_raises_acceptance_greedy(self):
        o = const(0.5, 0.5)
        one, two = DraftTree(0), DraftTree(0)
        one.add(0, 0, 0.8)
        two.add(0, 0, 0.8)
        two.add(0, 1, 0.2)
        assert accept_mass(enumerate_outcomes(lambda s: verify_tree(o, (0,), one, s))) == pytest.approx(0.5)
        assert accept_mass(enumerate_outcomes(lambda s: verify_tree(o, (0,), two, s))) == pytest.approx(1.0)

    def test_greedy_visit_order(self):
        t = DraftTree(0)
        a = t.add(0, 2, 0.3)
        b = t.add(0, 1, 0.6)
        c = t.add(0, 0, 0.3)
        assert list(t.iter_children(0)) == [b, c, a]

    def test_structure(self):
        t = DraftTree(0, max_depth=2)
        n = t.add_path([1, 2], [0.5, 0.5])
        assert t.path_tokens(n) == (1, 2) and len(t) == 2 and t.depth == 2 and t.is_prefix_closed()
        with pytest.raises(ValueError):
            t.add(0, 1, 0.4)
        with pytest.raises(ValueError):
            t.add(n, 0, 0.4)

    def test_tree_oracle(self):
        worst = max(tvd for _, tvd in check_distribution(60, 5, 2, seed=4, tree=True))
        assert worst <= 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.booleans())
    def test_tree_result_shape(self, seed, greedy):
        case = random_tree_case(np.random.default_rng(seed), greedy=greedy)
        res = case.step(Sampler(seed))
        assert 0 <= res.accept_len <= len(case.branching)
        assert len(res.accepted) == res.accept_len + 1


class TestBonus:
    def test_point_mass(self):
        m = const(0.0, 1.0, 0.0)
        s = Sampler(0)
        assert all(sample_bonus(m, (0,), s) == 1 for _ in range(100))

    def test_uniform_frequencies(self):
        m = const(0.25, 0.25, 0.25, 0.25)
        s = Sampler(123)
        counts = np.bincount([sample_bonus(m, (), s) for _ in range(1_000_000)], minlength=4)
        assert np.all(np.abs(counts / 1e6 - 0.25) <= 0.01)

    def test_exact_marginal_of_bonus(self):
        model = random_model(np.random.default_rng(0), 4)
        outs = enumerate_outcomes(lambda s: sample_bonus(model, (2,), s))
        dist = np.zeros(4)
        for w, tok in outs:
            dist[tok] += w
        assert np.allclose(dist, model.next_distribution((2,)), atol=1e-15)


def test_outcome_distribution_sums_to_one():
    o = const(0.5, 0.5)
    dist = outcome_distribution(enumerate_outcomes(lambda s: verify_linear(o, (), [0], [normalize([3, 1])], s)))
    assert sum(dist.values()) == pytest.approx(1.0)
