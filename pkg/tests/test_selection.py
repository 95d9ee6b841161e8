import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semtok import selection as S
from semtok import tensor as T
from semtok.budget import penalty
from semtok.tensor import ContractError


def params(gw, gb, tw, tb):
    return S.SelectionLayerParams(*(T.tensor(np.atleast_1d(np.asarray(x, dtype=float)), requires_grad=True)
                                    for x in (gw, gb, tw, tb)))


def brute_sparsity(scores, gamma, n):
    return math.fsum(max(s - gamma, 0.0) for s in scores) * (1.0 / n)


class TestThreshold:
    def test_zero_params(self):
        p = params(np.zeros(4), 0.0, np.zeros(4), 0.0)
        assert S.compute_threshold(T.tensor(np.ones((1, 4))), p).data[0] == 0.5

    def test_very_negative_bias(self):
        p = params(np.zeros(4), 0.0, np.zeros(4), -800.0)
        gamma = S.compute_threshold(T.tensor(np.ones((1, 4))), p)
        assert gamma.data[0] == 0.0
        assert S.keep_decision(np.array([1e-12, 0.3]), gamma.data[0]).all()

    def test_unit_logit(self):
        # w.t + b = 0.5*1 + 0.25*2 + 0 = 1
        p = params(np.zeros(2), 0.0, [0.5, 0.25], 0.0)
        gamma = S.compute_threshold(T.tensor([[1.0, 2.0]]), p)
        assert gamma.data[0] == pytest.approx(0.7310585786, abs=1e-10)


class TestScores:
    def test_zero_gate(self):
        p = params(np.zeros(3), 0.0, np.zeros(3), 0.0)
        _, s = S.compute_scores(T.tensor(np.random.default_rng(0).standard_normal((4, 3))), p, 7.0, 0.0)
        np.testing.assert_array_equal(s.data, 0.5)

    def test_zero_slope(self):
        p = params([1.0, -2.0, 3.0], 0.4, np.zeros(3), 0.0)
        _, s = S.compute_scores(T.tensor(np.random.default_rng(1).standard_normal((5, 3))), p, 0.0, 0.8)
        np.testing.assert_allclose(s.data, 1 / (1 + math.exp(-0.8)), rtol=1e-15)

    def test_slope_five(self):
        # g = 0.2 from bias only; sigmoid(5 * 0.2 + 0) = sigmoid(1)
        p = params(np.zeros(2), 0.2, np.zeros(2), 0.0)
        _, s = S.compute_scores(T.tensor(np.ones((1, 2))), p, 5.0, 0.0)
        assert s.data[0] == pytest.approx(0.7310585786, abs=1e-10)


class TestDropRule:
    def test_rule(self):
        np.testing.assert_array_equal(S.keep_decision(np.array([0.6, 0.4]), 0.5), [True, False])

    def test_equality_keeps(self):
        assert S.keep_decision(np.array([0.5]), 0.5)[0]

    def test_apply_selection_scaling_and_specials(self):
        rows = np.arange(12.0).reshape(4, 3)
        seq = S.TokenSequence(T.tensor(rows), np.array([0, 1]), 2)
        scores = T.tensor([0.6, 0.4])
        new, keep = S.apply_selection(seq, T.tensor([0.5]), scores)
        np.testing.assert_array_equal(keep, [True, False])
        np.testing.assert_array_equal(new.positions, [0])
        np.testing.assert_array_equal(new.tokens.data[:2], rows[:2])
        np.testing.assert_allclose(new.tokens.data[2], 0.6 * rows[2])

    def test_apply_selection_unscaled(self):
        rows = np.arange(12.0).reshape(4, 3)
        seq = S.TokenSequence(T.tensor(rows), np.array([3, 7]), 9)
        new, _ = S.apply_selection(seq, T.tensor([0.1]), T.tensor([0.6, 0.4]), score_scaling=False)
        np.testing.assert_array_equal(new.tokens.data, rows)
        np.testing.assert_array_equal(new.positions, [3, 7])


class TestSparsity:
    def test_all_below(self):
        assert S.layer_sparsity(T.tensor([0.1, 0.2]), T.tensor([0.5]), 2).item() == 0.0

    def test_hand_value(self):
        # (0.4 + 0 + 0) / 3
        val = S.layer_sparsity(T.tensor([0.9, 0.2, 0.5]), T.tensor([0.5]), 3).item()
        assert val == pytest.approx(0.4 / 3, abs=1e-15)
        assert val == brute_sparsity([0.9, 0.2, 0.5], 0.5, 3)

    def test_bound(self):
        rng = np.random.default_rng(2)
        s = rng.uniform(0, 1, 50) * (1 - 1e-9)
        for gamma in (0.0, 0.3):
            assert S.layer_sparsity(T.tensor(s), T.tensor([gamma]), 50).item() < 1 - gamma

    def test_empty_n(self):
        with pytest.raises(ContractError):
            S.layer_sparsity(T.tensor([0.5]), T.tensor([0.1]), 0)

    def test_no_alive_tokens(self):
        gamma = T.tensor([0.3], requires_grad=True)
        val = S.layer_sparsity(T.tensor(np.zeros(0)), gamma, 4)
        assert val.item() == 0.0
        val.backward()
        np.testing.assert_array_equal(gamma.grad, [0.0])

    def test_dsparsity_dgamma(self):
        rng = np.random.default_rng(4)
        s = rng.uniform(0, 1, 12)
        n = 16
        for gamma in (0.2, 0.5, 0.8):
            if np.min(np.abs(s - gamma)) < 1e-4:
                continue
            g = T.tensor([gamma], requires_grad=True)
            S.layer_sparsity(T.tensor(s), g, n).backward()
            expected = -np.sum(s > gamma) / n
            assert g.grad[0] == pytest.approx(expected, abs=1e-15)
            h = 1e-5
            fd = (brute_sparsity(s, gamma + h, n) - brute_sparsity(s, gamma - h, n)) / (2 * h)
            assert fd == pytest.approx(expected, rel=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=20),
       st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_monotone_in_threshold(scores, g1, g2):
    lo, hi = sorted((g1, g2))
    s = np.array(scores)
    keep_lo, keep_hi = S.keep_decision(s, lo), S.keep_decision(s, hi)
    assert np.all(keep_hi <= keep_lo)
    assert brute_sparsity(s, hi, len(s)) <= brute_sparsity(s, lo, len(s))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=20),
       st.floats(0.0, 1.0), st.integers(0, 19), st.floats(0.0, 0.5))
def test_monotone_in_scores(scores, gamma, i, bump):
    s = np.array(scores)
    s2 = s.copy()
    s2[i % len(s)] = min(s2[i % len(s)] + bump, 0.999)
    assert np.all(S.keep_decision(s2, gamma) >= S.keep_decision(s, gamma))
    assert brute_sparsity(s2, gamma, len(s)) >= brute_sparsity(s, gamma, len(s))


def test_select_records_state():
    rng = np.random.default_rng(8)
    d, n = 4, 5
    tokens = T.tensor(rng.standard_normal((n + 2, d)))
    seq = S.TokenSequence(tokens, np.arange(n), n)
    p = params(rng.standard_normal(d), 0.0, rng.standard_normal(d), 0.0)
    new, rec = S.select(seq, p, 5.0, 0.0, block=0)
    assert np.all(rec.kept == (rec.scores >= rec.gamma))
    assert rec.sparsity_value == brute_sparsity(rec.scores, rec.gamma, n)
    # second layer: dead tokens stay dead and get no score
    new2, rec2 = S.select(new, p, 5.0, 0.0, block=1)
    assert np.all(rec2.alive_in == rec.kept)
    assert np.all(np.isnan(rec2.scores[~rec.kept]))
    assert np.all(rec2.kept <= rec.kept)


def test_penalty_only_descent_reaches_budget():
    """Gradient descent on lam*(S - alpha)^2 alone moves S to alpha (frozen tokens)."""
    rng = np.random.default_rng(11)
    d, n = 6, 16
    x = T.tensor(rng.standard_normal((n, d)))
    budget_row = T.tensor(rng.standard_normal((1, d)))
    p = params(0.1 * rng.standard_normal(d), 0.5, 0.1 * rng.standard_normal(d), -2.0)
    leaves = [p.gate_weight, p.gate_bias, p.thresh_weight, p.thresh_bias]
    for alpha in (0.2, 0.6):
        for q, v in zip(leaves, (0.1 * rng.standard_normal(d), [0.5], 0.1 * rng.standard_normal(d), [-2.0])):
            q.data[:] = v
        gaps = []
        for _ in range(300):
            gamma = S.compute_threshold(budget_row, p)
            _, s = S.compute_scores(x, p, 5.0, 0.0)
            sk = S.layer_sparsity(s, gamma, n)
            gaps.append(abs(sk.item() - alpha))
            for q in leaves:
                q.grad = None
            penalty(sk, alpha, 1.0).backward()
            for q in leaves:
                q.data -= 0.5 * q.grad
        assert gaps[-1] < 0.02
        assert gaps[-1] < gaps[0]
