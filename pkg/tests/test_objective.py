import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featvis import ConfigError, RobustLossParams, ValidationError
from featvis.objective import (
    ad_gradients,
    adaptive_distance,
    dot_maximization,
    evaluate_objective,
    l1_previous,
    mdist,
    total_loss,
)


class TestDotMaximization:
    def test_self_dot_is_squared_norm(self):
        a = np.abs(np.random.default_rng(0).normal(size=(6, 3, 3)))
        top_k = [1, 4]
        dm = dot_maximization(a, a, top_k)
        assert abs(dm - sum(np.sum(a[j] ** 2) for j in top_k)) < 1e-12

    def test_zero_target(self):
        a = np.random.default_rng(1).normal(size=(4, 2, 2))
        assert dot_maximization(a, np.zeros_like(a), [0, 1, 2, 3]) == 0.0

    def test_single_channel_value(self):
        a = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        t = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        assert dot_maximization(a, t, [0]) == 5.0

    def test_bilinear_exact(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(5, 3, 3))
        t = rng.normal(size=(5, 3, 3))
        assert dot_maximization(2.0 * a, t, [0, 3]) == 2.0 * dot_maximization(a, t, [0, 3])

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            dot_maximization(np.zeros((3, 2, 2)), np.zeros((3, 2, 3)), [0])

    def test_bad_top_k(self):
        with pytest.raises(ValidationError):
            dot_maximization(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)), [0, 0])
        with pytest.raises(ValidationError):
            dot_maximization(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)), [3])


class TestMdist:
    def test_zero_at_target(self):
        a = np.random.default_rng(0).normal(size=(4, 2, 2))
        assert mdist(a, a, [0, 1]) == 0.0

    def test_three_four_five(self):
        a = np.array([[[3.0, 4.0]]])
        assert mdist(a, np.zeros_like(a), [0]) == 5.0

    def test_additive_over_channels(self):
        a = np.zeros((2, 1, 2))
        a[0, 0, 0] = 1.0
        a[1, 0, 1] = 1.0
        assert mdist(a, np.zeros_like(a), [0, 1]) == 2.0


BRANCH_PARAMS = [
    RobustLossParams(r=1.0, b=2.0),
    RobustLossParams(r=1.0, b=0.0),
    RobustLossParams(r=1.0, welsch=True),
    RobustLossParams(r=1.0, b=1.0),
    RobustLossParams(r=0.7, b=-1.5),
]


class TestAdaptiveDistance:
    @pytest.mark.parametrize("params", BRANCH_PARAMS)
    def test_zero_residual_anchor(self, params):
        assert adaptive_distance(0.0, params) == 0.0

    def test_quadratic_value(self):
        assert adaptive_distance(2.0, RobustLossParams(r=1.0, b=2.0)) == 2.0

    def test_general_branch_b1(self):
        got = adaptive_distance(1.0, RobustLossParams(r=1.0, b=1.0))
        assert abs(got - (math.sqrt(2.0) - 1.0)) < 1e-12

    def test_tiny_b_dispatches_to_log(self):
        got = adaptive_distance(1.0, RobustLossParams(r=1.0, b=1e-7))
        assert abs(got - math.log(1.5)) < 1e-4

    def test_welsch_value(self):
        got = adaptive_distance(2.0, RobustLossParams(r=1.0, welsch=True))
        assert abs(got - (1.0 - math.exp(-2.0))) < 1e-12

    def test_continuity_at_quadratic(self):
        # the family's b->2 limit converges like O(eps*log(u/eps)), so the
        # stated tolerance holds in the small-residual regime it protects
        for r in (0.7, 1.0, 1.3):
            quad = RobustLossParams(r=r, b=2.0)
            for b in (2.0 - 1e-3, 2.0 + 1e-3):
                near = RobustLossParams(r=r, b=b)
                for m in (0.01 * r, 0.03 * r, 0.05 * r):
                    ref = adaptive_distance(m, quad)
                    assert abs(adaptive_distance(m, near) - ref) / ref < 1e-3

    def test_continuity_at_log(self):
        logp = RobustLossParams(r=0.8, b=0.0)
        for b in (-1e-3, 1e-3):
            near = RobustLossParams(r=0.8, b=b)
            for m in (0.5, 1.0, 3.0):
                ref = adaptive_distance(m, logp)
                assert abs(adaptive_distance(m, near) - ref) / ref < 1e-3

    def test_welsch_limit(self):
        welsch = RobustLossParams(r=1.1, welsch=True)
        near = RobustLossParams(r=1.1, b=-1e4)
        for m in (0.3, 1.0, 2.5):
            assert abs(adaptive_distance(m, near) - adaptive_distance(m, welsch)) < 1e-3

    def test_strict_paper_offset_at_zero(self):
        for b in (0.5, 1.0, 1.7, -1.0, 2.5):
            params = RobustLossParams(r=1.0, b=b)
            got = adaptive_distance(0.0, params, strict_paper=True)
            assert abs(got - 2.0 * abs(b - 2.0) / b) < 1e-12

    def test_invalid_inputs(self):
        with pytest.raises(ValidationError):
            adaptive_distance(-0.1, RobustLossParams(r=1.0, b=1.0))
        with pytest.raises(ValidationError):
            adaptive_distance(float("nan"), RobustLossParams(r=1.0, b=1.0))
        with pytest.raises(ValidationError):
            RobustLossParams(r=0.0, b=1.0)
        with pytest.raises(ValidationError):
            RobustLossParams(r=-2.0, b=1.0)

    @settings(max_examples=150, deadline=None)
    @given(st.floats(0.05, 5.0), st.floats(-5.0, 2.99),
           st.integers(0, 3))
    def test_zero_anchor_and_monotone(self, r, b, mode):
        if mode == 0:
            params = RobustLossParams(r=r, b=2.0)
        elif mode == 1:
            params = RobustLossParams(r=r, b=0.0)
        elif mode == 2:
            params = RobustLossParams(r=r, welsch=True)
        else:
            if min(abs(b), abs(b - 2.0)) < 1e-5:
                return
            params = RobustLossParams(r=r, b=b)
        grid = np.linspace(0.0, 8.0, 60)
        values = [adaptive_distance(m, params) for m in grid]
        assert values[0] == 0.0
        assert all(b2 >= b1 - 1e-12 for b1, b2 in zip(values, values[1:]))


def fd(fn, x, h=1e-6):
    return (fn(x + h) - fn(x - h)) / (2.0 * h)


def close(analytic, reference, rtol=1e-4, atol=1e-8):
    return abs(analytic - reference) <= atol + rtol * abs(reference)


class TestAdGradients:
    @pytest.mark.parametrize("params", BRANCH_PARAMS)
    def test_zero_residual_flat(self, params):
        d_md, _, _ = ad_gradients(0.0, params)
        assert d_md == 0.0

    def test_quadratic_derivative(self):
        d_md, _, _ = ad_gradients(3.0, RobustLossParams(r=1.0, b=2.0))
        assert d_md == 3.0

    def test_matches_fd_on_random_triples(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            m = rng.uniform(0.05, 4.0)
            r = rng.uniform(0.2, 3.0)
            b = rng.uniform(0.05, 2.9)
            if min(abs(b), abs(b - 2.0)) < 1e-3:
                continue
            params = RobustLossParams(r=r, b=b, trainable=True)
            d_md, d_r, d_blat = ad_gradients(m, params)
            assert close(d_md, fd(lambda x: adaptive_distance(x, params), m))
            assert close(
                d_r, fd(lambda x: adaptive_distance(m, RobustLossParams(r=x, b=b)), r))

            def by_latent(latent):
                clone = RobustLossParams(r=r, b=b, trainable=True)
                clone._b_latent = latent
                return adaptive_distance(m, clone)

            assert close(d_blat, fd(by_latent, params._b_latent))

    def test_matches_fd_special_branches(self):
        rng = np.random.default_rng(1)
        for params in (RobustLossParams(r=1.4, b=2.0),
                       RobustLossParams(r=0.6, b=0.0),
                       RobustLossParams(r=1.0, welsch=True)):
            for _ in range(10):
                m = rng.uniform(0.05, 4.0)
                d_md, d_r, _ = ad_gradients(m, params)
                assert close(d_md, fd(lambda x: adaptive_distance(x, params), m))
                fd_r = fd(lambda x: adaptive_distance(
                    m, RobustLossParams(r=x, b=params.b if not params.welsch else 1.0,
                                        welsch=params.welsch)), params.r)
                assert close(d_r, fd_r)

    def test_strict_paper_b_gradient(self):
        m, r, b = 1.2, 0.9, 1.4
        params = RobustLossParams(r=r, b=b, trainable=True)
        _, _, d_blat = ad_gradients(m, params, strict_paper=True)

        def by_latent(latent):
            clone = RobustLossParams(r=r, b=b, trainable=True)
            clone._b_latent = latent
            return adaptive_distance(m, clone, strict_paper=True)

        assert close(d_blat, fd(by_latent, params._b_latent))


class TestRobustLossParams:
    def test_trainable_defaults(self):
        params = RobustLossParams(r=1.0, b=1.0, trainable=True)
        assert abs(params.r - 1.0) < 1e-12
        assert abs(params.b - 1.0) < 1e-12

    def test_welsch_reports_minus_inf(self):
        assert RobustLossParams(welsch=True).b == float("-inf")

    def test_trainable_b_must_be_in_bounds(self):
        with pytest.raises(ConfigError):
            RobustLossParams(r=1.0, b=3.5, trainable=True)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-5.0, 5.0), st.floats(-5.0, 5.0), st.integers(1, 30))
    def test_steps_preserve_feasibility(self, g_r, g_b, steps):
        params = RobustLossParams(r=1.0, b=1.0, trainable=True)
        for _ in range(steps):
            params.gradient_step(g_r, g_b, lr=0.3)
        assert params.r > 0.0
        assert 0.01 < params.b < 2.99

    def test_fixed_params_ignore_steps(self):
        params = RobustLossParams(r=2.0, b=1.5)
        params.gradient_step(1.0, 1.0, lr=0.5)
        assert params.r == 2.0 and params.b == 1.5


class TestL1Previous:
    def test_zeros(self):
        assert l1_previous(np.zeros((3, 2, 2))) == 0.0

    def test_direct_sum(self):
        prev = np.array([[[1.0, -2.0], [0.0, 3.0]]])
        assert l1_previous(prev) == 6.0

    def test_homogeneous(self):
        prev = np.random.default_rng(0).normal(size=(4, 3, 3))
        assert abs(l1_previous(2.5 * prev) - 2.5 * l1_previous(prev)) < 1e-12

    def test_non_finite(self):
        bad = np.array([[[np.inf]]])
        with pytest.raises(ValidationError):
            l1_previous(bad)


class TestTotalLoss:
    def test_balanced_terms(self):
        assert total_loss(1.5, 1.5, 0.0, 1e-3).total == 0.0

    def test_direct_arithmetic(self):
        lb = total_loss(dm=3.0, ad=1.0, l1=100.0, lam=1e-3)
        assert abs(lb.total - (-1.9)) < 1e-12

    def test_decomposition_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            dm, ad, l1 = rng.normal(size=3)
            lam = abs(rng.normal())
            lb = total_loss(dm, ad, abs(l1), lam)
            assert abs(lb.total - (lb.ad - lb.dm + lb.lam * lb.l1_prev)) < 1e-9

    def test_rejects_bad_values(self):
        with pytest.raises(ValidationError):
            total_loss(float("nan"), 0.0, 0.0, 0.0)
        with pytest.raises(ValidationError):
            total_loss(0.0, 0.0, 0.0, -1e-3)


class TestEvaluateObjective:
    def test_gradients_match_fd_on_activations(self):
        rng = np.random.default_rng(0)
        target = rng.normal(size=(5, 3, 3))
        curr = rng.normal(size=(5, 3, 3))
        prev = rng.normal(size=(4, 3, 3))
        top_k = np.array([0, 2, 4])
        params = RobustLossParams(r=1.0, b=1.0, trainable=True)
        lam = 1e-3
        ev = evaluate_objective(prev, curr, target, top_k, params, lam)

        def total_for(c, p):
            e = evaluate_objective(p, c, target, top_k, params, lam)
            return e.breakdown.total

        h = 1e-6
        for idx in [(0, 0, 0), (2, 1, 2), (4, 2, 2), (1, 0, 0)]:
            up, down = curr.copy(), curr.copy()
            up[idx] += h
            down[idx] -= h
            fd_val = (total_for(up, prev) - total_for(down, prev)) / (2 * h)
            assert abs(ev.grad_curr[idx] - fd_val) < 1e-6
        for idx in [(0, 0, 0), (3, 2, 1)]:
            up, down = prev.copy(), prev.copy()
            up[idx] += h
            down[idx] -= h
            fd_val = (total_for(curr, up) - total_for(curr, down)) / (2 * h)
            assert abs(ev.grad_prev[idx] - fd_val) < 1e-6

    def test_breakdown_consistency(self):
        rng = np.random.default_rng(1)
        target = rng.normal(size=(4, 2, 2))
        curr = rng.normal(size=(4, 2, 2))
        prev = rng.normal(size=(3, 2, 2))
        params = RobustLossParams(r=1.0, b=1.0)
        ev = evaluate_objective(prev, curr, target, [0, 1], params, 1e-3)
        assert ev.breakdown.dm == dot_maximization(curr, target, [0, 1])
        assert ev.mdist == mdist(curr, target, [0, 1])
        assert ev.breakdown.ad == adaptive_distance(ev.mdist, params)
