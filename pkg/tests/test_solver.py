"""Solver tests: proximal operator, KKT certificates, penalty anchors.

Expected values are either closed forms or come from independent oracles
(coordinate-wise soft-thresholding for separable quadratics, bisection for
the one-dimensional logistic stationarity equation, central finite
differences for gradients).
"""

import numpy as np
import pytest

from dslasso.solver import (SolveReport, kkt_residual, l1_center, lambda_max,
                            soft_threshold, solve_l1)


class QuadraticObjective:
    """0.5 * ||beta - z||^2; prox solution is soft_threshold(z, lam * w)."""

    def __init__(self, z):
        self.z = np.asarray(z, dtype=float)
        self.dim = self.z.shape[0]

    def value(self, beta):
        r = beta - self.z
        return 0.5 * float(r @ r)

    def gradient(self, beta):
        return beta - self.z


class LogOddsObjective:
    """n_pos * log(1 + e^beta) + n_neg * log(1 + e^-beta), 1-D."""

    dim = 1

    def __init__(self, n_pos, n_neg):
        self.n_pos = n_pos
        self.n_neg = n_neg

    def value(self, beta):
        b = float(beta[0])
        return (self.n_pos * np.logaddexp(0.0, b)
                + self.n_neg * np.logaddexp(0.0, -b))

    def gradient(self, beta):
        b = float(beta[0])
        s = 1.0 / (1.0 + np.exp(-b))
        return np.array([self.n_pos * s - self.n_neg * (1.0 - s)])


class NanGradientObjective:
    dim = 2

    def value(self, beta):
        return 0.0

    def gradient(self, beta):
        return np.array([np.nan, 0.0])


def finite_diff_gradient(obj, x, h=1e-6):
    g = np.zeros_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (obj.value(x + e) - obj.value(x - e)) / (2 * h)
    return g


class TestSoftThreshold:
    def test_basic_values(self):
        assert soft_threshold(3.0, 1.0) == 2.0
        assert soft_threshold(-0.5, 1.0) == 0.0

    def test_zero_threshold_is_identity(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=50)
        np.testing.assert_array_equal(soft_threshold(z, 0.0), z)

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            soft_threshold(1.0, -0.1)

    def test_shrinks_toward_zero(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=200)
        t = rng.uniform(0, 2, size=200)
        out = soft_threshold(z, t)
        assert np.all(np.abs(out) <= np.abs(z))
        assert np.all(out * z >= 0)


class TestQuadraticOracle:
    def test_scalar_prox_example(self):
        rep = solve_l1(QuadraticObjective([2.0]), np.ones(1), 0.5, tol=1e-12)
        assert rep.converged
        np.testing.assert_allclose(rep.coefficients, [1.5], atol=1e-10)

    def test_matches_coordinatewise_soft_threshold(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            dim = rng.integers(2, 30)
            z = rng.normal(scale=3.0, size=dim)
            w = rng.uniform(0.2, 2.0, size=dim)
            lam = rng.uniform(0.1, 1.5)
            rep = solve_l1(QuadraticObjective(z), w, lam, tol=1e-12)
            assert rep.converged
            np.testing.assert_allclose(rep.coefficients,
                                       soft_threshold(z, lam * w), atol=1e-10)

    def test_unpenalized_coordinate_reaches_optimum(self):
        z = np.array([3.0, -2.0])
        w = np.array([0.0, 1.0])
        rep = solve_l1(QuadraticObjective(z), w, 10.0, tol=1e-12)
        np.testing.assert_allclose(rep.coefficients, [3.0, 0.0], atol=1e-10)

    def test_infinite_weight_pins_coordinate(self):
        z = np.array([3.0, -2.0, 1.0])
        w = np.array([1.0, np.inf, 1.0])
        rep = solve_l1(QuadraticObjective(z), w, 0.5, tol=1e-12)
        assert rep.coefficients[1] == 0.0
        np.testing.assert_allclose(rep.coefficients[0], 2.5, atol=1e-10)


class TestKktCertificate:
    def test_residual_recomputation_on_random_problems(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            z = rng.normal(scale=2.0, size=12)
            w = rng.uniform(0.5, 1.5, size=12)
            obj = QuadraticObjective(z)
            rep = solve_l1(obj, w, 0.7, tol=1e-10)
            assert rep.converged
            resid = kkt_residual(obj.gradient(rep.coefficients),
                                 rep.coefficients, 0.7, w)
            assert resid <= 1e-10
            assert abs(resid - rep.kkt_residual) <= 1e-12

    def test_lambda_above_anchor_gives_exact_zeros(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=8)
        w = np.ones(8)
        obj = QuadraticObjective(z)
        anchor = lambda_max(obj, w)
        rep = solve_l1(obj, w, anchor * 1.0, tol=1e-12)
        assert np.all(rep.coefficients == 0.0)
        # KKT at zero, from the gradient oracle directly
        g = obj.gradient(np.zeros(8))
        assert np.max(np.abs(g)) <= anchor + 1e-12

    def test_nonconvergence_is_reported_not_raised(self):
        rep = solve_l1(LogOddsObjective(3, 1), np.ones(1), 0.0,
                       init=np.array([5.0]), tol=1e-14, max_iter=1)
        assert isinstance(rep, SolveReport)
        assert not rep.converged

    def test_nan_gradient_raises(self):
        with pytest.raises(ValueError):
            solve_l1(NanGradientObjective(), np.ones(2), 0.1)


class TestOneDimensionalLogistic:
    def test_closed_form_log_one_third(self):
        obj = LogOddsObjective(3, 1)
        rep = solve_l1(obj, np.ones(1), 0.0, tol=1e-12)
        np.testing.assert_allclose(rep.coefficients[0], np.log(1.0 / 3.0),
                                   atol=1e-9)

    def test_bisection_oracle_agrees(self):
        obj = LogOddsObjective(3, 1)
        lo, hi = -10.0, 10.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if obj.gradient(np.array([mid]))[0] > 0:
                hi = mid
            else:
                lo = mid
        rep = solve_l1(obj, np.ones(1), 0.0, tol=1e-12)
        assert abs(rep.coefficients[0] - 0.5 * (lo + hi)) < 1e-9


class TestLambdaMax:
    def test_quadratic_anchor_is_max_abs(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=9)
        assert lambda_max(QuadraticObjective(z), np.ones(9)) == pytest.approx(
            np.max(np.abs(z)), abs=1e-12)

    def test_doubling_weights_halves_anchor(self):
        rng = np.random.default_rng(6)
        z = rng.normal(size=9)
        obj = QuadraticObjective(z)
        a1 = lambda_max(obj, np.ones(9))
        a2 = lambda_max(obj, 2.0 * np.ones(9))
        assert a2 == pytest.approx(a1 / 2.0, rel=1e-12)

    def test_requires_a_penalized_coordinate(self):
        with pytest.raises(ValueError):
            lambda_max(QuadraticObjective([1.0, 2.0]), np.zeros(2))


class TestObjectiveContracts:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            obj = QuadraticObjective(rng.normal(size=6))
            x = rng.normal(size=6)
            g = obj.gradient(x)
            fd = finite_diff_gradient(obj, x)
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)

    def test_midpoint_convexity_of_test_objectives(self):
        rng = np.random.default_rng(10)
        objs = [QuadraticObjective(rng.normal(size=4)), LogOddsObjective(3, 1)]
        for obj in objs:
            for _ in range(20):
                a = rng.normal(size=obj.dim, scale=3)
                b = rng.normal(size=obj.dim, scale=3)
                mid = obj.value(0.5 * (a + b))
                assert mid <= 0.5 * obj.value(a) + 0.5 * obj.value(b) + 1e-10

    def test_monotone_descent_of_accepted_iterates(self):
        rng = np.random.default_rng(12)
        z = rng.normal(scale=4.0, size=20)
        rep = solve_l1(QuadraticObjective(z), np.ones(20), 0.4,
                       init=rng.normal(size=20), tol=1e-12,
                       track_objective=True)
        trace = np.array(rep.objective_trace)
        assert np.all(np.diff(trace) <= 1e-12)


class TestL1Center:
    def test_matches_plain_median_with_unit_weights(self):
        rng = np.random.default_rng(13)
        for n in (1, 2, 3, 4, 7, 8):
            for _ in range(20):
                v = rng.normal(size=n)
                assert l1_center(v) == pytest.approx(np.median(v), abs=1e-12)

    def test_minimizes_weighted_absolute_deviation(self):
        rng = np.random.default_rng(14)
        for _ in range(50):
            v = rng.normal(size=rng.integers(1, 9))
            w = rng.uniform(0.1, 3.0, size=len(v))
            u = l1_center(v, w)
            base = np.sum(w * np.abs(v - u))
            for cand in np.linspace(v.min() - 1, v.max() + 1, 101):
                assert base <= np.sum(w * np.abs(v - cand)) + 1e-9
