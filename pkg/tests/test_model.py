import numpy as np
import pytest

from pavglm.model import (
    CovarianceCache,
    Curve,
    Dataset,
    Model,
    VarianceParams,
    data_term,
    gamma_vector,
    posterior_grad_hess_u,
    posterior_nll,
)
from pavglm.response import ResponseFamily

MODEL = Model()
NB = ResponseFamily("negative_binomial", r=18.632)
VP = VarianceParams(0.3, 1.5, 0.2, 0.02, 0.1)


def _random_instance(rng, family=NB, m=10):
    t = np.sort(rng.choice(np.arange(16) / 15, m, replace=False))
    y = family.sample(2.0 + rng.standard_normal(m), seed=rng)
    curve = Curve("c", "g", t, y, family=family)
    coeffs = 2.0 + 0.5 * rng.standard_normal(11)
    u = np.log(y + 0.5) + 0.1 * rng.standard_normal(m)
    w = 0.01 * rng.standard_normal(7)
    return coeffs, u, w, curve


class TestGammaVector:
    def test_identity_warp(self):
        rng = np.random.default_rng(0)
        coeffs, _, _, curve = _random_instance(rng)
        np.testing.assert_allclose(gamma_vector(coeffs, MODEL, np.zeros(7), curve), MODEL.basis.design(curve.times) @ coeffs)

    def test_constant_theta_ignores_warp(self):
        rng = np.random.default_rng(1)
        _, _, w, curve = _random_instance(rng)
        np.testing.assert_allclose(gamma_vector(np.full(11, 1.7), MODEL, w, curve), 1.7, atol=1e-13)

    def test_linear_in_coefficients(self):
        rng = np.random.default_rng(2)
        a, _, w, curve = _random_instance(rng)
        b = rng.standard_normal(11)
        lhs = gamma_vector(2 * a - 3 * b, MODEL, w, curve)
        rhs = 2 * gamma_vector(a, MODEL, w, curve) - 3 * gamma_vector(b, MODEL, w, curve)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestPosterior:
    def test_three_point_gaussian_by_hand(self):
        # closed-form kernels: exponential amplitude (smoothness 1/2), Matern 3/2 warp prior
        sigma2 = 0.4
        t = np.array([0.1, 0.45, 0.8])
        y = np.array([1.2, 2.1, 0.7])
        u = np.array([1.0, 1.9, 1.1])
        w = np.array([0.01, -0.005, 0.0, 0.004, 0.0, -0.002, 0.003])
        c = 1.3
        vp = VarianceParams(0.5, 0.5, 0.25, 0.02, 0.1)
        S = 0.25 * np.exp(-np.abs(t[:, None] - t[None, :]) / 0.5)
        a = np.arange(1, 8) / 8
        x = 1.5 * np.abs(a[:, None] - a[None, :]) / 0.1
        C = 0.02**2 * (1 + x) * np.exp(-x)
        r = c - u
        pavpop = np.sum((y - u) ** 2) / (2 * sigma2) + 0.5 * r @ np.linalg.solve(S, r) + 0.5 * w @ np.linalg.solve(C, w)
        curve = Curve("h", "g", t, y, family=ResponseFamily("gaussian", sigma2=sigma2))
        got = posterior_nll(np.full(11, c), u, w, curve, vp)
        # canonical form drops y^2 / (2 sigma2) from the data term
        np.testing.assert_allclose(got + np.sum(y**2) / (2 * sigma2), pavpop, rtol=1e-10)

    def test_zero_residual_reduces_to_data_term(self):
        rng = np.random.default_rng(3)
        coeffs, _, _, curve = _random_instance(rng)
        gamma = gamma_vector(coeffs, MODEL, np.zeros(7), curve)
        expected = np.sum(NB.a_value(gamma, curve.y) - gamma * curve.y)
        np.testing.assert_allclose(posterior_nll(coeffs, gamma, np.zeros(7), curve, VP), expected, rtol=1e-13)

    def test_shift_identity(self):
        rng = np.random.default_rng(4)
        _, u, _, curve = _random_instance(rng)
        delta = 0.37
        expected = np.sum(NB.a_value(u + delta, curve.y) - NB.a_value(u, curve.y) - delta * curve.y)
        np.testing.assert_allclose(data_term(curve, u + delta) - data_term(curve, u), expected, rtol=1e-12)

    def test_warp_prior_even(self):
        rng = np.random.default_rng(5)
        _, u, w, curve = _random_instance(rng)
        flat = np.full(11, 2.0)  # constant theta removes the warp from gamma
        np.testing.assert_allclose(
            posterior_nll(flat, u, w, curve, VP), posterior_nll(flat, u, -w, curve, VP), rtol=1e-14
        )

    def test_invalid_warp_is_infinite(self):
        rng = np.random.default_rng(6)
        coeffs, u, _, curve = _random_instance(rng)
        w = np.zeros(7)
        w[3] = -0.3
        assert posterior_nll(coeffs, u, w, curve, VP) == np.inf

    def test_convex_along_segments(self):
        rng = np.random.default_rng(7)
        coeffs, _, w, curve = _random_instance(rng)
        cache = CovarianceCache(MODEL, VP)
        for _ in range(500):
            u1 = 3 * rng.standard_normal(curve.m)
            u2 = 3 * rng.standard_normal(curve.m)
            mid = posterior_nll(coeffs, 0.5 * (u1 + u2), w, curve, VP, cache=cache)
            ends = 0.5 * (posterior_nll(coeffs, u1, w, curve, VP, cache=cache) + posterior_nll(coeffs, u2, w, curve, VP, cache=cache))
            assert mid <= ends + 1e-9 * abs(ends)

    def test_curves_decouple(self):
        rng = np.random.default_rng(8)
        instances = [_random_instance(rng) for _ in range(4)]
        values = [posterior_nll(c, u, w, cv, VP) for c, u, w, cv in instances]
        order = [2, 0, 3, 1]
        permuted = [posterior_nll(*instances[i][:3], instances[i][3], VP) for i in order]
        np.testing.assert_array_equal(permuted, [values[i] for i in order])


class TestDerivatives:
    def test_gradient_central_differences(self):
        rng = np.random.default_rng(9)
        h = 1e-6
        for _ in range(100):
            coeffs, u, w, curve = _random_instance(rng)
            g, _ = posterior_grad_hess_u(coeffs, u, w, curve, VP)
            fd = np.empty_like(u)
            for k in range(u.size):
                e = np.zeros_like(u)
                e[k] = h
                fd[k] = (posterior_nll(coeffs, u + e, w, curve, VP) - posterior_nll(coeffs, u - e, w, curve, VP)) / (2 * h)
            np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-6 * max(1.0, np.abs(g).max()))

    def test_hessian_positive_definite(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            coeffs, u, w, curve = _random_instance(rng)
            _, H = posterior_grad_hess_u(coeffs, u, w, curve, VP)
            np.linalg.cholesky(H)
            np.testing.assert_allclose(H, H.T)

    def test_hessian_matches_gradient_differences(self):
        rng = np.random.default_rng(11)
        coeffs, u, w, curve = _random_instance(rng)
        _, H = posterior_grad_hess_u(coeffs, u, w, curve, VP)
        h = 1e-6
        cols = []
        for k in range(u.size):
            e = np.zeros_like(u)
            e[k] = h
            gp, _ = posterior_grad_hess_u(coeffs, u + e, w, curve, VP)
            gm, _ = posterior_grad_hess_u(coeffs, u - e, w, curve, VP)
            cols.append((gp - gm) / (2 * h))
        np.testing.assert_allclose(np.array(cols).T, H, rtol=1e-4, atol=1e-4)


class TestContainers:
    def test_curve_rejects_unsorted_times(self):
        with pytest.raises(ValueError):
            Curve("x", "g", [0.2, 0.1], [1, 2])

    def test_curve_rejects_single_point(self):
        with pytest.raises(ValueError):
            Curve("x", "g", [0.2], [1])

    def test_curve_family_checks_counts(self):
        with pytest.raises(ValueError):
            Curve("x", "g", [0.1, 0.2], [1.5, 2], family=NB)

    def test_dataset_rejects_unknown_group(self):
        with pytest.raises(ValueError):
            Dataset([Curve("x", "h", [0.1, 0.2], [1, 2])], NB, ["g"])

    def test_smoothness_capped(self):
        with pytest.raises(ValueError):
            VarianceParams(0.1, 10.5, 0.2, 0.02, 0.1)

    def test_log_round_trip(self):
        np.testing.assert_allclose(VarianceParams.from_log(VP.to_log()).to_log(), VP.to_log(), rtol=1e-14)
