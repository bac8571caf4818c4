import numpy as np
import pytest
from scipy.stats import multivariate_normal

from pavglm.estimation import (
    FitConfig,
    fit,
    inner_max_u,
    laplace_marginal_nll,
    linearize,
    predict_all,
    predict_latents,
    update_coeffs,
    RankDeficientError,
    _kkt_residual,
)
from pavglm.kernels import MaternKernel, covariance_matrix
from pavglm.model import CovarianceCache, Curve, Dataset, LatentState, Model, VarianceParams, gamma_vector
from pavglm.response import ResponseFamily
from pavglm.warp import Warp

from conftest import load_oracle, toy_dataset

MODEL = Model()
NB = ResponseFamily("negative_binomial", r=18.632)
VP = VarianceParams(0.2, 1.5, 0.2, 0.02, 0.1)
ALL = VarianceParams.NAMES


def _nb_instance(rng, m=12):
    t = np.sort(rng.choice(np.arange(16) / 15, m, replace=False))
    y = NB.sample(2.5 + rng.standard_normal(m), seed=rng)
    return Curve("c", "g", t, y, family=NB), 2.5 + 0.5 * rng.standard_normal(11), 0.02 * rng.standard_normal(7)


class TestInnerSolve:
    def test_gaussian_closed_form(self):
        sigma2 = 0.3
        fam = ResponseFamily("gaussian", sigma2=sigma2)
        rng = np.random.default_rng(0)
        t = np.linspace(0, 1, 9)
        y = rng.normal(size=9)
        curve = Curve("c", "g", t, y, family=fam)
        coeffs = rng.normal(size=11)
        w = 0.01 * rng.standard_normal(7)
        u = inner_max_u(coeffs, w, curve, VP)
        S = covariance_matrix(t, VP.amplitude_kernel).matrix
        gamma = gamma_vector(coeffs, MODEL, w, curve)
        Si = np.linalg.inv(S)
        direct = np.linalg.solve(Si + np.eye(9) / sigma2, Si @ gamma + y / sigma2)
        np.testing.assert_allclose(u, direct, atol=1e-9)

    def test_zero_counts_pull_down(self):
        rng = np.random.default_rng(1)
        curve = Curve("z", "g", np.linspace(0, 1, 10), np.zeros(10), family=NB)
        for _ in range(10):
            coeffs = 3 + rng.standard_normal(11)
            w = 0.01 * rng.standard_normal(7)
            u = inner_max_u(coeffs, w, curve, VP)
            assert np.all(u <= gamma_vector(coeffs, MODEL, w, curve))

    def test_random_starts_agree(self):
        rng = np.random.default_rng(2)
        cfg = FitConfig()
        for _ in range(100):
            curve, coeffs, w = _nb_instance(rng)
            cache = CovarianceCache(MODEL, VP)
            ref = inner_max_u(coeffs, w, curve, VP, cfg, cache=cache)
            for _ in range(10):
                start = ref + 3 * rng.standard_normal(ref.size)
                np.testing.assert_allclose(inner_max_u(coeffs, w, curve, VP, cfg, u_start=start, cache=cache), ref, atol=1e-6)

    def test_first_order_condition(self):
        rng = np.random.default_rng(3)
        curve, coeffs, w = _nb_instance(rng)
        u = inner_max_u(coeffs, w, curve, VP)
        ds = Dataset([curve], NB, ["g"])
        assert _kkt_residual(ds, {"g": coeffs}, LatentState([u], [w]), VP, MODEL) < 1e-8


class TestPrediction:
    def test_constant_theta_keeps_identity_warp(self):
        rng = np.random.default_rng(4)
        curve, _, _ = _nb_instance(rng)
        _, w = predict_latents(np.full(11, 2.0), curve, VP)
        np.testing.assert_allclose(w, 0.0, atol=1e-8)

    def test_prior_pullback(self):
        fam = ResponseFamily("gaussian", sigma2=1e12)
        t = np.linspace(0, 1, 12)
        curve = Curve("p", "g", t, np.sin(6 * t), family=fam)
        _, w = predict_latents(np.sin(np.linspace(0, 6, 11)), curve, VP)
        np.testing.assert_allclose(w, 0.0, atol=1e-4)

    def test_recovers_known_warp(self):
        """Warp error shrinks as amplitude noise vanishes."""
        fam = ResponseFamily("gaussian", sigma2=1e-4)
        t = np.linspace(0, 1, 16)
        coeffs = 2 * np.sin(np.linspace(0, 2 * np.pi, 11))
        warp_kernel = MaternKernel(0.026, 1.5, 0.1)
        C = covariance_matrix(MODEL.warp.anchors, warp_kernel)
        errors = {}
        for scale in (0.1, 0.003):
            vp = VarianceParams(scale, 1.5, 0.2, 0.026, 0.1)
            S = covariance_matrix(t, vp.amplitude_kernel)
            rng = np.random.default_rng(5)
            err = []
            for _ in range(20):
                w_true = C.cholesky @ rng.standard_normal(7)
                u = MODEL.basis.design(Warp(MODEL.warp, w_true)(t)) @ coeffs + S.cholesky @ rng.standard_normal(16)
                curve = Curve("r", "g", t, u + 0.01 * rng.standard_normal(16), family=fam)
                _, w = predict_latents(coeffs, curve, vp)
                err.append(np.linalg.norm(w - w_true))
            errors[scale] = np.mean(err)
        assert errors[0.003] < 0.5 * errors[0.1]
        assert errors[0.003] < 0.026


class TestCoefficients:
    def test_interpolates_square_system(self):
        vp = VarianceParams(1.0, 0.5, 1e-4, 0.02, 0.1)  # exponential kernel at tiny range: S = I
        t = np.linspace(0, 1, 11)
        u = np.cos(3 * t)
        ds = Dataset([Curve("a", "g", t, np.zeros(11))], NB, ["g"])
        c = update_coeffs(ds, LatentState([u], [np.zeros(7)]), vp, ridge=0.0)
        np.testing.assert_allclose(MODEL.basis.design(t) @ c["g"], u, atol=1e-10)

    def test_normal_equations(self):
        ds = toy_dataset(NB)
        rng = np.random.default_rng(6)
        lat = LatentState([rng.normal(2, 1, c.m) for c in ds.curves], [0.01 * rng.standard_normal(7) for _ in ds.curves])
        c = update_coeffs(ds, lat, VP, ridge=0.0)
        cache = CovarianceCache(MODEL, VP)
        for g in ds.groups:
            total = 0.0
            for i, curve in enumerate(ds.curves):
                if curve.group != g:
                    continue
                B = MODEL.basis.design(Warp(MODEL.warp, lat.w[i])(curve.times))
                total = total + B.T @ cache.amplitude(curve.times).solve(B @ c[g] - lat.u[i])
            np.testing.assert_allclose(total, 0.0, atol=1e-8)

    def test_scale_invariant(self):
        ds = toy_dataset(NB)
        rng = np.random.default_rng(7)
        lat = LatentState([rng.normal(2, 1, c.m) for c in ds.curves], [np.zeros(7) for _ in ds.curves])
        doubled = VarianceParams(VP.amp_scale * np.sqrt(2), VP.amp_smoothness, VP.amp_range, VP.warp_scale, VP.warp_range)
        a, b = update_coeffs(ds, lat, VP, ridge=0.0), update_coeffs(ds, lat, doubled, ridge=0.0)
        for g in ds.groups:
            np.testing.assert_allclose(a[g], b[g], rtol=1e-9)

    def test_rank_deficient_group_named(self):
        t = np.linspace(0, 1, 5)
        ds = Dataset([Curve("a", "sparse", t, np.ones(5))], NB, ["sparse"])
        with pytest.raises(RankDeficientError, match="sparse"):
            update_coeffs(ds, LatentState([np.ones(5)], [np.zeros(7)]), VP)


class TestLinearization:
    def test_identity_warp(self):
        rng = np.random.default_rng(8)
        curve, coeffs, _ = _nb_instance(rng)
        r, V = linearize(coeffs, curve, np.zeros(7), VP)
        np.testing.assert_allclose(r, gamma_vector(coeffs, MODEL, np.zeros(7), curve))
        np.linalg.cholesky(V)

    def test_no_phase_variation_limit(self):
        rng = np.random.default_rng(9)
        curve, coeffs, w = _nb_instance(rng)
        vp = VarianceParams(VP.amp_scale, VP.amp_smoothness, VP.amp_range, 1e-9, VP.warp_range)
        _, V = linearize(coeffs, curve, w, vp)
        np.testing.assert_allclose(V, covariance_matrix(curve.times, vp.amplitude_kernel).matrix, atol=1e-12)

    def test_monte_carlo_covariance(self):
        """V matches the covariance of gamma(w) + x under the prior for a small warp scale."""
        rng = np.random.default_rng(10)
        curve, coeffs, _ = _nb_instance(rng)
        vp = VarianceParams(0.1, 1.5, 0.2, 0.005, 0.1)
        r, V = linearize(coeffs, curve, np.zeros(7), vp)
        C = covariance_matrix(MODEL.warp.anchors, MaternKernel(0.005, 1.5, 0.1)).cholesky
        S = covariance_matrix(curve.times, vp.amplitude_kernel).cholesky
        n = 10_000
        draws = np.array(
            [gamma_vector(coeffs, MODEL, C @ rng.standard_normal(7), curve) + S @ rng.standard_normal(curve.m) for _ in range(n)]
        )
        emp = np.cov(draws.T)
        se = np.sqrt((np.outer(np.diag(V), np.diag(V)) + V**2) / n)
        assert np.all(np.abs(emp - V) < 3 * se + 1e-6)
        np.testing.assert_allclose(draws.mean(axis=0), r, atol=4 * np.sqrt(np.diag(V) / n).max())


def _gaussian_toy():
    fam = ResponseFamily("gaussian", sigma2=0.25)
    rng = np.random.default_rng(11)
    curves = []
    for k in range(2):
        t = np.sort(rng.uniform(0, 1, 5))
        curves.append(Curve(str(k), "g", t, np.sin(3 * t) + 0.3 * rng.standard_normal(5)))
    return Dataset(curves, fam, ["g"]), {"g": np.sin(3 * np.linspace(0, 1, 11))}


def gaussian_exactness_gap(vp, dataset=None, coeffs=None):
    """Laplace value minus the exact -2 log marginal of the linearized Gaussian model."""
    if dataset is None:
        dataset, coeffs = _gaussian_toy()
    cfg = FitConfig()
    latents, _, _ = predict_all(dataset, coeffs, vp, cfg, MODEL)
    approx = laplace_marginal_nll(dataset, coeffs, vp, cfg, MODEL, latents)
    sigma2 = dataset.family.sigma2
    exact = 0.0
    constant = 0.0
    for i, curve in enumerate(dataset.curves):
        r, V = linearize(coeffs["g"], curve, latents.w[i], vp)
        exact += -2.0 * multivariate_normal(r, V + sigma2 * np.eye(curve.m)).logpdf(curve.y)
        constant += -curve.m * np.log(2 * np.pi * sigma2) - curve.y @ curve.y / sigma2
    return approx - exact, constant


class TestLaplace:
    @pytest.mark.parametrize(
        "vp",
        [VP, VarianceParams(0.5, 0.7, 0.05, 0.04, 0.3), VarianceParams(0.05, 3.0, 0.6, 0.01, 0.05)],
    )
    def test_gaussian_exact(self, vp):
        gap, constant = gaussian_exactness_gap(vp)
        np.testing.assert_allclose(gap, constant, atol=1e-8)

    def test_alternative_convention_differs(self):
        ds, coeffs = _gaussian_toy()
        a = laplace_marginal_nll(ds, coeffs, VP, FitConfig(laplace_convention="standard"))
        b = laplace_marginal_nll(ds, coeffs, VP, FitConfig(laplace_convention="paper"))
        assert b > a

    def test_empty_curve_ignored(self):
        ds = toy_dataset(NB)
        coeffs = {g: np.full(11, 2.5) for g in ds.groups}
        base = laplace_marginal_nll(ds, coeffs, VP)
        empty = Curve("e", "a", np.zeros(0), np.zeros(0))
        ds2 = Dataset(ds.curves + [empty], NB, ds.groups)
        np.testing.assert_allclose(laplace_marginal_nll(ds2, coeffs, VP), base, rtol=1e-12)

    def test_improves_toward_generating_amplitude(self):
        from pavglm.synth import simulate_curves
        from pavglm.dispersion import aggregate

        coeffs = {"g": 3 + np.sin(np.linspace(0, 3, 11))}
        truth = VarianceParams(0.3, 1.5, 0.2, 0.01, 0.1)
        table, _ = simulate_curves(coeffs, truth, 50.0, n_per_group=15, seed=12)
        ds = aggregate(table, 50.0)
        values = []
        for scale in (0.05, 0.1, 0.2, 0.3):
            vp = VarianceParams(scale, 1.5, 0.2, 0.01, 0.1)
            values.append(laplace_marginal_nll(ds, coeffs, vp))
        assert np.all(np.diff(values) < 0)


class TestFit:
    def test_matches_glm_oracle(self):
        ref = load_oracle("glm_reference.json")
        fam = ResponseFamily("negative_binomial", r=ref["r"])
        ds = Dataset([Curve(str(i), "g", ref["times"], y) for i, y in enumerate(ref["counts"])], fam, ["g"])
        vp = VarianceParams(1e-4, 0.5, 1e-3, 1e-6, 0.1)
        fitted = fit(ds, FitConfig(initial=vp, fixed=ALL))
        theta = MODEL.basis.design(ref["grid"]) @ fitted.coeffs["g"]
        se = np.array(ref["negative_binomial"]["se"])
        assert np.all(np.abs(theta - ref["negative_binomial"]["theta"]) < 2 * se)
        np.testing.assert_allclose(theta, ref["negative_binomial"]["theta"], atol=1e-5)

    def test_gaussian_pipeline_matches_gls(self):
        """No phase variation: the joint mode is GLS with covariance S + sigma2 I."""
        sigma2 = 0.05
        fam = ResponseFamily("gaussian", sigma2=sigma2)
        rng = np.random.default_rng(13)
        t = np.linspace(0, 1, 16)
        vp = VarianceParams(0.3, 1.5, 0.2, 1e-7, 0.1)
        curves = [Curve(str(k), "g", t, np.cos(2 * t) + 0.3 * rng.standard_normal(16)) for k in range(4)]
        ds = Dataset(curves, fam, ["g"])
        fitted = fit(ds, FitConfig(initial=vp, fixed=ALL, coef_rtol=1e-14))
        K = covariance_matrix(t, vp.amplitude_kernel).matrix + sigma2 * np.eye(16)
        B = MODEL.basis.design(t)
        lhs = 4 * B.T @ np.linalg.solve(K, B)
        rhs = B.T @ np.linalg.solve(K, sum(c.y for c in curves))
        np.testing.assert_allclose(fitted.coeffs["g"], np.linalg.solve(lhs, rhs), atol=1e-6)

    def test_trace_monotone_and_kkt(self, toy_fit):
        assert np.all(np.diff(toy_fit.trace) <= 0)
        assert toy_fit.kkt < 1e-6

    def test_deterministic(self, toy_fit):
        again = fit(toy_fit.dataset, toy_fit.config)
        assert again.objective == toy_fit.objective
        assert again.vp == toy_fit.vp
        for g in toy_fit.coeffs:
            np.testing.assert_array_equal(again.coeffs[g], toy_fit.coeffs[g])

    def test_smoothness_bound(self, toy_fit):
        assert toy_fit.vp.amp_smoothness <= 10.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FitConfig(laplace_convention="other")
        with pytest.raises(ValueError):
            FitConfig(fixed=("bogus",))
        with pytest.raises(ValueError):
            FitConfig(max_outer=0)


@pytest.fixture(scope="module")
def toy_fit():
    ds = toy_dataset(NB, n_per_group=4)
    return fit(ds, FitConfig(max_outer=6))
