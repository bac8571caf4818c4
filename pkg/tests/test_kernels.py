import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pavglm.kernels import (
    IllConditionedError,
    MaternKernel,
    covariance_matrix,
    factorize,
    matern,
    warp_prior,
)

from conftest import load_oracle

REF = load_oracle("reference_values.json")


class TestMaternValues:
    @pytest.mark.parametrize("entry", REF["matern"], ids=lambda e: f"a{e['smoothness']}-d{e['d']}")
    def test_against_high_precision(self, entry):
        k = MaternKernel(entry["scale"], entry["smoothness"], entry["range"])
        np.testing.assert_allclose(matern(entry["d"], k), entry["value"], rtol=1e-12)

    def test_half_smoothness_closed_form(self):
        rng = np.random.default_rng(0)
        d = rng.uniform(0, 5, 100)
        kappa = rng.uniform(0.01, 3, 100)
        for di, ki in zip(d, kappa):
            k = MaternKernel(1.0, 0.5, ki)
            np.testing.assert_allclose(matern(di, k), np.exp(-di / (2 * ki)), rtol=0, atol=1e-10)

    def test_zero_lag_is_variance(self):
        for a in (0.3, 0.5, 1.5, 2.5, 10.0):
            assert matern(0.0, MaternKernel(1.7, a, 0.4)) == 1.7**2

    def test_scale_enters_squared(self):
        d = np.linspace(0, 2, 9)
        np.testing.assert_allclose(matern(d, MaternKernel(3.0, 1.5, 0.3)), 9.0 * matern(d, MaternKernel(1.0, 1.5, 0.3)))

    def test_continuous_in_smoothness(self):
        d = np.linspace(0, 1, 21)
        base = matern(d, MaternKernel(1.0, 1.5, 0.2))
        near = matern(d, MaternKernel(1.0, 1.5 + 1e-7, 0.2))
        np.testing.assert_allclose(base, near, atol=1e-6)

    def test_continuous_at_small_lag_cutoff(self):
        k = MaternKernel(1.0, 2.5, 0.3)
        np.testing.assert_allclose(matern(1e-9, k), 1.0, atol=1e-8)

    def test_decays_to_zero(self):
        assert matern(1e4, MaternKernel(1.0, 1.5, 0.01)) == 0.0

    @given(d=st.floats(0, 5), a=st.floats(0.1, 10), kappa=st.floats(0.01, 5))
    @settings(max_examples=100, deadline=None)
    def test_bounded_by_variance(self, d, a, kappa):
        v = matern(d, MaternKernel(1.3, a, kappa))
        assert 0.0 <= v <= 1.3**2 * (1 + 1e-12)

    def test_rejects_negative_lags(self):
        with pytest.raises(ValueError):
            matern(-0.1, MaternKernel(1.0, 1.0, 1.0))

    def test_rejects_nonpositive_parameters(self):
        with pytest.raises(ValueError):
            MaternKernel(1.0, 0.0, 1.0)


class TestCovarianceMatrix:
    def test_psd_on_random_grids(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            n = rng.integers(2, 40)
            t = np.sort(rng.uniform(0, 1, n))
            k = MaternKernel(rng.uniform(0.05, 2), rng.uniform(0.2, 10), rng.uniform(0.01, 2))
            K = matern(np.abs(t[:, None] - t[None, :]), k)
            vals = np.linalg.eigvalsh(K)
            assert vals.min() >= -1e-8 * vals.max()

    def test_cholesky_reconstructs(self):
        t = np.linspace(0, 1, 16)
        cov = covariance_matrix(t, MaternKernel(0.5, 1.5, 0.3))
        L = cov.cholesky
        np.testing.assert_allclose(L @ L.T, cov.matrix + cov.jitter * np.eye(16), atol=1e-12)
        np.testing.assert_allclose(cov.logdet(), np.linalg.slogdet(cov.matrix + cov.jitter * np.eye(16))[1])

    def test_no_jitter_when_well_conditioned(self):
        assert covariance_matrix(np.linspace(0, 1, 8), MaternKernel(1.0, 0.5, 0.1)).jitter == 0.0

    def test_jitter_rescues_smooth_kernel(self):
        # very smooth and long range: numerically singular without a nugget
        cov = covariance_matrix(np.linspace(0, 1, 30), MaternKernel(1.0, 10.0, 3.0))
        assert 0.0 < cov.jitter <= 1e-6

    def test_jitter_budget_exhausted(self):
        M = np.ones((3, 3))
        M[0, 0] = 0.5
        with pytest.raises(IllConditionedError):
            factorize(M, 1.0)

    def test_warp_prior_uses_three_halves(self):
        a = np.arange(1, 8) / 8
        C = warp_prior(a, 0.1, 0.026)
        x = 1.5 * abs(a[0] - a[1]) / 0.1
        expected = 0.026**2 * (1 + x) * np.exp(-x)
        np.testing.assert_allclose(C.matrix[0, 1], expected, rtol=1e-12)
