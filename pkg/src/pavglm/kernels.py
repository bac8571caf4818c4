"""
Matérn covariance in the parametrization

    k(d) = scale**2 * 2**(1 - a) / Gamma(a) * (a d / range)**a * K_a(a d / range)

with smoothness ``a``. Note the argument is ``a d / range``, not the more
common ``sqrt(2 a) d / range``; for ``a = 1/2`` this gives
``scale**2 * exp(-d / (2 range))``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln, kv

MAX_SMOOTHNESS = 10.0
WARP_SMOOTHNESS = 1.5

# below this argument x**a K_a(x) is replaced by its x -> 0 limit
_SMALL_ARG = 1e-12


class IllConditionedError(np.linalg.LinAlgError):
    """Covariance matrix could not be made positive definite within the jitter budget."""


@dataclass(frozen=True)
class MaternKernel:
    scale: float
    smoothness: float
    range: float

    def __post_init__(self):
        for name in ("scale", "smoothness", "range"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"Matérn {name} must be finite and > 0, got {v!r}")

    @property
    def variance(self):
        return self.scale**2


def matern(d, kernel: MaternKernel):
    """Evaluate the kernel at nonnegative lags ``d`` (scalar or array)."""
    d = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d)):
        raise ValueError("lags must be finite")
    if np.any(d < 0):
        raise ValueError("lags must be nonnegative")
    a = kernel.smoothness
    x = a * d / kernel.range
    out = np.ones_like(x)
    big = x > _SMALL_ARG
    if np.any(big):
        xb = x[big]
        log_norm = (1.0 - a) * np.log(2.0) - gammaln(a)
        with np.errstate(under="ignore"):
            out[big] = np.exp(log_norm + a * np.log(xb)) * kv(a, xb)
        # kv underflows to 0 for very large x; that is the correct limit
    return kernel.variance * out


@dataclass
class CovarianceMatrix:
    """Kernel matrix with the diagonal jitter that was needed and its Cholesky factor."""

    matrix: np.ndarray
    jitter: float
    _chol: tuple

    def solve(self, b):
        return cho_solve(self._chol, b)

    def logdet(self):
        return 2.0 * np.sum(np.log(np.diag(self._chol[0])))

    @property
    def cholesky(self):
        """Lower-triangular factor L with matrix + jitter*I = L L^T."""
        L = self.__dict__.get("_lower")
        if L is None:
            c, lower = self._chol
            L = np.tril(c) if lower else np.triu(c).T
            self._lower = L
        return L

    @property
    def inverse(self):
        return self.solve(np.eye(self.matrix.shape[0]))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.matrix, dtype=dtype)


def factorize(matrix, base_variance):
    """Cholesky with the jitter policy: 0, then 1e-10*v doubling up to 1e-6*v.

    Returns ``(cho_factor, jitter)``.
    """
    n = matrix.shape[0]
    eye = np.eye(n)
    jitter = 0.0
    while True:
        try:
            return cho_factor(matrix + jitter * eye, lower=True, check_finite=False), jitter
        except np.linalg.LinAlgError:
            pass
        jitter = 1e-10 * base_variance if jitter == 0.0 else 2.0 * jitter
        if jitter > 1e-6 * base_variance:
            raise IllConditionedError(
                f"{n}x{n} covariance not positive definite with jitter up to 1e-6*variance"
            )


def covariance_matrix(times, kernel: MaternKernel) -> CovarianceMatrix:
    times = np.asarray(times, dtype=float).ravel()
    if times.size < 1:
        raise ValueError("need at least one time point")
    if not np.all(np.isfinite(times)):
        raise ValueError("times must be finite")
    lags = np.abs(times[:, None] - times[None, :])
    m = matern(lags, kernel)
    m = 0.5 * (m + m.T)
    chol, jitter = factorize(m, kernel.variance)
    return CovarianceMatrix(m, jitter, chol)


def warp_prior(anchors, range, scale) -> CovarianceMatrix:
    """Covariance of warp anchor displacements, Matérn with smoothness fixed at 3/2."""
    anchors = np.asarray(anchors, dtype=float)
    if np.any(np.diff(anchors) <= 0):
        raise ValueError("anchors must be strictly increasing")
    return covariance_matrix(anchors, MaternKernel(scale, WARP_SMOOTHNESS, range))
