"""
Latent curve model ``u_n(t) = theta_{group(n)}(v_n(t)) + x_n(t)``.

The amplitude process ``x_n`` is a zero-mean Gaussian process on the link
scale, evaluated at the observed times. Warps ``v_n`` are parametrized by
anchor displacements ``w_n ~ N(0, C)``.
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .basis import SplineBasis
from .kernels import MAX_SMOOTHNESS, CovarianceMatrix, MaternKernel, covariance_matrix, warp_prior
from .response import ResponseFamily
from .warp import InvalidWarpError, Warp, WarpSpec


@dataclass
class Curve:
    """One replicate curve. ``y`` holds (possibly summed) observations."""

    id: str
    group: str
    times: np.ndarray
    y: np.ndarray
    replicate_count: int = 1
    family: Optional[ResponseFamily] = None

    def __post_init__(self):
        self.id = str(self.id)
        self.group = str(self.group)
        self.times = np.asarray(self.times, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.times.shape != self.y.shape or self.times.ndim != 1:
            raise ValueError(f"curve {self.id}: times and y must be 1-d of equal length")
        if self.times.size == 1:
            raise ValueError(f"curve {self.id}: need at least 2 observations")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError(f"curve {self.id}: times must be strictly increasing")
        self.family = self.family

    def __setattr__(self, name, value):
        super().__setattr__(name, value)
        if name in ("family", "y") and getattr(self, "family", None) is not None and hasattr(self, "y"):
            # canonical statistic cached once; hot loops use unchecked family methods
            super().__setattr__("t", self.family.canonical(self.y))

    @property
    def m(self):
        return self.times.size


@dataclass
class Dataset:
    """Curves sharing one response family unless a curve carries its own."""

    curves: list
    family: ResponseFamily
    groups: Optional[Sequence[str]] = None

    def __post_init__(self):
        self.curves = list(self.curves)
        if self.groups is None:
            seen = []
            for c in self.curves:
                if c.group not in seen:
                    seen.append(c.group)
            self.groups = seen
        self.groups = [str(g) for g in self.groups]
        for c in self.curves:
            if c.group not in self.groups:
                raise ValueError(f"curve {c.id}: unknown group {c.group!r}")
            if c.family is None:
                c.family = self.family

    def __len__(self):
        return len(self.curves)

    def group_curves(self, group):
        return [c for c in self.curves if c.group == group]

    def subset(self, keep):
        """Dataset restricted to curve indices ``keep`` (same groups and family)."""
        return Dataset([self.curves[i] for i in keep], self.family, list(self.groups))


@dataclass(frozen=True)
class VarianceParams:
    amp_scale: float
    amp_smoothness: float
    amp_range: float
    warp_scale: float
    warp_range: float

    NAMES = ("amp_scale", "amp_smoothness", "amp_range", "warp_scale", "warp_range")

    def __post_init__(self):
        for name in self.NAMES:
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0")
        if self.amp_smoothness > MAX_SMOOTHNESS:
            raise ValueError(f"amplitude smoothness capped at {MAX_SMOOTHNESS}")

    @property
    def amplitude_kernel(self):
        return MaternKernel(self.amp_scale, self.amp_smoothness, self.amp_range)

    def to_log(self):
        return np.log([getattr(self, n) for n in self.NAMES])

    @classmethod
    def from_log(cls, x):
        return cls(*map(float, np.exp(x)))

    def as_dict(self):
        return {n: float(getattr(self, n)) for n in self.NAMES}


@dataclass(frozen=True)
class Model:
    """Structural choices shared by every curve."""

    basis: SplineBasis = field(default_factory=SplineBasis)
    warp: WarpSpec = field(default_factory=WarpSpec)


@dataclass
class LatentState:
    u: list
    w: list

    def copy(self):
        return LatentState([np.array(a) for a in self.u], [np.array(a) for a in self.w])


class CovarianceCache:
    """Memoizes amplitude and warp covariance factorizations for one parameter set."""

    def __init__(self, model: Model, vp: VarianceParams):
        self.model = model
        self.vp = vp
        self._amp = {}
        self._warp = None

    def amplitude(self, times) -> CovarianceMatrix:
        key = np.asarray(times, dtype=float).tobytes()
        cov = self._amp.get(key)
        if cov is None:
            cov = covariance_matrix(times, self.vp.amplitude_kernel)
            self._amp[key] = cov
        return cov

    def warp(self) -> CovarianceMatrix:
        if self._warp is None:
            self._warp = warp_prior(self.model.warp.anchors, self.vp.warp_range, self.vp.warp_scale)
        return self._warp


def gamma_vector(coeffs, model: Model, w, curve: Curve):
    """theta evaluated at the warped observation times."""
    v = Warp(model.warp, w)(curve.times)
    return model.basis.design(v) @ np.asarray(coeffs, dtype=float)


def gamma_and_jacobian(coeffs, model: Model, w, curve: Curve):
    """Return ``(gamma, dgamma/dw, design at warped times)``."""
    warp = Warp(model.warp, w)
    W = warp.weights(curve.times)
    v = W @ warp.y
    coeffs = np.asarray(coeffs, dtype=float)
    B = model.basis.design(v)
    dtheta = model.basis.design_derivative(v) @ coeffs
    J = dtheta[:, None] * W[:, 1:]
    return B @ coeffs, J, B


def data_term(curve: Curve, u):
    return float(np.sum(curve.family._a(u, curve.y) - u * curve.t))


def posterior_nll(coeffs, u, w, curve: Curve, vp: VarianceParams, model: Model = Model(), cache=None):
    """Joint negative log posterior of ``(u, w)`` for one curve, up to constants.

    Returns ``inf`` when ``w`` does not define a monotone warp.
    """
    cache = cache or CovarianceCache(model, vp)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    try:
        gamma = gamma_vector(coeffs, model, w, curve)
    except InvalidWarpError:
        return np.inf
    S = cache.amplitude(curve.times)
    C = cache.warp()
    resid = gamma - u
    amp = resid @ S.solve(resid)
    prior = w @ C.solve(w)
    return data_term(curve, u) + 0.5 * amp + 0.5 * prior


def posterior_grad_hess_u(coeffs, u, w, curve: Curve, vp: VarianceParams, model: Model = Model(), cache=None):
    """Gradient and Hessian of :func:`posterior_nll` in ``u``."""
    cache = cache or CovarianceCache(model, vp)
    u = np.asarray(u, dtype=float)
    gamma = gamma_vector(coeffs, model, w, curve)
    S = cache.amplitude(curve.times)
    fam = curve.family
    Sinv = S.inverse
    grad = fam._a1(u, curve.y) - curve.t + S.solve(u - gamma)
    hess = np.diag(fam._a2(u, curve.y)) + 0.5 * (Sinv + Sinv.T)
    return grad, hess


def initial_latent(curve: Curve):
    """Link of lightly smoothed observations, used to start the first fit."""
    fam = curve.family
    y = curve.y
    if fam.kind == "gaussian":
        return y.copy()
    if fam.kind == "binary":
        p = (y + 0.5) / 2.0
        return np.log(p / (1.0 - p))
    return np.log(y + 0.5)


def whiten(chol_lower, x):
    return solve_triangular(chol_lower, x, lower=True, check_finite=False)


def with_params(vp: VarianceParams, **changes):
    return replace(vp, **changes)
