"""
Inference for the group mean curves of a fitted model.

Uncertainty in the spline coefficients comes from the curvature of the
profiled posterior ``f(c) = L(c, u(c), w(c))`` in which the latent curves
and warps are re-optimized for every ``c``. Functionals such as the peak
location are then propagated by simulation from ``N(c_hat, I^{-1})``.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.stats import norm

from .basis import SplineBasis
from .estimation import FittedModel, predict_curve
from .kernels import matern
from .model import CovarianceCache, gamma_and_jacobian
from .seeding import stream
from .warp import InvalidWarpError, Warp

log = logging.getLogger(__name__)

HORIZON_HOURS = 120.0
GRID_POINTS = 1201
DEFAULT_THRESHOLDS = np.arange(1, 12) * 0.5
DEFAULT_NSIM = 1000
FD_STEP = 1e-3
EIGEN_FLOOR = 1e-10


class IndefiniteInformationError(np.linalg.LinAlgError):
    pass


def unit_grid(points=GRID_POINTS):
    return np.linspace(0.0, 1.0, points)


# -- information matrices -----------------------------------------------------


def _group_members(fit: FittedModel, group):
    idx = [i for i, c in enumerate(fit.dataset.curves) if c.group == group and c.m > 0]
    if not idx:
        raise ValueError(f"group {group!r} has no observations")
    return idx


def profiled_group_objective(fit: FittedModel, group, coeffs):
    """``f(c)``: joint posterior of the group with latents re-optimized at ``coeffs``.

    Every evaluation is warm-started from the fitted latents, so repeated
    calls with the same ``coeffs`` give identical values.
    """
    cache = CovarianceCache(fit.model, fit.vp)
    cfg = fit.config
    total = 0.0
    for i in _group_members(fit, group):
        curve = fit.dataset.curves[i]
        _, _, info = predict_curve(
            coeffs, curve, fit.vp, cfg, fit.model, fit.latents.w[i], fit.latents.u[i], cache
        )
        total += info["objective"]
    return total


def _fd_hessian(f, x0, h):
    k = x0.size
    f0 = f(x0)
    H = np.empty((k, k))
    E = np.eye(k) * h
    plus = [f(x0 + E[i]) for i in range(k)]
    minus = [f(x0 - E[i]) for i in range(k)]
    for i in range(k):
        H[i, i] = (plus[i] - 2.0 * f0 + minus[i]) / h**2
        for j in range(i):
            fpp = f(x0 + E[i] + E[j])
            fpm = f(x0 + E[i] - E[j])
            fmp = f(x0 - E[i] + E[j])
            fmm = f(x0 - E[i] - E[j])
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h**2)
    return H


def _floor_eigenvalues(H, group, floor=EIGEN_FLOOR, tol=1e-8):
    H = 0.5 * (H + H.T)
    vals, vecs = np.linalg.eigh(H)
    if vals[0] < -tol * max(1.0, vals[-1]):
        raise IndefiniteInformationError(
            f"information for group {group!r} is indefinite: eigenvalues {np.array2string(vals, precision=3)}"
        )
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def information_matrix(fit: FittedModel, group, h=FD_STEP):
    """Observed information of the spline coefficients of ``group``.

    Central finite-difference Hessian of the profiled posterior, in which the
    latent curves and warps are re-optimized at every perturbed coefficient
    vector. Holding the latents fixed instead would overstate the
    information.
    """
    if not fit.converged:
        warnings.warn("information computed from a fit that did not converge", stacklevel=2)
    c0 = np.asarray(fit.coeffs[group], dtype=float)
    H = _fd_hessian(lambda c: profiled_group_objective(fit, group, c), c0, h)
    return _floor_eigenvalues(H, group)


def fixed_latent_information(fit: FittedModel, group):
    """Hessian in ``c`` of the joint posterior with ``u`` and ``w`` held at their fitted values."""
    cache = CovarianceCache(fit.model, fit.vp)
    H = 0.0
    for i in _group_members(fit, group):
        curve = fit.dataset.curves[i]
        _, _, B = gamma_and_jacobian(fit.coeffs[group], fit.model, fit.latents.w[i], curve)
        L = cache.amplitude(curve.times).cholesky
        X = solve_triangular(L, B, lower=True)
        H = H + X.T @ X
    return H


# -- bands and coefficient draws ----------------------------------------------


@dataclass
class Band:
    hours: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    se: np.ndarray


def _z(level):
    if not 0.0 <= level < 1.0:
        raise ValueError("level must be in [0, 1)")
    return norm.ppf(0.5 + 0.5 * level)


def confidence_band(fit: FittedModel, group, level=0.95, grid=None, info=None, horizon=HORIZON_HOURS):
    """Pointwise band ``theta(t) +- z sqrt(b(t)' I^{-1} b(t))`` on the link scale."""
    grid = unit_grid() if grid is None else np.asarray(grid, dtype=float)
    info = information_matrix(fit, group) if info is None else info
    B = fit.model.basis.design(grid)
    est = B @ fit.coeffs[group]
    chol = cho_factor(info, lower=True)
    se = np.sqrt(np.einsum("ij,ji->i", B, cho_solve(chol, B.T)))
    z = _z(level)
    return Band(grid * horizon, est, est - z * se, est + z * se, se)


def sample_coefficients(fit: FittedModel, group, n_sim=DEFAULT_NSIM, seed=None, info=None):
    """Draws from ``N(c_hat, I^{-1})``, shape ``(n_sim, n_basis)``."""
    info = information_matrix(fit, group) if info is None else info
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "coefficients", group)
    L = np.linalg.cholesky(info)
    z = rng.standard_normal((n_sim, info.shape[0]))
    # L^{-T} z has covariance (L L^T)^{-1}
    return fit.coeffs[group] + solve_triangular(L, z.T, lower=True, trans="T").T


# -- peak statistics -----------------------------------------------------------


@dataclass
class PeakStats:
    location: float
    decrease: float
    at_horizon: bool = False


def peak_stats_values(values, horizon=HORIZON_HOURS):
    """Peak location (hours) and decrease (%/h) from values on a uniform grid over ``[0, 1]``.

    ``values`` may be 2-d with one curve per row; then arrays are returned.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    values = np.asarray(values, dtype=float)
    single = values.ndim == 1
    values = np.atleast_2d(values)
    n = values.shape[1]
    idx = np.argmax(values, axis=1)
    loc = idx / (n - 1) * horizon
    at_end = idx == n - 1
    peak = values[np.arange(values.shape[0]), idx]
    span = np.where(at_end, 1.0, horizon - loc)
    dec = np.where(at_end, 0.0, 100.0 * (peak - values[:, -1]) / span)
    if single:
        return PeakStats(float(loc[0]), float(dec[0]), bool(at_end[0]))
    return loc, dec, at_end


def peak_stats(coeffs, basis: SplineBasis = SplineBasis(), horizon=HORIZON_HOURS, points=GRID_POINTS):
    """Peak location and decrease of ``theta``; ``coeffs`` may hold one vector per row."""
    B = basis.design(unit_grid(points))
    coeffs = np.asarray(coeffs, dtype=float)
    return peak_stats_values(coeffs @ B.T, horizon)


def credibility_q(fx, fy, mode="paired"):
    """``P(f(X) < f(Y))`` with ties counted one half.

    ``paired`` compares draw ``i`` of X with draw ``i`` of Y; ``cross``
    compares every pair.
    """
    fx = np.asarray(fx, dtype=float).ravel()
    fy = np.asarray(fy, dtype=float).ravel()
    if fx.size == 0 or fy.size == 0:
        raise ValueError("need nonempty samples")
    if mode == "paired":
        if fx.size != fy.size:
            raise ValueError("paired mode needs equally many draws")
        less = int(np.sum(fx < fy))
        ties = int(np.sum(fx == fy))
        total = fx.size
    elif mode == "cross":
        ys = np.sort(fy)
        above = fy.size - np.searchsorted(ys, fx, side="right")
        at_or_above = fy.size - np.searchsorted(ys, fx, side="left")
        less = int(above.sum())
        ties = int((at_or_above - above).sum())
        total = fx.size * fy.size
    else:
        raise ValueError("mode must be 'paired' or 'cross'")
    return (2 * less + ties) / (2 * total)


# -- trajectory simulation and thresholds --------------------------------------


@dataclass
class Trajectories:
    hours: np.ndarray
    link: np.ndarray
    warps: np.ndarray

    @property
    def intensity(self):
        return np.exp(self.link)

    def peak_times(self):
        return self.hours[np.argmax(self.link, axis=1)]


def _gp_root(grid, kernel):
    """Symmetric square root of the kernel matrix on ``grid`` (robust to rank loss)."""
    K = matern(np.abs(grid[:, None] - grid[None, :]), kernel)
    vals, vecs = np.linalg.eigh(0.5 * (K + K.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def simulate_trajectories(
    fit: FittedModel, group, n_traj=DEFAULT_NSIM, seed=None, amplitude=True, points=GRID_POINTS, horizon=HORIZON_HOURS
):
    """Draw ``theta(v(t, w)) + x(t)`` with ``w ~ N(0, C)`` and ``x`` the amplitude process.

    Draws giving a non-monotone warp are redrawn. ``amplitude=False``
    simulates phase variation only.
    """
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "trajectories", group)
    grid = unit_grid(points)
    cache = CovarianceCache(fit.model, fit.vp)
    Lc = cache.warp().cholesky
    coeffs = fit.coeffs[group]
    m_w = fit.model.warp.m_w
    root = _gp_root(grid, fit.vp.amplitude_kernel) if amplitude else None
    link = np.empty((n_traj, points))
    warps = np.empty((n_traj, m_w))
    for k in range(n_traj):
        while True:
            w = Lc @ rng.standard_normal(m_w)
            try:
                v = Warp(fit.model.warp, w)(grid)
                break
            except InvalidWarpError:
                continue
        u = fit.model.basis.design(v) @ coeffs
        if amplitude:
            u = u + root @ rng.standard_normal(points)
        link[k] = u
        warps[k] = w
    return Trajectories(grid * horizon, link, warps)


@dataclass
class ThresholdSummary:
    thresholds: np.ndarray
    first: np.ndarray
    duration: np.ndarray


def _cell_widths(hours):
    mid = 0.5 * (hours[1:] + hours[:-1])
    edges = np.concatenate([[hours[0]], mid, [hours[-1]]])
    return np.diff(edges)


def threshold_summary(trajectories, thresholds=DEFAULT_THRESHOLDS, hours=None):
    """First crossing time and time spent at or above each threshold.

    ``trajectories`` is a :class:`Trajectories` or an array of link-scale
    curves on ``hours``. Durations only count time up to the last grid point.
    ``first`` is NaN when the threshold is never reached.
    """
    if isinstance(trajectories, Trajectories):
        hours, link = trajectories.hours, trajectories.link
    else:
        link = np.atleast_2d(np.asarray(trajectories, dtype=float))
        hours = np.linspace(0.0, HORIZON_HOURS, link.shape[1]) if hours is None else np.asarray(hours, float)
    thresholds = np.asarray(thresholds, dtype=float)
    widths = _cell_widths(hours)
    above = link[:, None, :] >= thresholds[None, :, None]
    hit = above.any(axis=2)
    first = np.where(hit, hours[np.argmax(above, axis=2)], np.nan)
    duration = above @ widths
    return ThresholdSummary(thresholds, first, duration)


# -- tables ---------------------------------------------------------------------


@dataclass
class GroupInference:
    group: str
    info: np.ndarray
    band: Band
    samples: np.ndarray
    locations: np.ndarray
    decreases: np.ndarray
    estimate: PeakStats


def infer_group(fit: FittedModel, group, n_sim=DEFAULT_NSIM, seed=None, level=0.95):
    info = information_matrix(fit, group)
    band = confidence_band(fit, group, level, info=info)
    samples = sample_coefficients(fit, group, n_sim, seed, info)
    loc, dec, _ = peak_stats(samples, fit.model.basis)
    est = peak_stats(fit.coeffs[group], fit.model.basis)
    return GroupInference(group, info, band, samples, loc, dec, est)


def peak_table(results, level=0.95):
    """Rows ``(group, statistic, lower, estimate, upper)`` with simulation quantiles."""
    lo, hi = 50.0 * (1 - level), 50.0 * (1 + level)
    rows = []
    for r in results:
        for name, draws, est in (
            ("peak_location", r.locations, r.estimate.location),
            ("peak_decrease", r.decreases, r.estimate.decrease),
        ):
            rows.append((r.group, name, float(np.percentile(draws, lo)), float(est), float(np.percentile(draws, hi))))
    return rows


def q_table(results, mode="paired"):
    """Pairwise credibility values for groups ordered from coldest to warmest.

    Each row states its hypothesis as ``f(X) < f(Y)``: a warmer group peaks
    earlier than a colder one, and a colder group decreases more slowly.
    Values near 1 support the hypothesis, values near 0 its reverse.
    """
    rows = []
    for i in range(len(results)):
        for j in range(i + 1, len(results)):
            a, b = results[i], results[j]
            rows.append((f"peak({b.group}) < peak({a.group})", credibility_q(b.locations, a.locations, mode)))
    for i in range(len(results)):
        for j in range(i + 1, len(results)):
            a, b = results[i], results[j]
            rows.append((f"decrease({a.group}) < decrease({b.group})", credibility_q(a.decreases, b.decreases, mode)))
    return rows
