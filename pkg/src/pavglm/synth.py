"""
Synthetic data resembling the conidia-discharge design: 3 temperature
groups x 5 replicates, 16 time points every 8 h over 120 h, four counts per
measurement, negative binomial counts with common rate 4.658 per count.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .basis import SplineBasis
from .dispersion import ReplicateTable
from .kernels import covariance_matrix
from .model import Model, VarianceParams
from .response import ResponseFamily
from .warp import InvalidWarpError, Warp

HORIZON_HOURS = 120.0
SAMPLE_HOURS = np.arange(16) * 8.0
GROUPS = ("cold", "medium", "warm")
R0 = 4.658
REPLICATE_COUNT = 4

# full-data estimates of the reference analysis
REFERENCE_PARAMS = VarianceParams(
    amp_scale=0.072, amp_smoothness=7.21, amp_range=0.458, warp_scale=0.026, warp_range=0.083
)

# (peak hour, decrease %/h, total count over 16 samples, peak width in hours).
# Widths are chosen so the information-based standard error of the peak
# location is close to the published interval half-widths / 1.96.
_TEMPLATES = {
    "cold": (70.7, 2.10, 1950.0, 8.0),
    "medium": (43.8, 5.07, 1800.0, 16.0),
    "warm": (35.1, 8.94, 1700.0, 8.0),
}
# log-intensity gained between time 0 and the peak
_RISE = 4.5

# samples 7 and 13 stopped discharging after 48 h and 40 h
REFERENCE_TRUNCATIONS = {6: 48.0, 12: 40.0}


def _logcosh(x):
    return np.logaddexp(x, -x) - np.log(2.0)


def _tent(hours, centre, left, right, width):
    """Smoothed piecewise-linear log intensity: slope ``left`` before the peak, ``-right`` after."""
    a = 0.5 * (left + right)
    c = 0.5 * (right - left)
    # shift so the maximum sits at ``centre``
    apex = centre + width * np.arctanh(c / a)
    return -a * width * _logcosh((hours - apex) / width) - c * (hours - apex)


def _tent_params(peak, decrease, width):
    left = _RISE / peak

    def excess(right):
        drop = _tent(peak, peak, left, right, width) - _tent(HORIZON_HOURS, peak, left, right, width)
        return drop / (HORIZON_HOURS - peak) - decrease / 100.0

    return left, brentq(excess, 1e-6, 50.0 * left)


def _raw_template(group, hours, centre, decrease):
    peak, _, total, width = _TEMPLATES[group]
    left, right = _tent_params(peak, decrease, width)
    level = np.log(total / np.exp(_tent(SAMPLE_HOURS, centre, left, right, width)).sum())
    return level + _tent(np.asarray(hours, float), centre, left, right, width)


_GRID = np.linspace(0.0, 1.0, 1201)


def _project(values, basis):
    return np.linalg.lstsq(basis.design(_GRID), values, rcond=None)[0]


def _calibrate(group, basis):
    """Template centre and decrease for which the projected spline hits both targets."""
    peak, decrease, _, _ = _TEMPLATES[group]
    centre, dec = peak, decrease
    for _ in range(20):
        vals = basis.design(_GRID) @ _project(_raw_template(group, _GRID * HORIZON_HOURS, centre, dec), basis)
        i = np.argmax(vals)
        found = _GRID[i] * HORIZON_HOURS
        found_dec = 100.0 * (vals[i] - vals[-1]) / (HORIZON_HOURS - found)
        if abs(found - peak) < 0.05 and abs(found_dec - decrease) < 5e-4:
            break
        centre += peak - found
        dec += decrease - found_dec
    return centre, dec


def template_curve(group, hours, basis: SplineBasis = SplineBasis()):
    """Log-intensity template peaking at the group's peak hour with the target decrease."""
    return _raw_template(group, hours, *_calibrate(group, basis))


def reference_coefficients(basis: SplineBasis = SplineBasis()):
    """Spline coefficients of the three group templates (least squares on a dense grid)."""
    return {g: _project(template_curve(g, _GRID * HORIZON_HOURS, basis), basis) for g in GROUPS}


@dataclass
class Truth:
    coeffs: dict
    vp: VarianceParams
    w: list
    u: list


def simulate_curves(
    coeffs,
    vp: VarianceParams,
    r0=R0,
    replicate_count=REPLICATE_COUNT,
    n_per_group=5,
    hours=SAMPLE_HOURS,
    truncations=None,
    model=Model(),
    seed=None,
    amplitude=True,
):
    """Draw replicate counts from the latent curve model.

    Each measurement is ``replicate_count`` iid NB(r0) counts whose sum has
    mean ``exp(u)``. Returns ``(ReplicateTable, Truth)``.
    """
    rng = np.random.default_rng(seed)
    truncations = truncations or {}
    times = np.asarray(hours, float) / HORIZON_HOURS
    C = covariance_matrix(model.warp.anchors, _warp_kernel(vp))
    S = covariance_matrix(times, vp.amplitude_kernel)
    groups = list(coeffs)
    rows = []
    ws, us = [], []
    single = ResponseFamily("negative_binomial", r=r0)
    n = 0
    for g in groups:
        for _ in range(n_per_group):
            while True:
                w = C.cholesky @ rng.standard_normal(model.warp.m_w)
                try:
                    v = Warp(model.warp, w)(times)
                    break
                except InvalidWarpError:
                    continue
            x = S.cholesky @ rng.standard_normal(times.size) if amplitude else np.zeros(times.size)
            u = model.basis.design(v) @ coeffs[g] + x
            keep = hours < truncations.get(n, np.inf)
            eta = u - np.log(replicate_count)
            counts = single.sample(np.repeat(eta[:, None], replicate_count, axis=1), seed=rng)
            for k in np.flatnonzero(keep):
                rows.append((f"{n + 1}", g, float(hours[k]), counts[k].astype(int)))
            ws.append(w)
            us.append(u[keep])
            n += 1
    return ReplicateTable.from_rows(rows, groups), Truth(coeffs, vp, ws, us)


def _warp_kernel(vp):
    from .kernels import WARP_SMOOTHNESS, MaternKernel

    return MaternKernel(vp.warp_scale, WARP_SMOOTHNESS, vp.warp_range)


def reference_design(seed=7, model=Model(), truncate=True):
    """Replicate table, aggregated dataset and ground truth for the reference design.

    Uses the same random stream as ``pavglm synth --like-paper --seed``.
    """
    from .dispersion import aggregate

    from .seeding import stream

    coeffs = reference_coefficients(model.basis)
    table, truth = simulate_curves(
        coeffs,
        REFERENCE_PARAMS,
        truncations=REFERENCE_TRUNCATIONS if truncate else None,
        model=model,
        seed=stream(seed, "synth"),
    )
    dataset = aggregate(table, R0)
    return table, dataset, truth
