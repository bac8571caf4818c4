"""
Full analysis on the reference design
=====================================

Simulates the reference design (three temperature groups, five curves
each, counts every 8 h for 120 h, four replicate counts per sample), then
runs the whole analysis through the library API:

1. mean-variance table and the common NB rate from the replicates;
2. aggregation to one count per curve and time;
3. the fit (group means, warps, variance parameters);
4. peak table and credibility q-values from the information matrix;
5. threshold crossings of simulated trajectories.

The CLI does the same with ``pavglm synth --like-paper`` followed by
``fit``, ``infer`` and ``simulate``. Takes about a minute.

Run from the repository root::

    python3 notebooks/02_reference_pipeline.py
"""

import numpy as np

from pavglm import inference as inf
from pavglm.dispersion import aggregate, estimate_common_rate, mean_variance_table
from pavglm.estimation import fit
from pavglm.seeding import stream
from pavglm.synth import simulate_curves, reference_coefficients, REFERENCE_PARAMS, REFERENCE_TRUNCATIONS, R0

SEED = 7

###############################################################################
# Data
# ----
coeffs = reference_coefficients()
table, truth = simulate_curves(coeffs, REFERENCE_PARAMS, R0, truncations=REFERENCE_TRUNCATIONS, seed=stream(SEED, "synth"))
print(f"{len(table)} (curve, time) cells, {len(set(table.curve_ids))} curves")

###############################################################################
# Dispersion
# ----------
# Replicate variances grow faster than the means: a Poisson model would be
# too narrow. The rate is estimated once, before the curve model.
mv = mean_variance_table(table)
slope = mv[:, 0] @ mv[:, 1] / (mv[:, 0] @ mv[:, 0])
r0 = estimate_common_rate(table)
print(f"variance/mean slope {slope:.1f}; common rate r0 = {r0:.3f} (generated with {R0})")

# sums of four NB(r0) counts are NB(4 r0)
dataset = aggregate(table, r0)
print("aggregated family:", dataset.family)

###############################################################################
# Fit
# ---
fitted = fit(dataset)
print("converged:", fitted.converged, "after", fitted.iterations, "outer iterations")
for name, value in fitted.vp.as_dict().items():
    print(f"  {name:15s} {value:.4f}   (truth {getattr(REFERENCE_PARAMS, name):.4f})")

###############################################################################
# Peaks and credibility
# ---------------------
results = [inf.infer_group(fitted, g, 1000, stream(SEED, "infer", g)) for g in dataset.groups]
print("\nstatistic        group     2.5%   estimate  97.5%")
for g, stat, lo, est, hi in inf.peak_table(results):
    print(f"{stat:16s} {g:8s} {lo:7.2f} {est:8.2f} {hi:7.2f}")
print()
for hypothesis, q in inf.q_table(results):
    print(f"q[{hypothesis}] = {q:.3f}")

###############################################################################
# Threshold crossings
# -------------------
# For each simulated trajectory: first time above a link-scale threshold and
# total time spent above it.
for g in dataset.groups:
    traj = inf.simulate_trajectories(fitted, g, 500, stream(SEED, "sim", g))
    ts = inf.threshold_summary(traj, [3.0, 4.0])
    print(
        f"{g:7s} peak-time s.d. {np.std(traj.peak_times()):.1f} h; "
        f"median hours above 3.0: {np.nanmedian(ts.duration[:, 0]):.0f}, above 4.0: {np.nanmedian(ts.duration[:, 1]):.0f}"
    )
