"""
A tour of the model pieces
==========================

Builds one latent curve by hand: a group mean through the spline basis,
a random monotone warp, Gaussian-process amplitude noise and negative
binomial counts on top. Then recovers the latent curve from the counts
with the inner Newton solve and the joint warp prediction.

Run from the repository root::

    python3 notebooks/01_model_tour.py
"""

import numpy as np

from pavglm import Curve, MaternKernel, ResponseFamily, VarianceParams, Warp, WarpSpec, covariance_matrix
from pavglm.basis import SplineBasis
from pavglm.estimation import inner_max_u, predict_latents

rng = np.random.default_rng(0)

###############################################################################
# Response family
# ---------------
# Counts are NB with rate r; the link value eta is the log of the mean, and
# the cumulant A(eta, y) depends on y for this family.
nb = ResponseFamily("negative_binomial", r=18.632)
eta = np.log(40.0)
print("mean, variance at eta = log 40:", nb.conditional_mean(eta), nb.variance(eta))
print("A', A'' at y = 35:", nb.a_prime(eta, 35.0), nb.a_double_prime(eta, 35.0))

###############################################################################
# Group mean and warp
# -------------------
# Eleven cardinal spline coefficients are the curve's values at the knots.
basis = SplineBasis(11)
knots = np.linspace(0, 1, 11)
coeffs = 2.0 + 2.5 * np.exp(-((knots - 0.4) ** 2) / 0.03)

spec = WarpSpec(7)
vp = VarianceParams(amp_scale=0.15, amp_smoothness=2.0, amp_range=0.2, warp_scale=0.026, warp_range=0.1)
C = covariance_matrix(spec.anchors, MaternKernel(vp.warp_scale, 1.5, vp.warp_range))
w_true = C.cholesky @ rng.standard_normal(7)
warp = Warp(spec, w_true)

t = np.arange(16) * 8 / 120.0
print("warped sample times (h):", np.round(warp(t) * 120, 1))

###############################################################################
# Amplitude noise and counts
# --------------------------
S = covariance_matrix(t, vp.amplitude_kernel)
u_true = basis.design(warp(t)) @ coeffs + S.cholesky @ rng.standard_normal(t.size)
y = nb.sample(u_true, seed=rng)
curve = Curve("demo", "g", t, y, family=nb)
print("counts:", y.astype(int))

###############################################################################
# Recovering the latent curve
# ---------------------------
# With the warp known, the posterior mode of u is a convex problem.
u_known = inner_max_u(coeffs, w_true, curve, vp)
# Without it, warp and latent curve are predicted jointly.
u_hat, w_hat = predict_latents(coeffs, curve, vp)

print("max |u - u_true|, warp known:   %.3f" % np.abs(u_known - u_true).max())
print("max |u - u_true|, warp predicted: %.3f" % np.abs(u_hat - u_true).max())
print("warp coefficients true:     ", np.round(w_true, 3))
print("warp coefficients predicted:", np.round(w_hat, 3))
