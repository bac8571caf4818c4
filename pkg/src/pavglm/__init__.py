"""
Phase and amplitude variation of population mean curves observed through
exponential-family responses.

The latent log-intensity of curve ``n`` is ``theta_{group}(v_n(t)) + x_n(t)``
with a monotone random warp ``v_n`` and a Gaussian-process amplitude term
``x_n``; counts are negative binomial (or Poisson, binary, Gaussian) given it.
"""

from .basis import SplineBasis, design_row, theta_eval
from .dispersion import ReplicateTable, aggregate, estimate_common_rate, mean_variance_table
from .estimation import FitConfig, FittedModel, fit, inner_max_u, laplace_marginal_nll, linearize, predict_latents, update_coeffs
from .inference import (
    confidence_band,
    credibility_q,
    information_matrix,
    peak_stats,
    sample_coefficients,
    simulate_trajectories,
    threshold_summary,
)
from .kernels import IllConditionedError, MaternKernel, covariance_matrix, matern
from .model import Curve, Dataset, LatentState, Model, VarianceParams, gamma_vector, posterior_nll
from .response import DomainError, ResponseFamily, parse_family
from .robustness import leave_one_out
from .warp import InvalidWarpError, Warp, WarpSpec, build_warp, warp_jacobian

__version__ = "0.1.0"
