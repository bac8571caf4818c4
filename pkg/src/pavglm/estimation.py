"""
Twofold Laplace estimation.

(a) For fixed variance parameters, spline coefficients and the posterior
    modes ``(u0, w0)`` of every curve are found by minimizing the joint
    posterior negative log-likelihood.
(b) With the warps linearized at ``w0``, ``u`` is approximately
    ``N(r, V)`` with ``r = gamma(w0) - J w0`` and ``V = J C J' + S``, and the
    variance parameters minimize the Laplace approximation of the marginal
    likelihood of that linearized model.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize

from .kernels import MAX_SMOOTHNESS, CovarianceMatrix, IllConditionedError, factorize
from .model import (
    CovarianceCache,
    Curve,
    Dataset,
    LatentState,
    Model,
    VarianceParams,
    data_term,
    gamma_and_jacobian,
    initial_latent,
)
from .warp import InvalidWarpError

log = logging.getLogger(__name__)

DEFAULT_START = VarianceParams(
    amp_scale=0.1, amp_smoothness=2.0, amp_range=0.3, warp_scale=0.03, warp_range=0.1
)

# log-space box for the variance-parameter search
LOG_BOUNDS = {
    "amp_scale": (np.log(1e-4), np.log(5.0)),
    "amp_smoothness": (np.log(0.1), np.log(MAX_SMOOTHNESS)),
    "amp_range": (np.log(1e-3), np.log(5.0)),
    "warp_scale": (np.log(1e-4), np.log(0.2)),
    "warp_range": (np.log(1e-3), np.log(5.0)),
}


class ConvergenceError(RuntimeError):
    pass


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass
class FitConfig:
    max_outer: int = 20
    inner_tol: float = 1e-9
    max_inner: int = 100
    warp_tol: float = 1e-7
    max_warp_iter: int = 200
    outer_rtol: float = 1e-6
    coef_cycles: int = 25
    coef_rtol: float = 1e-10
    variance_budget: int = 200
    laplace_convention: str = "standard"
    initial: VarianceParams = DEFAULT_START
    fixed: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.laplace_convention not in ("standard", "paper"):
            raise ValueError("laplace_convention must be 'standard' or 'paper'")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration caps must be >= 1")
        if min(self.inner_tol, self.warp_tol, self.outer_rtol) <= 0:
            raise ValueError("tolerances must be positive")
        unknown = set(self.fixed) - set(VarianceParams.NAMES)
        if unknown:
            raise ValueError(f"unknown fixed parameters {sorted(unknown)}")

    @property
    def curvature_factor(self):
        return 2.0 if self.laplace_convention == "paper" else 1.0


@dataclass
class FittedModel:
    dataset: Dataset
    model: Model
    coeffs: dict
    vp: VarianceParams
    latents: LatentState
    objective: float
    posterior: float
    converged: bool
    iterations: int
    trace: list = field(default_factory=list)
    kkt: float = np.nan
    config: Optional[FitConfig] = None

    @property
    def dispersion(self):
        fam = self.dataset.family
        return fam.r if fam.kind == "negative_binomial" else None

    def coeffs_for(self, curve: Curve):
        return self.coeffs[curve.group]


# -- inner convex problem ---------------------------------------------------


def _chol_lower(cov):
    if isinstance(cov, CovarianceMatrix):
        return cov.cholesky
    return np.asarray(cov)


def newton_mode(mean, chol, curve: Curve, u_start=None, tol=1e-9, max_iter=100):
    """Minimize ``sum(A(u) - t u) + 1/2 (u - mean)' K^{-1} (u - mean)`` with ``K = chol chol'``.

    Newton iterations run in whitened coordinates ``u = mean + chol z``,
    where the Hessian ``chol' D chol + I`` has eigenvalues >= 1.
    """
    fam = curve.family
    y = curve.y
    t = curve.t
    L = chol
    m = mean.size
    z = np.zeros(m) if u_start is None else solve_triangular(L, u_start - mean, lower=True)

    def phi(z):
        u = mean + L @ z
        return np.sum(fam._a(u, y) - u * t) + 0.5 * z @ z

    f = phi(z)
    eye = np.eye(m)
    for it in range(max_iter):
        u = mean + L @ z
        g = L.T @ (fam._a1(u, y) - t) + z
        gmax = np.max(np.abs(g))
        d = fam._a2(u, y)
        H = L.T @ (d[:, None] * L) + eye
        step = -cho_solve(cho_factor(H, lower=True), g)
        slope = g @ step
        # Newton decrement below the resolution of phi: no further progress possible
        stalled = -slope <= 8 * np.finfo(float).eps * max(1.0, abs(f))
        if gmax < tol or stalled:
            # polishing steps judged by the gradient, since phi no longer resolves
            # the progress; quadratic convergence takes g to rounding level
            for _ in range(2):
                z_new = z + step
                u = mean + L @ z_new
                g_new = L.T @ (fam._a1(u, y) - t) + z_new
                if np.max(np.abs(g_new)) >= gmax:
                    break
                z, g, gmax = z_new, g_new, np.max(np.abs(g_new))
                d = fam._a2(u, y)
                H = L.T @ (d[:, None] * L) + eye
                step = -cho_solve(cho_factor(H, lower=True), g)
            return mean + L @ z, it
        s = 1.0
        while True:
            f_new = phi(z + s * step)
            if f_new <= f + 1e-4 * s * slope:
                break
            s *= 0.5
            if s < 1e-12:
                raise ConvergenceError(f"curve {curve.id}: line search failed, |grad|={gmax:.3g}")
        z = z + s * step
        f = f_new
    raise ConvergenceError(f"curve {curve.id}: Newton did not converge in {max_iter} iterations")


def inner_max_u(coeffs, w, curve: Curve, vp: VarianceParams, cfg: FitConfig = None, model=Model(), u_start=None, cache=None):
    """Posterior mode of ``u`` for fixed warp coefficients."""
    cfg = cfg or FitConfig()
    cache = cache or CovarianceCache(model, vp)
    gamma, _, _ = gamma_and_jacobian(coeffs, model, w, curve)
    S = cache.amplitude(curve.times)
    u, _ = newton_mode(gamma, S.cholesky, curve, u_start, cfg.inner_tol, cfg.max_inner)
    return u


# -- joint prediction of (u, w) ---------------------------------------------


class _CurveProfile:
    """Profiled posterior F(w) = min_u L(u, w) for one curve, in whitened warp coordinates."""

    def __init__(self, coeffs, curve, model, cache, cfg):
        self.coeffs = coeffs
        self.curve = curve
        self.model = model
        self.cfg = cfg
        self.S = cache.amplitude(curve.times)
        self.Ls = self.S.cholesky
        self.Lc = cache.warp().cholesky
        self.t = curve.t

    def evaluate(self, omega, u_start):
        w = self.Lc @ omega
        try:
            gamma, J, _ = gamma_and_jacobian(self.coeffs, self.model, w, self.curve)
        except InvalidWarpError:
            return np.inf, None
        u, _ = newton_mode(gamma, self.Ls, self.curve, u_start, self.cfg.inner_tol, self.cfg.max_inner)
        z = solve_triangular(self.Ls, u - gamma, lower=True)
        F = data_term(self.curve, u) + 0.5 * z @ z + 0.5 * omega @ omega
        return F, (w, u, gamma, J)

    def gradient_and_gn(self, omega, state):
        _, u, _, J = state
        fam = self.curve.family
        resid = fam._a1(u, self.curve.y) - self.t
        JL = J @ self.Lc
        g = JL.T @ resid + omega
        sd = np.sqrt(fam._a2(u, self.curve.y))
        M = np.eye(u.size) + sd[:, None] * self.S.matrix * sd[None, :]
        X = sd[:, None] * JL
        H = X.T @ cho_solve(cho_factor(M, lower=True), X) + np.eye(omega.size)
        return g, H


def predict_curve(coeffs, curve, vp, cfg=None, model=Model(), w_start=None, u_start=None, cache=None):
    """Joint posterior mode ``(u0, w0)`` of one curve.

    Warp coefficients are updated by damped Gauss-Newton steps on the
    profiled objective; the gradient uses the identity
    ``S^{-1}(u - gamma) = t - A'(u)`` at the inner optimum.

    Returns ``(u0, w0, info)``.
    """
    cfg = cfg or FitConfig()
    cache = cache or CovarianceCache(model, vp)
    prof = _CurveProfile(coeffs, curve, model, cache, cfg)
    m_w = model.warp.m_w
    omega = np.zeros(m_w) if w_start is None else solve_triangular(prof.Lc, np.asarray(w_start, float), lower=True)
    F, state = prof.evaluate(omega, u_start)
    if not np.isfinite(F):
        omega = np.zeros(m_w)
        F, state = prof.evaluate(omega, None)
    converged = False
    gmax = np.inf
    stalls = 0
    for it in range(cfg.max_warp_iter):
        g, H = prof.gradient_and_gn(omega, state)
        gmax = np.max(np.abs(g))
        if gmax < cfg.warp_tol:
            converged = True
            break
        step = -np.linalg.solve(H, g)
        slope = g @ step
        if -slope <= 8 * np.finfo(float).eps * max(1.0, abs(F)):
            converged = True
            break
        s = 1.0
        accepted = False
        while s > 1e-10:
            F_new, st_new = prof.evaluate(omega + s * step, state[1])
            if F_new <= F + 1e-4 * s * slope:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            # Gauss-Newton direction exhausted; fall back to steepest descent
            step = -g
            slope = -g @ g
            s = 1.0 / max(1.0, np.linalg.norm(g))
            while s > 1e-10:
                F_new, st_new = prof.evaluate(omega + s * step, state[1])
                if F_new <= F + 1e-4 * s * slope:
                    accepted = True
                    break
                s *= 0.5
        if not accepted:
            break
        # decrease at rounding level of F: the gradient is as small as the
        # inner solve can resolve, so stop instead of creeping
        stalls = stalls + 1 if F - F_new <= 64 * np.finfo(float).eps * max(1.0, abs(F)) else 0
        omega = omega + s * step
        F, state = F_new, st_new
        if stalls >= 2:
            break
    w, u = state[0], state[1]
    return u, w, {"objective": F, "grad": gmax, "converged": converged or gmax < 1e3 * cfg.warp_tol, "iterations": it}


def predict_latents(coeffs, curve, vp, cfg=None, model=Model(), **kwargs):
    """Joint posterior mode ``(u0, w0)`` of one curve."""
    u, w, _ = predict_curve(coeffs, curve, vp, cfg, model, **kwargs)
    return u, w


def predict_all(dataset: Dataset, coeffs: dict, vp, cfg, model, latents: Optional[LatentState] = None, cache=None):
    cache = cache or CovarianceCache(model, vp)
    us, ws, total = [], [], 0.0
    worst = 0.0
    for i, curve in enumerate(dataset.curves):
        if curve.m == 0:
            us.append(np.zeros(0))
            ws.append(np.zeros(model.warp.m_w))
            continue
        w0 = None if latents is None else latents.w[i]
        u0 = None if latents is None else latents.u[i]
        u, w, info = predict_curve(coeffs[curve.group], curve, vp, cfg, model, w0, u0, cache)
        us.append(u)
        ws.append(w)
        total += info["objective"]
        worst = max(worst, info["grad"])
    return LatentState(us, ws), total, worst


# -- fixed effects ----------------------------------------------------------


def update_coeffs(dataset: Dataset, latents: LatentState, vp: VarianceParams, model=Model(), cache=None, ridge=1e-8):
    """Generalized least squares fit of spline coefficients to the predicted latents.

    For each group solves ``min_c sum_n (B_n c - u_n)' S_n^{-1} (B_n c - u_n)``
    where ``B_n`` is the basis at the warped times of curve ``n``.
    """
    cache = cache or CovarianceCache(model, vp)
    from .warp import Warp

    out = {}
    for g in dataset.groups:
        rows, rhs = [], []
        for i, curve in enumerate(dataset.curves):
            if curve.group != g or curve.m == 0:
                continue
            v = Warp(model.warp, latents.w[i])(curve.times)
            B = model.basis.design(v)
            L = cache.amplitude(curve.times).cholesky
            rows.append(solve_triangular(L, B, lower=True))
            rhs.append(solve_triangular(L, latents.u[i], lower=True))
        if not rows:
            raise RankDeficientError(f"group {g!r} has no observations")
        X = np.vstack(rows)
        z = np.concatenate(rhs)
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise RankDeficientError(f"design for group {g!r} is rank deficient")
        G = X.T @ X
        G[np.diag_indices_from(G)] += ridge
        out[g] = cho_solve(cho_factor(G), X.T @ z)
    return out


def _coefficient_newton(dataset, coeffs, latents, model, cache, ridge=1e-8):
    """Gauss-Newton step on the profiled posterior in the spline coefficients."""
    new = {}
    for g in dataset.groups:
        grad = 0.0
        H = 0.0
        for i, curve in enumerate(dataset.curves):
            if curve.group != g or curve.m == 0:
                continue
            _, _, B = gamma_and_jacobian(coeffs[g], model, latents.w[i], curve)
            u = latents.u[i]
            fam = curve.family
            grad = grad + B.T @ (fam._a1(u, curve.y) - curve.t)
            sd = np.sqrt(fam._a2(u, curve.y))
            S = cache.amplitude(curve.times).matrix
            M = np.eye(u.size) + sd[:, None] * S * sd[None, :]
            X = sd[:, None] * B
            H = H + X.T @ cho_solve(cho_factor(M, lower=True), X)
        H = H + ridge * np.eye(len(coeffs[g]))
        new[g] = coeffs[g] - np.linalg.solve(H, grad)
    return new


def _step_a(dataset, coeffs, latents, vp, cfg, model):
    """Alternate coefficient updates and latent prediction until the joint posterior settles."""
    cache = CovarianceCache(model, vp)
    latents, post, _ = predict_all(dataset, coeffs, vp, cfg, model, latents, cache)
    for _ in range(cfg.coef_cycles):
        full = _coefficient_newton(dataset, coeffs, latents, model, cache)
        s = 1.0
        while True:
            trial = {g: coeffs[g] + s * (full[g] - coeffs[g]) for g in coeffs}
            lat_new, post_new, _ = predict_all(dataset, trial, vp, cfg, model, latents, cache)
            if post_new < post or s < 1e-3:
                break
            s *= 0.5
        if not post_new < post:
            break
        done = (post - post_new) <= cfg.coef_rtol * max(1.0, abs(post))
        coeffs, latents, post = trial, lat_new, post_new
        if done:
            break
    return coeffs, latents, post


# -- linearization and Laplace approximation --------------------------------


def linearize(coeffs, curve: Curve, w0, vp: VarianceParams, model=Model(), cache=None):
    """Gaussian approximation ``u ~ N(r, V)`` from a first-order expansion of the warp at ``w0``."""
    cache = cache or CovarianceCache(model, vp)
    w0 = np.asarray(w0, dtype=float)
    gamma, J, _ = gamma_and_jacobian(coeffs, model, w0, curve)
    C = cache.warp()
    S = cache.amplitude(curve.times)
    r = gamma - J @ w0
    V = J @ C.matrix @ J.T + S.matrix
    V = 0.5 * (V + V.T)
    return r, V


def _laplace_curve(curve, r, V, base_var, u_start, cfg, check=True):
    chol, jitter = factorize(V, base_var)
    L = np.tril(chol[0])
    u_hat, _ = newton_mode(r, L, curve, u_start, cfg.inner_tol, cfg.max_inner)
    fam = curve.family
    d = fam._a2(u_hat, curve.y)
    sd = np.sqrt(cfg.curvature_factor * d)
    Vj = V + jitter * np.eye(V.shape[0])
    M = np.eye(d.size) + sd[:, None] * Vj * sd[None, :]
    logdet = 2.0 * np.sum(np.log(np.diag(np.linalg.cholesky(M))))
    # log|Sigma~| + log|V| = log|I + c D^1/2 V D^1/2| >= 0 since A'' > 0
    if check and logdet < -1e-10:
        raise AssertionError("Laplace determinant bound |Sigma~| > |V|^-1 violated")
    z = solve_triangular(L, u_hat - r, lower=True)
    value = logdet + z @ z + 2.0 * data_term(curve, u_hat)
    return value, u_hat


def laplace_marginal_nll(dataset: Dataset, coeffs: dict, vp: VarianceParams, cfg: FitConfig = None, model=Model(), latents: Optional[LatentState] = None):
    """Approximate -2 log marginal likelihood, up to a parameter-free constant.

    The warps are linearized at ``latents.w`` (predicted jointly if not
    given) and the Laplace approximation is taken at the mode of the
    linearized model, which coincides with the joint posterior mode ``u0``
    when ``w0`` is the joint mode.
    """
    cfg = cfg or FitConfig()
    cache = CovarianceCache(model, vp)
    if latents is None:
        latents, _, _ = predict_all(dataset, coeffs, vp, cfg, model, None, cache)
    total = 0.0
    for i, curve in enumerate(dataset.curves):
        if curve.m == 0:
            continue
        r, V = linearize(coeffs[curve.group], curve, latents.w[i], vp, model, cache)
        base = max(vp.amp_scale**2, float(np.max(np.diag(V))))
        value, _ = _laplace_curve(curve, r, V, base, latents.u[i], cfg)
        total += value
    return total


class _VarianceObjective:
    """Laplace objective as a function of log variance parameters, warps held at ``w0``."""

    def __init__(self, dataset, coeffs, latents, vp0, cfg, model):
        self.dataset = dataset
        self.cfg = cfg
        self.model = model
        self.latents = latents
        self.vp0 = vp0
        self.free = [n for n in VarianceParams.NAMES if n not in cfg.fixed]
        self.pre = []
        for i, curve in enumerate(dataset.curves):
            if curve.m == 0:
                continue
            w0 = latents.w[i]
            gamma, J, _ = gamma_and_jacobian(coeffs[curve.group], model, w0, curve)
            self.pre.append((curve, gamma - J @ w0, J, latents.u[i]))
        self.evaluations = 0

    def params(self, x):
        values = self.vp0.as_dict()
        for name, xi in zip(self.free, x):
            values[name] = float(np.exp(xi))
        values["amp_smoothness"] = min(values["amp_smoothness"], MAX_SMOOTHNESS)
        return VarianceParams(**values)

    def __call__(self, x):
        self.evaluations += 1
        try:
            vp = self.params(x)
            cache = CovarianceCache(self.model, vp)
            C = cache.warp().matrix
            total = 0.0
            for curve, r, J, u0 in self.pre:
                S = cache.amplitude(curve.times)
                V = J @ C @ J.T + S.matrix
                V = 0.5 * (V + V.T)
                base = max(vp.amp_scale**2, float(np.max(np.diag(V))))
                value, _ = _laplace_curve(curve, r, V, base, u0, self.cfg)
                total += value
            return total
        except (IllConditionedError, ConvergenceError, np.linalg.LinAlgError, ValueError):
            return np.inf


def _step_b(dataset, coeffs, latents, vp, cfg, model):
    obj = _VarianceObjective(dataset, coeffs, latents, vp, cfg, model)
    if not obj.free:
        return vp, obj(np.zeros(0))
    x0 = np.array([np.log(getattr(vp, n)) for n in obj.free])
    bounds = [LOG_BOUNDS[n] for n in obj.free]
    x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])
    k = x0.size
    simplex = np.vstack([x0] + [x0 + 0.3 * e * (1 if x0[j] + 0.3 < bounds[j][1] else -1) for j, e in enumerate(np.eye(k))])
    f0 = obj(x0)
    res = minimize(
        obj,
        x0,
        method="Nelder-Mead",
        bounds=bounds,
        options={"maxfev": cfg.variance_budget, "initial_simplex": simplex, "xatol": 1e-4, "fatol": 1e-7},
    )
    if not (res.fun < f0):
        return vp, f0
    return obj.params(res.x), float(res.fun)


# -- outer loop -------------------------------------------------------------


def _initial_coeffs(dataset, vp, model, ridge=1e-6):
    """Pooled least squares of the linked observations on unwarped times.

    Ordinary rather than generalized least squares: the starting latents
    carry observation noise that the smooth amplitude covariance does not
    describe, and whitening by it would amplify that noise.
    """
    latents = LatentState(
        [initial_latent(c) if c.m else np.zeros(0) for c in dataset.curves],
        [np.zeros(model.warp.m_w) for _ in dataset.curves],
    )
    coeffs = {}
    for g in dataset.groups:
        idx = [i for i, c in enumerate(dataset.curves) if c.group == g and c.m]
        if not idx:
            raise RankDeficientError(f"group {g!r} has no observations")
        X = np.vstack([model.basis.design(dataset.curves[i].times) for i in idx])
        z = np.concatenate([latents.u[i] for i in idx])
        G = X.T @ X + ridge * np.eye(X.shape[1])
        coeffs[g] = np.linalg.solve(G, X.T @ z)
    return coeffs, latents


def fit(dataset: Dataset, cfg: FitConfig = None, model=Model(), start: Optional[FittedModel] = None) -> FittedModel:
    """Alternate (a) coefficient/latent updates and (b) variance-parameter search.

    ``start`` warm-starts coefficients, variance parameters and latents from
    a previous fit on a dataset with the same curve order (curves missing
    from ``dataset`` are matched by id).
    """
    cfg = cfg or FitConfig()
    if start is not None:
        vp = start.vp
        coeffs = {g: np.array(c) for g, c in start.coeffs.items() if g in dataset.groups}
        by_id = {c.id: i for i, c in enumerate(start.dataset.curves)}
        idx = [by_id.get(c.id) for c in dataset.curves]
        if all(i is not None for i in idx):
            latents = LatentState([np.array(start.latents.u[i]) for i in idx], [np.array(start.latents.w[i]) for i in idx])
        else:
            _, latents = _initial_coeffs(dataset, vp, model)
    else:
        vp = cfg.initial
        coeffs, latents = _initial_coeffs(dataset, vp, model)

    trace = []
    best = None
    converged = False
    it = 0
    for it in range(1, cfg.max_outer + 1):
        coeffs, latents, post = _step_a(dataset, coeffs, latents, vp, cfg, model)
        value = laplace_marginal_nll(dataset, coeffs, vp, cfg, model, latents)
        log.info("outer %d: laplace %.6f posterior %.6f %s", it, value, post, vp.as_dict())
        if best is not None and value > best[0]:
            log.info("outer %d rejected (objective increased)", it)
            converged = value - best[0] <= 10 * cfg.outer_rtol * max(1.0, abs(best[0]))
            break
        trace.append(value)
        previous = best
        best = (value, coeffs, latents.copy(), vp, post)
        if previous is not None and abs(previous[0] - value) <= cfg.outer_rtol * max(1.0, abs(value)):
            converged = True
            break
        new_vp, _ = _step_b(dataset, coeffs, latents, vp, cfg, model)
        if new_vp == vp:
            converged = True
            break
        vp = new_vp

    value, coeffs, latents, vp, post = best
    kkt = _kkt_residual(dataset, coeffs, latents, vp, model)
    return FittedModel(dataset, model, coeffs, vp, latents, value, post, converged, it, trace, kkt, cfg)


def _kkt_residual(dataset, coeffs, latents, vp, model):
    """Largest whitened u-gradient of the joint posterior at the reported latents."""
    cache = CovarianceCache(model, vp)
    worst = 0.0
    for i, curve in enumerate(dataset.curves):
        if curve.m == 0:
            continue
        gamma, _, _ = gamma_and_jacobian(coeffs[curve.group], model, latents.w[i], curve)
        L = cache.amplitude(curve.times).cholesky
        fam = curve.family
        u = latents.u[i]
        g = L.T @ (fam._a1(u, curve.y) - curve.t) + solve_triangular(L, u - gamma, lower=True)
        worst = max(worst, float(np.max(np.abs(g))))
    return worst
