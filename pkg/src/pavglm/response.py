"""
Exponential-family observation models.

Each family is written as ``p(y | eta) = b(y) exp(eta * t(y) - A(eta, y))``
where ``t(y)`` is the canonical statistic (``y`` itself except for the
Gaussian family, where it is ``y / sigma2``). Only the negative binomial
cumulant depends on ``y``.
"""

import re
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, gammaln

KINDS = ("gaussian", "poisson", "negative_binomial", "binary")

# exp(eta) overflows float64 just above 709.78
_EXP_LIMIT = 700.0


class DomainError(ValueError):
    """Observation outside the sample space of a family."""


@dataclass(frozen=True)
class ResponseFamily:
    """Observation model with fixed hyperparameters.

    Parameters
    ----------
    kind : {'gaussian', 'poisson', 'negative_binomial', 'binary'}
    r : float, optional
        Negative binomial rate. ``Var[Y] = E[Y] + E[Y]**2 / r``.
    sigma2 : float, optional
        Known Gaussian variance.
    """

    kind: str
    r: Optional[float] = None
    sigma2: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}")
        if self.kind == "negative_binomial":
            if self.r is None or not (self.r > 0) or not np.isfinite(self.r):
                raise ValueError("negative binomial family needs a finite rate r > 0")
        if self.kind == "gaussian":
            if self.sigma2 is None or not (self.sigma2 > 0):
                raise ValueError("gaussian family needs sigma2 > 0")

    # -- validation -------------------------------------------------------

    def check(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise DomainError("observations must be finite")
        if self.kind in ("poisson", "negative_binomial"):
            if np.any(y < 0) or np.any(y != np.round(y)):
                raise DomainError(f"{self.kind} observations must be nonnegative integers")
        elif self.kind == "binary":
            if np.any((y != 0) & (y != 1)):
                raise DomainError("binary observations must be 0 or 1")
        return y

    def canonical(self, y):
        """Canonical statistic t(y) multiplying eta in the log-density."""
        y = self.check(y)
        if self.kind == "gaussian":
            return y / self.sigma2
        return y

    # -- cumulant and derivatives ----------------------------------------

    def a_value(self, eta, y=0.0):
        return self._a(np.asarray(eta, dtype=float), self.check(y))

    def a_prime(self, eta, y=0.0):
        return self._a1(np.asarray(eta, dtype=float), self.check(y))

    def a_double_prime(self, eta, y=0.0):
        return self._a2(np.asarray(eta, dtype=float), self.check(y))

    # Unchecked cores; callers guarantee y was validated (Curve does this once).

    def _a(self, eta, y):
        if self.kind == "gaussian":
            return eta**2 / (2.0 * self.sigma2)
        if self.kind == "poisson":
            return _guarded_exp(eta)
        if self.kind == "binary":
            return np.logaddexp(0.0, eta)
        return (self.r + y) * np.logaddexp(0.0, eta - np.log(self.r))

    def _a1(self, eta, y):
        if self.kind == "gaussian":
            return eta / self.sigma2
        if self.kind == "poisson":
            return _guarded_exp(eta)
        if self.kind == "binary":
            return expit(eta)
        return (self.r + y) * expit(eta - np.log(self.r))

    def _a2(self, eta, y):
        if self.kind == "gaussian":
            return np.full(np.broadcast(eta, y).shape, 1.0 / self.sigma2)
        if self.kind == "poisson":
            return _guarded_exp(eta)
        if self.kind == "binary":
            p = expit(eta)
            return p * (1.0 - p)
        p = expit(eta - np.log(self.r))
        return (self.r + y) * p * (1.0 - p)

    def log_b(self, y):
        y = self.check(y)
        if self.kind == "gaussian":
            return -0.5 * y**2 / self.sigma2 - 0.5 * np.log(2.0 * np.pi * self.sigma2)
        if self.kind == "poisson":
            return -gammaln(y + 1.0)
        if self.kind == "binary":
            return np.zeros_like(y)
        r = self.r
        return gammaln(y + r) - gammaln(r) - gammaln(y + 1.0) - y * np.log(r)

    def log_density(self, eta, y):
        return eta * self.canonical(y) - self.a_value(eta, y) + self.log_b(y)

    # -- moments ----------------------------------------------------------

    def conditional_mean(self, eta):
        """E[Y | eta] on the observation scale."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == "gaussian":
            return eta
        if self.kind == "binary":
            return expit(eta)
        return _guarded_exp(eta)

    def intensity(self, eta):
        """exp(eta), the quantity plotted as discharge intensity."""
        return _guarded_exp(np.asarray(eta, dtype=float))

    def variance(self, eta):
        mu = self.conditional_mean(eta)
        if self.kind == "gaussian":
            return np.full(np.shape(mu), self.sigma2)
        if self.kind == "poisson":
            return mu
        if self.kind == "binary":
            return mu * (1.0 - mu)
        return mu + mu**2 / self.r

    def sample(self, eta, seed=None, size=None):
        """Draw from p(. | eta). ``seed`` may be an int or a Generator."""
        rng = np.random.default_rng(seed)
        eta = np.asarray(eta, dtype=float)
        if size is None:
            size = eta.shape
        if self.kind == "gaussian":
            return rng.normal(eta, np.sqrt(self.sigma2), size=size)
        if self.kind == "binary":
            return rng.binomial(1, expit(eta), size=size).astype(float)
        mu = self.conditional_mean(eta)
        if self.kind == "poisson":
            return rng.poisson(mu, size=size).astype(float)
        return rng.negative_binomial(self.r, self.r / (self.r + mu), size=size).astype(float)

    def __str__(self):
        if self.kind == "gaussian":
            return f"gaussian(sigma2={self.sigma2!r})"
        if self.kind == "negative_binomial":
            return f"negbin(r={self.r!r})"
        return self.kind


def _guarded_exp(eta):
    eta = np.asarray(eta, dtype=float)
    if np.any(eta > _EXP_LIMIT):
        warnings.warn("linear predictor above 700; cumulant set to +inf", RuntimeWarning, stacklevel=3)
        with np.errstate(over="ignore"):
            return np.where(eta > _EXP_LIMIT, np.inf, np.exp(np.minimum(eta, _EXP_LIMIT)))
    return np.exp(eta)


# Functional aliases mirroring the method names.


def a_value(family, eta, y=0.0):
    return family.a_value(eta, y)


def a_prime(family, eta, y=0.0):
    return family.a_prime(eta, y)


def a_double_prime(family, eta, y=0.0):
    return family.a_double_prime(eta, y)


def log_density(family, eta, y):
    return family.log_density(eta, y)


def sample(family, eta, seed=None, size=None):
    return family.sample(eta, seed=seed, size=size)


_SPEC = re.compile(r"^\s*(\w+)\s*(?:\(\s*(.*?)\s*\))?\s*$")


def parse_family(text: str) -> ResponseFamily:
    """Parse ``gaussian(sigma2=1)``, ``poisson``, ``negbin(r=18.63)`` or ``binary``."""
    m = _SPEC.match(text)
    if m is None:
        raise ValueError(f"cannot parse family spec {text!r}")
    name, args = m.group(1).lower(), m.group(2)
    kwargs = {}
    if args:
        for part in args.split(","):
            key, _, val = part.partition("=")
            kwargs[key.strip()] = float(val)
    if name in ("negbin", "nb", "negative_binomial"):
        return ResponseFamily("negative_binomial", r=kwargs.get("r"))
    if name in ("gaussian", "normal"):
        return ResponseFamily("gaussian", sigma2=kwargs.get("sigma2"))
    if name in ("poisson", "binary"):
        return ResponseFamily(name)
    raise ValueError(f"unknown family {name!r}")
