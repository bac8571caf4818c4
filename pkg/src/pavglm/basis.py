"""Natural cubic spline basis on [0, 1] with equidistant knots.

The basis is cardinal: coefficient ``c_i`` is the value of the spline at knot
``i``. This spans exactly the natural cubic splines on the knot set, so
constants and linear functions are reproduced exactly. Outside [0, 1] every
basis function continues linearly (second derivative is zero at the ends).
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded


@dataclass(frozen=True)
class SplineBasis:
    n_basis: int = 11

    def __post_init__(self):
        if self.n_basis < 4:
            raise ValueError("natural spline basis needs n_basis >= 4")

    @property
    def knots(self):
        return np.linspace(0.0, 1.0, self.n_basis)

    @property
    def _second_derivative_map(self):
        # cached per instance via __dict__ (frozen dataclass)
        cache = self.__dict__.get("_q")
        if cache is None:
            cache = _natural_q(self.knots)
            object.__setattr__(self, "_q", cache)
        return cache

    def design(self, t):
        """Design matrix, one row per time."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = self.knots
        Q = self._second_derivative_map
        K = x.size
        B = np.empty((t.size, K))
        lo, hi = t < 0.0, t > 1.0
        mid = ~(lo | hi)
        if np.any(mid):
            B[mid] = self._inside(t[mid], x, Q)
        if np.any(lo):
            B[lo] = self._inside(np.zeros(1), x, Q) + t[lo][:, None] * self._inside_d(np.zeros(1), x, Q)
        if np.any(hi):
            B[hi] = self._inside(np.ones(1), x, Q) + (t[hi] - 1.0)[:, None] * self._inside_d(np.ones(1), x, Q)
        return B

    def design_derivative(self, t):
        """Derivative of each basis function in t, one row per time."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = self.knots
        Q = self._second_derivative_map
        return self._inside_d(np.clip(t, 0.0, 1.0), x, Q)

    def design_second_derivative(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        Q = self._second_derivative_map
        out = np.zeros((t.size, self.n_basis))
        mid = (t >= 0.0) & (t <= 1.0)
        i, h, a, b = self._locate(t[mid], self.knots)
        out[mid] = a[:, None] * Q[i] + b[:, None] * Q[i + 1]
        return out

    @staticmethod
    def _locate(t, x):
        i = np.clip(np.searchsorted(x, t, side="right") - 1, 0, x.size - 2)
        h = x[i + 1] - x[i]
        a = (x[i + 1] - t) / h
        return i, h, a, 1.0 - a

    def _inside(self, t, x, Q):
        i, h, a, b = self._locate(t, x)
        rows = ((a**3 - a) * h * h / 6.0)[:, None] * Q[i] + ((b**3 - b) * h * h / 6.0)[:, None] * Q[i + 1]
        k = np.arange(t.size)
        rows[k, i] += a
        rows[k, i + 1] += b
        return rows

    def _inside_d(self, t, x, Q):
        i, h, a, b = self._locate(t, x)
        rows = (-(3 * a * a - 1) * h / 6.0)[:, None] * Q[i] + ((3 * b * b - 1) * h / 6.0)[:, None] * Q[i + 1]
        k = np.arange(t.size)
        rows[k, i] -= 1.0 / h
        rows[k, i + 1] += 1.0 / h
        return rows


def _natural_q(x):
    """Matrix mapping knot values to knot second derivatives (zero at both ends)."""
    K = x.size
    h = np.diff(x)
    n = K - 2
    ab = np.zeros((3, n))
    ab[0, 1:] = h[1:-1]
    ab[1] = 2.0 * (h[:-1] + h[1:])
    ab[2, :-1] = h[1:-1]
    rhs = np.zeros((n, K))
    for j in range(n):
        i = j + 1
        rhs[j, i - 1] += 6.0 / h[i - 1]
        rhs[j, i] -= 6.0 / h[i - 1] + 6.0 / h[i]
        rhs[j, i + 1] += 6.0 / h[i]
    Q = np.zeros((K, K))
    Q[1:-1] = solve_banded((1, 1), ab, rhs)
    return Q


def design_row(basis: SplineBasis, t):
    """Basis evaluations at a single time (vector of length n_basis)."""
    return basis.design(np.atleast_1d(t))[0]


def theta_eval(coeffs, basis: SplineBasis, t):
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (basis.n_basis,):
        raise ValueError(f"expected {basis.n_basis} coefficients, got shape {coeffs.shape}")
    t_arr = np.asarray(t, dtype=float)
    out = basis.design(t_arr) @ coeffs
    return out.reshape(t_arr.shape) if t_arr.ndim else out[0]
