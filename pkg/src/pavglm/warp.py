"""
Monotone warping functions.

A warp is the Hermite cubic through the knots ``(0, 0)`` and
``(t_k, t_k + w_k)``, with centred-difference slopes limited by the Hyman
filter, extended linearly past the last anchor. For fixed ``w`` the limited
slopes are a (branch-selected) linear function of the knot values, so the
warp is linear in the knots and its Jacobian with respect to ``w`` is exact.
"""

from dataclasses import dataclass, field

import numpy as np


class InvalidWarpError(ValueError):
    """Knot values are not strictly increasing."""


def equidistant_anchors(m_w):
    return np.arange(1, m_w + 1) / (m_w + 1.0)


@dataclass(frozen=True)
class WarpSpec:
    m_w: int = 7
    anchors: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.m_w < 1:
            raise ValueError("need at least one warp anchor")
        anchors = equidistant_anchors(self.m_w) if self.anchors is None else np.asarray(self.anchors, float)
        if anchors.shape != (self.m_w,):
            raise ValueError("anchors length must equal m_w")
        if np.any(anchors <= 0) or np.any(anchors >= 1) or np.any(np.diff(anchors) <= 0):
            raise ValueError("anchors must be strictly increasing inside (0, 1)")
        object.__setattr__(self, "anchors", anchors)

    def __eq__(self, other):
        return isinstance(other, WarpSpec) and self.m_w == other.m_w and np.array_equal(self.anchors, other.anchors)

    def __hash__(self):
        return hash((self.m_w, self.anchors.tobytes()))


def _hermite(s):
    s2, s3 = s * s, s * s * s
    return 2 * s3 - 3 * s2 + 1, s3 - 2 * s2 + s, -2 * s3 + 3 * s2, s3 - s2


def _hermite_ds(s):
    return 6 * s * s - 6 * s, 3 * s * s - 4 * s + 1, -6 * s * s + 6 * s, 3 * s * s - 2 * s


class Warp:
    """Evaluated warp ``v(., w)``; call it on times to get warped times."""

    def __init__(self, spec: WarpSpec, w):
        w = np.asarray(w, dtype=float)
        if w.shape != (spec.m_w,):
            raise ValueError(f"expected {spec.m_w} warp coefficients, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise InvalidWarpError("warp coefficients must be finite")
        self.spec = spec
        self.w = w
        x = np.concatenate(([0.0], spec.anchors))
        y = np.concatenate(([0.0], spec.anchors + w))
        h = np.diff(x)
        delta = np.diff(y) / h
        if np.any(delta <= 0):
            raise InvalidWarpError("anchor values t_k + w_k must be strictly increasing from 0")
        self.x, self.y, self.h = x, y, h
        self.slope_map = self._slope_map(x, y, h, delta)
        self.slopes = self.slope_map @ y

    @staticmethod
    def _slope_map(x, y, h, delta):
        n = x.size
        # rows of D map knot values to secant slopes
        D = np.zeros((n - 1, n))
        idx = np.arange(n - 1)
        D[idx, idx] = -1.0 / h
        D[idx, idx + 1] = 1.0 / h
        G = np.zeros((n, n))
        G[0] = D[0]
        G[-1] = D[-1]
        for i in range(1, n - 1):
            span = x[i + 1] - x[i - 1]
            G[i, i - 1] = -1.0 / span
            G[i, i + 1] = 1.0 / span
        d0 = G @ y
        # Hyman limiter for increasing data: 0 <= d_i <= 3 min(adjacent secants)
        for i in range(n):
            adj = [j for j in (i - 1, i) if 0 <= j < n - 1]
            j = min(adj, key=lambda k: delta[k])
            if d0[i] <= 0:
                G[i] = 0.0
            elif d0[i] > 3.0 * delta[j]:
                G[i] = 3.0 * D[j]
        return G

    def weights(self, t):
        """Matrix W with v(t) = W @ knot_values, one row per time."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x, h, G = self.x, self.h, self.slope_map
        n = x.size
        W = np.zeros((t.size, n))
        right = t > x[-1]
        left = t < 0
        inside = ~(right | left)
        if np.any(inside):
            ti = t[inside]
            i = np.clip(np.searchsorted(x, ti, side="right") - 1, 0, n - 2)
            s = (ti - x[i]) / h[i]
            h00, h10, h01, h11 = _hermite(s)
            rows = (h[i] * h10)[:, None] * G[i] + (h[i] * h11)[:, None] * G[i + 1]
            k = np.arange(ti.size)
            rows[k, i] += h00
            rows[k, i + 1] += h01
            W[inside] = rows
        if np.any(right):
            W[right] = (t[right] - x[-1])[:, None] * G[-1]
            W[right, -1] += 1.0
        if np.any(left):
            W[left] = t[left][:, None] * G[0]
            W[left, 0] += 1.0
        return W

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        out = self.weights(t_arr) @ self.y
        return out.reshape(t_arr.shape) if t_arr.ndim else out[0]

    def jacobian(self, t):
        """d v(t) / d w, shape (len(t), m_w)."""
        return self.weights(t)[:, 1:]

    def derivative(self, t):
        """d v(t) / d t."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x, y, h, d = self.x, self.y, self.h, self.slopes
        n = x.size
        out = np.empty(t.size)
        right = t > x[-1]
        left = t < 0
        inside = ~(right | left)
        ti = t[inside]
        i = np.clip(np.searchsorted(x, ti, side="right") - 1, 0, n - 2)
        s = (ti - x[i]) / h[i]
        g00, g10, g01, g11 = _hermite_ds(s)
        out[inside] = (g00 * y[i] + g01 * y[i + 1]) / h[i] + g10 * d[i] + g11 * d[i + 1]
        out[right] = d[-1]
        out[left] = d[0]
        return out


def build_warp(spec: WarpSpec, w) -> Warp:
    return Warp(spec, w)


def warp_jacobian(spec: WarpSpec, w, times) -> np.ndarray:
    return Warp(spec, w).jacobian(times)
