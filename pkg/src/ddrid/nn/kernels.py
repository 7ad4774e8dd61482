"""Hot inner kernels for the layer stack.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with the same signature.  The numba path is used when numba imports
cleanly and ``DDRID_DISABLE_NUMBA`` is unset (or ``0``); setting the flag to
``1`` forces the numpy path.  Both paths are deterministic, but they sum in
different orders, so results agree only to rounding.
"""

from __future__ import annotations

import os

import numpy as np

ENV_FLAG = "DDRID_DISABLE_NUMBA"


def _numba_requested() -> bool:
    return os.environ.get(ENV_FLAG, "0").strip().lower() in ("", "0", "false", "no")


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def im2col_numpy(xp, k, s, ho, wo):
    """Unfold a padded (N, Hp, Wp, C) array into (N*ho*wo, k*k*C) patch rows."""
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, ho, wo, k, k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + s * ho : s, j : j + s * wo : s, :]
    return cols.reshape(n * ho * wo, k * k * c)


def col2im_numpy(cols, n, hp, wp, k, s, ho, wo):
    """Scatter-add (n*ho*wo, k*k*C) patch rows into a zeroed (n, hp, wp, C) array."""
    c = cols.shape[1] // (k * k)
    cols = cols.reshape(n, ho, wo, k, k, c)
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + s * ho : s, j : j + s * wo : s, :] += cols[:, :, :, i, j, :]
    return out


def leaky_relu_numpy(x, slope):
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_grad_numpy(x, dy, slope):
    return np.where(x >= 0, dy, dy * dy.dtype.type(slope))


def bn_stats_numpy(x):
    """Per-channel mean and biased variance of an (M, C) array."""
    return x.mean(axis=0), x.var(axis=0)


def bn_backward_numpy(dy, xhat, inv_std):
    """Input gradient of batch normalisation over the rows of (M, C) arrays.

    ``dy`` must already carry the scale factor.
    """
    m = dy.shape[0]
    dsum = dy.sum(axis=0)
    dxhat_sum = (dy * xhat).sum(axis=0)
    return (inv_std / m) * (m * dy - dsum - xhat * dxhat_sum)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None


if _numba is not None:
    njit = _numba.njit(cache=True, nogil=True)

    @njit
    def im2col_numba(xp, k, s, ho, wo):
        n, c = xp.shape[0], xp.shape[3]
        cols = np.empty((n * ho * wo, k * k * c), dtype=xp.dtype)
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    r = (b * ho + oy) * wo + ox
                    for i in range(k):
                        y = oy * s + i
                        for j in range(k):
                            x = ox * s + j
                            base = (i * k + j) * c
                            for ch in range(c):
                                cols[r, base + ch] = xp[b, y, x, ch]
        return cols

    @njit
    def col2im_numba(cols, n, hp, wp, k, s, ho, wo):
        c = cols.shape[1] // (k * k)
        out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    r = (b * ho + oy) * wo + ox
                    for i in range(k):
                        y = oy * s + i
                        for j in range(k):
                            x = ox * s + j
                            base = (i * k + j) * c
                            for ch in range(c):
                                out[b, y, x, ch] += cols[r, base + ch]
        return out

    @njit
    def _leaky_relu_flat(x, slope):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            out[i] = v if v >= 0 else v * slope
        return out

    @njit
    def _leaky_relu_grad_flat(x, dy, slope):
        out = np.empty_like(dy)
        for i in range(x.size):
            out[i] = dy[i] if x[i] >= 0 else dy[i] * slope
        return out

    def leaky_relu_numba(x, slope):
        flat = np.ascontiguousarray(x).reshape(-1)
        return _leaky_relu_flat(flat, x.dtype.type(slope)).reshape(x.shape)

    def leaky_relu_grad_numba(x, dy, slope):
        xf = np.ascontiguousarray(x).reshape(-1)
        df = np.ascontiguousarray(dy).reshape(-1)
        return _leaky_relu_grad_flat(xf, df, dy.dtype.type(slope)).reshape(dy.shape)

    @njit
    def _bn_stats(x):
        m, c = x.shape
        mean = np.zeros(c, dtype=np.float64)
        var = np.zeros(c, dtype=np.float64)
        for r in range(m):
            for ch in range(c):
                mean[ch] += x[r, ch]
        mean /= m
        for r in range(m):
            for ch in range(c):
                d = x[r, ch] - mean[ch]
                var[ch] += d * d
        var /= m
        return mean, var

    def bn_stats_numba(x):
        mean, var = _bn_stats(np.ascontiguousarray(x))
        return mean.astype(x.dtype), var.astype(x.dtype)

    @njit
    def _bn_backward(dy, xhat, inv_std):
        m, c = dy.shape
        dsum = np.zeros(c, dtype=np.float64)
        dxs = np.zeros(c, dtype=np.float64)
        for r in range(m):
            for ch in range(c):
                dsum[ch] += dy[r, ch]
                dxs[ch] += dy[r, ch] * xhat[r, ch]
        dx = np.empty_like(dy)
        for r in range(m):
            for ch in range(c):
                dx[r, ch] = inv_std[ch] / m * (m * dy[r, ch] - dsum[ch] - xhat[r, ch] * dxs[ch])
        return dx

    def bn_backward_numba(dy, xhat, inv_std):
        return _bn_backward(
            np.ascontiguousarray(dy), np.ascontiguousarray(xhat), np.ascontiguousarray(inv_std)
        )


NUMBA_AVAILABLE = _numba is not None
USE_NUMBA = NUMBA_AVAILABLE and _numba_requested()

if USE_NUMBA:
    im2col = im2col_numba
    col2im = col2im_numba
    leaky_relu = leaky_relu_numba
    leaky_relu_grad = leaky_relu_grad_numba
    bn_stats = bn_stats_numba
    bn_backward = bn_backward_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    leaky_relu = leaky_relu_numpy
    leaky_relu_grad = leaky_relu_grad_numpy
    bn_stats = bn_stats_numpy
    bn_backward = bn_backward_numpy


def backend() -> str:
    """Name of the active kernel path, ``"numba"`` or ``"numpy"``."""
    return "numba" if USE_NUMBA else "numpy"
