"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``PBT_DISABLE_NUMBA=1`` before import to force the numpy path. Both
paths are always importable as ``NUMPY_KERNELS`` / ``NUMBA_KERNELS`` so tests
and ``benchmarks/bench_kernels.py`` can compare them side by side.
"""
import math
import os

import numpy as np
from scipy.special import erf as _erf

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
SQRT_HALF = 1.0 / math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("PBT_DISABLE_NUMBA", "").lower() not in ("1", "true", "yes")


# ---------------------------------------------------------------- numpy path

def _layer_norm_fwd_np(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _layer_norm_bwd_np(dy, xhat, rstd, gamma):
    n = xhat.shape[-1]
    dxhat = dy * gamma
    s1 = dxhat.sum(axis=-1, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
    dx = (rstd[:, None] / n) * (n * dxhat - s1 - xhat * s2)
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def _masked_softmax_np(scores, valid):
    s = np.where(valid, scores, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd_np(dy, y):
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def _gelu_fwd_np(x):
    return 0.5 * x * (1.0 + _erf(x * SQRT_HALF))


def _gelu_bwd_np(x, dy):
    cdf = 0.5 * (1.0 + _erf(x * SQRT_HALF))
    pdf = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def _cumtrapz_abs_np(t, i):
    a = np.abs(i)
    q = np.zeros(len(t), dtype=np.float64)
    if len(t) > 1:
        q[1:] = np.cumsum(0.5 * (a[1:] + a[:-1]) * np.diff(t))
    return q / 3600.0


def _phase_bounds_np(cur):
    # returns (c0, c1, d0, d1) inclusive; c0 = -1 if no charge, d0 = -1 if no discharge
    n = len(cur)
    pos = np.flatnonzero(cur > 0)
    if len(pos) == 0:
        return -1, -1, -1, -1
    p = pos[0]
    c0 = p
    while c0 > 0 and cur[c0 - 1] >= 0:
        c0 -= 1
    c1 = p
    while c1 < n - 1 and cur[c1 + 1] >= 0:
        c1 += 1
    if c1 == n - 1:
        return c0, c1, -1, -1
    neg = c1 + 1
    d0 = neg
    while d0 > 0 and cur[d0 - 1] <= 0:
        d0 -= 1
    d1 = neg
    while d1 < n - 1 and cur[d1 + 1] <= 0:
        d1 += 1
    return c0, c1, d0, d1


def _fnv1a_np(buf, offsets, salt):
    out = np.empty(len(offsets) - 1, dtype=np.uint64)
    for k in range(len(offsets) - 1):
        h = FNV_OFFSET
        if salt >= 0:
            h = ((h ^ salt) * FNV_PRIME) & _MASK64
        for b in buf[offsets[k]:offsets[k + 1]].tolist():
            h = ((h ^ b) * FNV_PRIME) & _MASK64
        out[k] = h
    return out


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _layer_norm_fwd_nb(x, gamma, beta, eps):
        rows, n = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            mu = 0.0
            for k in range(n):
                mu += x[r, k]
            mu /= n
            var = 0.0
            for k in range(n):
                c = x[r, k] - mu
                var += c * c
            var /= n
            rs = 1.0 / math.sqrt(var + eps)
            rstd[r] = rs
            for k in range(n):
                h = (x[r, k] - mu) * rs
                xhat[r, k] = h
                y[r, k] = h * gamma[k] + beta[k]
        return y, xhat, rstd

    @njit(cache=True)
    def _layer_norm_bwd_nb(dy, xhat, rstd, gamma):
        rows, n = dy.shape
        dx = np.empty_like(dy)
        dgamma = np.zeros(n, dtype=dy.dtype)
        dbeta = np.zeros(n, dtype=dy.dtype)
        for r in range(rows):
            s1 = 0.0
            s2 = 0.0
            for k in range(n):
                g = dy[r, k] * gamma[k]
                s1 += g
                s2 += g * xhat[r, k]
                dgamma[k] += dy[r, k] * xhat[r, k]
                dbeta[k] += dy[r, k]
            scale = rstd[r] / n
            for k in range(n):
                dx[r, k] = scale * (n * dy[r, k] * gamma[k] - s1 - xhat[r, k] * s2)
        return dx, dgamma, dbeta

    @njit(cache=True)
    def _masked_softmax_nb(scores, valid):
        rows, n = scores.shape
        y = np.zeros_like(scores)
        for r in range(rows):
            m = -np.inf
            for k in range(n):
                if valid[r, k] and scores[r, k] > m:
                    m = scores[r, k]
            s = 0.0
            for k in range(n):
                if valid[r, k]:
                    e = math.exp(scores[r, k] - m)
                    y[r, k] = e
                    s += e
            for k in range(n):
                y[r, k] /= s
        return y

    @njit(cache=True)
    def _softmax_bwd_nb(dy, y):
        rows, n = dy.shape
        dx = np.empty_like(dy)
        for r in range(rows):
            s = 0.0
            for k in range(n):
                s += dy[r, k] * y[r, k]
            for k in range(n):
                dx[r, k] = y[r, k] * (dy[r, k] - s)
        return dx

    @njit(cache=True)
    def _gelu_fwd_flat(x):
        y = np.empty_like(x)
        for k in range(x.size):
            v = x[k]
            y[k] = 0.5 * v * (1.0 + math.erf(v * SQRT_HALF))
        return y

    @njit(cache=True)
    def _gelu_bwd_flat(x, dy):
        dx = np.empty_like(x)
        for k in range(x.size):
            v = x[k]
            cdf = 0.5 * (1.0 + math.erf(v * SQRT_HALF))
            pdf = INV_SQRT_2PI * math.exp(-0.5 * v * v)
            dx[k] = dy[k] * (cdf + v * pdf)
        return dx

    def _gelu_fwd_nb(x):
        return _gelu_fwd_flat(np.ascontiguousarray(x).reshape(-1)).reshape(x.shape)

    def _gelu_bwd_nb(x, dy):
        return _gelu_bwd_flat(
            np.ascontiguousarray(x).reshape(-1), np.ascontiguousarray(dy).reshape(-1)
        ).reshape(x.shape)

    @njit(cache=True)
    def _cumtrapz_abs_nb(t, i):
        n = t.shape[0]
        q = np.zeros(n, dtype=np.float64)
        acc = 0.0
        for k in range(1, n):
            acc += 0.5 * (abs(i[k]) + abs(i[k - 1])) * (t[k] - t[k - 1])
            q[k] = acc
        return q / 3600.0

    @njit(cache=True)
    def _phase_bounds_nb(cur):
        n = cur.shape[0]
        p = -1
        for k in range(n):
            if cur[k] > 0:
                p = k
                break
        if p < 0:
            return -1, -1, -1, -1
        c0 = p
        while c0 > 0 and cur[c0 - 1] >= 0:
            c0 -= 1
        c1 = p
        while c1 < n - 1 and cur[c1 + 1] >= 0:
            c1 += 1
        if c1 == n - 1:
            return c0, c1, -1, -1
        neg = c1 + 1
        d0 = neg
        while d0 > 0 and cur[d0 - 1] <= 0:
            d0 -= 1
        d1 = neg
        while d1 < n - 1 and cur[d1 + 1] <= 0:
            d1 += 1
        return c0, c1, d0, d1

    @njit(cache=True)
    def _fnv1a_nb(buf, offsets, salt):
        out = np.empty(offsets.shape[0] - 1, dtype=np.uint64)
        prime = np.uint64(FNV_PRIME)
        for k in range(offsets.shape[0] - 1):
            h = np.uint64(FNV_OFFSET)
            if salt >= 0:
                h = (h ^ np.uint64(salt)) * prime
            for j in range(offsets[k], offsets[k + 1]):
                h = (h ^ np.uint64(buf[j])) * prime
            out[k] = h
        return out


NUMPY_KERNELS = {
    "layer_norm_fwd": _layer_norm_fwd_np,
    "layer_norm_bwd": _layer_norm_bwd_np,
    "masked_softmax": _masked_softmax_np,
    "softmax_bwd": _softmax_bwd_np,
    "gelu_fwd": _gelu_fwd_np,
    "gelu_bwd": _gelu_bwd_np,
    "cumtrapz_abs": _cumtrapz_abs_np,
    "phase_bounds": _phase_bounds_np,
    "fnv1a": _fnv1a_np,
}

NUMBA_KERNELS = {}
if HAVE_NUMBA:
    NUMBA_KERNELS = {
        "layer_norm_fwd": _layer_norm_fwd_nb,
        "layer_norm_bwd": _layer_norm_bwd_nb,
        "masked_softmax": _masked_softmax_nb,
        "softmax_bwd": _softmax_bwd_nb,
        "gelu_fwd": _gelu_fwd_nb,
        "gelu_bwd": _gelu_bwd_nb,
        "cumtrapz_abs": _cumtrapz_abs_nb,
        "phase_bounds": _phase_bounds_nb,
        "fnv1a": _fnv1a_nb,
    }

_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


def backend():
    return "numba" if USE_NUMBA else "numpy"


def layer_norm_fwd(x, gamma, beta, eps):
    """Row-wise layer norm of a 2-D array. Returns (y, xhat, rstd)."""
    return _ACTIVE["layer_norm_fwd"](np.ascontiguousarray(x), gamma, beta, eps)


def layer_norm_bwd(dy, xhat, rstd, gamma):
    return _ACTIVE["layer_norm_bwd"](np.ascontiguousarray(dy), xhat, rstd, gamma)


def masked_softmax(scores, valid):
    """Softmax over the last axis of a 2-D array, ignoring entries where ``valid`` is False.

    Every row must have at least one valid entry.
    """
    return _ACTIVE["masked_softmax"](np.ascontiguousarray(scores), np.ascontiguousarray(valid))


def softmax_bwd(dy, y):
    return _ACTIVE["softmax_bwd"](np.ascontiguousarray(dy), y)


def gelu_fwd(x):
    return _ACTIVE["gelu_fwd"](x)


def gelu_bwd(x, dy):
    return _ACTIVE["gelu_bwd"](x, dy)


def cumtrapz_abs(t, i):
    """Cumulative trapezoid integral of |i| dt, in amp-hours (t in s, i in A)."""
    return _ACTIVE["cumtrapz_abs"](
        np.ascontiguousarray(t, dtype=np.float64), np.ascontiguousarray(i, dtype=np.float64)
    )


def phase_bounds(current):
    c0, c1, d0, d1 = _ACTIVE["phase_bounds"](np.ascontiguousarray(current, dtype=np.float64))
    return int(c0), int(c1), int(d0), int(d1)


def fnv1a_many(tokens, salt=-1):
    """64-bit FNV-1a of each byte string in ``tokens``.

    With ``salt >= 0`` the salt byte is mixed in before the token bytes, which
    gives an independent second hash of the same token.
    """
    if not tokens:
        return np.empty(0, dtype=np.uint64)
    lengths = np.fromiter((len(t) for t in tokens), dtype=np.int64, count=len(tokens))
    offsets = np.zeros(len(tokens) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    buf = np.frombuffer(b"".join(tokens), dtype=np.uint8)
    return _ACTIVE["fnv1a"](buf, offsets, int(salt))


def fnv1a(data: bytes) -> int:
    """Reference scalar FNV-1a 64 (pure python)."""
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h
