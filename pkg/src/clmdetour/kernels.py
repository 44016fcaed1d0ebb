"""Hot elementwise/row kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``CLMDETOUR_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are
deterministic; they agree to floating-point rounding, not bit-for-bit.
Matrix products never live here: they go straight to BLAS through numpy.
"""

from __future__ import annotations

import contextlib
import math
import os

import numpy as np

try:
    import numba as nb

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None
    _HAVE_NUMBA = False

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _env_disabled() -> bool:
    return os.environ.get("CLMDETOUR_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


_USE_NUMBA = _HAVE_NUMBA and not _env_disabled()


def numba_enabled() -> bool:
    return _USE_NUMBA


@contextlib.contextmanager
def backend(name: str):
    """Temporarily force ``"numba"`` or ``"numpy"`` kernels (benchmarks, tests)."""
    global _USE_NUMBA
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    prev = _USE_NUMBA
    _USE_NUMBA = name == "numba"
    try:
        yield
    finally:
        _USE_NUMBA = prev


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def _np_layer_norm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _np_layer_norm_bwd(dy, xhat, rstd, gamma):
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    g = dy * gamma
    dx = (g - g.mean(axis=1, keepdims=True) - xhat * (g * xhat).mean(axis=1, keepdims=True))
    dx *= rstd[:, None]
    return dx, dgamma, dbeta


def _np_gelu_fwd(u):
    t = np.tanh(_GELU_C * (u + _GELU_A * u * u * u))
    return 0.5 * u * (1.0 + t), t


def _np_gelu_bwd(u, t, dg):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * u * u)
    return dg * (0.5 * (1.0 + t) + 0.5 * u * dt)


_CAUSAL_CACHE: dict = {}


def _causal_bias(length: int, width: int, dtype) -> np.ndarray:
    key = (length, width, np.dtype(dtype).str)
    m = _CAUSAL_CACHE.get(key)
    if m is None:
        m = np.where(np.triu(np.ones((length, width), dtype=bool), k=1), -np.inf, 0.0).astype(dtype)
        _CAUSAL_CACHE[key] = m
    return m


def _np_softmax_rows_(s, causal):
    if causal:
        s += _causal_bias(s.shape[-2], s.shape[-1], s.dtype)
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def _np_softmax_bwd(p, dp):
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def _np_xent(logits, targets, mask):
    grad = np.zeros_like(logits)
    rows = np.flatnonzero(mask)
    sub = logits[rows].astype(np.float64)
    sub -= sub.max(axis=1, keepdims=True)
    np.exp(sub, out=sub)
    z = sub.sum(axis=1, keepdims=True)
    sub /= z
    tgt = targets[rows]
    picked = sub[np.arange(rows.size), tgt]
    loss_sum = float(-np.log(picked).sum())
    sub[np.arange(rows.size), tgt] -= 1.0
    grad[rows] = sub
    return loss_sum, grad


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @nb.njit(cache=True)
    def _nb_layer_norm_fwd(x, gamma, beta, eps):
        n, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @nb.njit(cache=True)
    def _nb_layer_norm_bwd(dy, xhat, rstd, gamma):
        n, d = dy.shape
        dx = np.empty_like(dy)
        dgamma = np.zeros(d, dtype=np.float64)
        dbeta = np.zeros(d, dtype=np.float64)
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                g = dy[i, j] * gamma[j]
                s1 += g
                s2 += g * xhat[i, j]
                dgamma[j] += dy[i, j] * xhat[i, j]
                dbeta[j] += dy[i, j]
            s1 /= d
            s2 /= d
            r = rstd[i]
            for j in range(d):
                dx[i, j] = (dy[i, j] * gamma[j] - s1 - xhat[i, j] * s2) * r
        return dx, dgamma.astype(dy.dtype), dbeta.astype(dy.dtype)

    @nb.njit(cache=True)
    def _nb_gelu_inner(u):
        flat = u.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            v = flat[i]
            out[i] = _GELU_C * (v + _GELU_A * v * v * v)
        return out.reshape(u.shape)

    @nb.njit(cache=True)
    def _nb_gelu_out(u, t):
        fu = u.ravel()
        ft = t.ravel()
        out = np.empty_like(fu)
        for i in range(fu.size):
            out[i] = 0.5 * fu[i] * (1.0 + ft[i])
        return out.reshape(u.shape)

    @nb.njit(cache=True)
    def _nb_gelu_bwd(u, t, dg):
        fu = u.ravel()
        ft = t.ravel()
        fd = dg.ravel()
        out = np.empty_like(fu)
        for i in range(fu.size):
            v = fu[i]
            tv = ft[i]
            dt = (1.0 - tv * tv) * _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
            out[i] = fd[i] * (0.5 * (1.0 + tv) + 0.5 * v * dt)
        return out.reshape(u.shape)

    # reductions may reassociate; nothing below touches inf/nan except the
    # explicit fill, which lives in a strict-IEEE kernel
    _FM = {"reassoc", "contract", "nsz", "arcp"}

    @nb.njit(cache=True, fastmath=True)
    def _nb_row_max(row, lim):
        # four independent accumulators so LLVM can vectorize the max
        m0 = m1 = m2 = m3 = row[0]
        j = 1
        while j + 4 <= lim:
            a = row[j]
            m0 = m0 if m0 > a else a
            a = row[j + 1]
            m1 = m1 if m1 > a else a
            a = row[j + 2]
            m2 = m2 if m2 > a else a
            a = row[j + 3]
            m3 = m3 if m3 > a else a
            j += 4
        while j < lim:
            a = row[j]
            m0 = m0 if m0 > a else a
            j += 1
        return max(max(m0, m1), max(m2, m3))

    @nb.njit(cache=True)
    def _nb_shift_rows_(s, causal):
        # subtract the row max over visible keys; future keys become -inf
        nmat, length, width = s.shape
        for b in range(nmat):
            for i in range(length):
                lim = i + 1 if causal else width
                row = s[b, i]
                m = _nb_row_max(row, lim)
                for j in range(lim):
                    row[j] -= m
                for j in range(lim, width):
                    row[j] = -np.inf
        return s

    @nb.njit(cache=True, fastmath=_FM)
    def _nb_normalize_rows_(e, causal):
        nmat, length, width = e.shape
        one = e.dtype.type(1.0)
        for b in range(nmat):
            for i in range(length):
                lim = i + 1 if causal else width
                row = e[b, i]
                tot = row[0] - row[0]
                for j in range(lim):
                    tot += row[j]
                inv = one / tot
                for j in range(lim):
                    row[j] *= inv
        return e

    @nb.njit(cache=True, fastmath=_FM)
    def _nb_softmax_bwd(p, dp, causal):
        nmat, length, width = p.shape
        ds = np.zeros_like(p)
        for b in range(nmat):
            for i in range(length):
                lim = i + 1 if causal else width
                pr, dr, out = p[b, i], dp[b, i], ds[b, i]
                acc = pr[0] - pr[0]
                for j in range(lim):
                    acc += dr[j] * pr[j]
                for j in range(lim):
                    out[j] = pr[j] * (dr[j] - acc)
        return ds


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def layer_norm_fwd(x, gamma, beta, eps):
    """Row-wise normalisation of a 2-D array; returns ``(y, xhat, rstd)``."""
    if _USE_NUMBA:
        return _nb_layer_norm_fwd(x, gamma, beta, eps)
    return _np_layer_norm_fwd(x, gamma, beta, eps)


def layer_norm_bwd(dy, xhat, rstd, gamma):
    if _USE_NUMBA:
        return _nb_layer_norm_bwd(dy, xhat, rstd, gamma)
    return _np_layer_norm_bwd(dy, xhat, rstd, gamma)


def gelu_fwd(u):
    """Tanh-form GELU; returns ``(g, t)`` where ``t`` is the tanh term reused by the backward."""
    if _USE_NUMBA:
        # tanh itself stays in numpy: its SIMD ufunc beats numba's scalar libm call
        u = np.ascontiguousarray(u)
        t = np.tanh(_nb_gelu_inner(u))
        return _nb_gelu_out(u, t), t
    return _np_gelu_fwd(u)


def gelu_bwd(u, t, dg):
    if _USE_NUMBA:
        return _nb_gelu_bwd(np.ascontiguousarray(u), t, np.ascontiguousarray(dg))
    return _np_gelu_bwd(u, t, dg)


def softmax_rows_(s, causal: bool):
    """In-place softmax over the last axis of a ``(N, L, L)`` score stack.

    With ``causal`` set, entries above the diagonal are forced to exact zero.
    """
    if _USE_NUMBA:
        _nb_shift_rows_(s, causal)
        np.exp(s, out=s)
        return _nb_normalize_rows_(s, causal)
    return _np_softmax_rows_(s, causal)


def softmax_bwd(p, dp, causal: bool):
    if _USE_NUMBA:
        return _nb_softmax_bwd(p, dp, causal)
    return _np_softmax_bwd(p, dp)


def xent(logits, targets, mask):
    """Summed NLL (float64) and un-normalised logit gradient over masked rows."""
    return _np_xent(logits, targets, mask)
