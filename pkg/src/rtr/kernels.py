"""Hot numeric kernels with two interchangeable lanes.

The inner loops that dominate CPU time outside BLAS (attention softmax,
layer norm, gelu, the optimizer update) exist twice: a numba @njit lane and
a pure-numpy lane. Selection happens once at import:

    RTR_NUMBA=0  -> numpy lane
    RTR_NUMBA=1  -> numba lane (error if numba missing)
    unset        -> numba if importable, else numpy

Both lanes implement identical semantics (same reduction structure, strict
IEEE, no fastmath) so either passes the full test suite; they differ only in
float association order, which stays well inside every documented tolerance.
`benchmarks/bench_kernels.py` times the lanes against each other.

All kernels take contiguous 2D (rows x cols) or 1D views; callers flatten.
"""

from __future__ import annotations

import math
import os

import numpy as np

__all__ = [
    "BACKEND",
    "masked_softmax_fwd",
    "softmax_bwd",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "adam_step",
    "numpy_lane",
    "numba_lane",
]

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------- numpy lane

def _np_masked_softmax_fwd(x):
    """Row softmax; -inf entries get weight exactly 0.

    Returns (y, n_bad) where n_bad counts fully-masked (all -inf) rows,
    which come out as all-zero rows.
    """
    m = np.max(x, axis=1, keepdims=True)
    bad = ~np.isfinite(m[:, 0])
    n_bad = int(bad.sum())
    if n_bad:
        m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    e[x == -np.inf] = 0.0
    s = np.sum(e, axis=1, keepdims=True)
    if n_bad:
        s[bad] = 1.0
    return e / s, n_bad


def _np_softmax_bwd(y, g):
    dot = np.sum(g * y, axis=1, keepdims=True)
    return (g - dot) * y


def _np_layer_norm_fwd(x, eps):
    mean = np.mean(x, axis=1, keepdims=True)
    d = x - mean
    var = np.mean(d * d, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return d * rstd, mean[:, 0], rstd[:, 0]


def _np_layer_norm_bwd(x, mean, rstd, g):
    xhat = (x - mean[:, None]) * rstd[:, None]
    gm = np.mean(g, axis=1, keepdims=True)
    gx = np.mean(g * xhat, axis=1, keepdims=True)
    return rstd[:, None] * (g - gm - xhat * gx)


def _np_gelu_fwd(x):
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _np_gelu_bwd(x, g):
    x2 = x * x
    inner = _GELU_C * (x + _GELU_A * x * x2)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def _np_adam_step(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------- numba lane

def _build_numba_lane():
    from numba import njit

    @njit(cache=True)
    def nb_masked_softmax_fwd(x):
        rows, cols = x.shape
        y = np.empty_like(x)
        n_bad = 0
        for r in range(rows):
            m = -np.inf
            for c in range(cols):
                if x[r, c] > m:
                    m = x[r, c]
            if m == -np.inf:
                for c in range(cols):
                    y[r, c] = 0.0
                n_bad += 1
                continue
            s = 0.0
            for c in range(cols):
                if x[r, c] == -np.inf:
                    y[r, c] = 0.0
                else:
                    e = math.exp(x[r, c] - m)
                    y[r, c] = e
                    s += e
            inv = 1.0 / s
            for c in range(cols):
                y[r, c] *= inv
        return y, n_bad

    @njit(cache=True)
    def nb_softmax_bwd(y, g):
        rows, cols = y.shape
        out = np.empty_like(y)
        for r in range(rows):
            dot = 0.0
            for c in range(cols):
                dot += g[r, c] * y[r, c]
            for c in range(cols):
                out[r, c] = (g[r, c] - dot) * y[r, c]
        return out

    @njit(cache=True)
    def nb_layer_norm_fwd(x, eps):
        rows, cols = x.shape
        y = np.empty_like(x)
        mean = np.empty(rows, dtype=x.dtype)
        rstd = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            s = 0.0
            for c in range(cols):
                s += x[r, c]
            mu = s / cols
            q = 0.0
            for c in range(cols):
                d = x[r, c] - mu
                q += d * d
            rs = 1.0 / math.sqrt(q / cols + eps)
            mean[r] = mu
            rstd[r] = rs
            for c in range(cols):
                y[r, c] = (x[r, c] - mu) * rs
        return y, mean, rstd

    @njit(cache=True)
    def nb_layer_norm_bwd(x, mean, rstd, g):
        rows, cols = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            mu = mean[r]
            rs = rstd[r]
            gm = 0.0
            gx = 0.0
            for c in range(cols):
                xh = (x[r, c] - mu) * rs
                gm += g[r, c]
                gx += g[r, c] * xh
            gm /= cols
            gx /= cols
            for c in range(cols):
                xh = (x[r, c] - mu) * rs
                out[r, c] = rs * (g[r, c] - gm - xh * gx)
        return out

    @njit(cache=True)
    def nb_gelu_fwd(x):
        n = x.size
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(n):
            v = flat[i]
            inner = _GELU_C * (v + _GELU_A * v * v * v)
            out[i] = 0.5 * v * (1.0 + math.tanh(inner))
        return out.reshape(x.shape)

    @njit(cache=True)
    def nb_gelu_bwd(x, g):
        n = x.size
        fx = x.ravel()
        fg = g.ravel()
        out = np.empty_like(fx)
        for i in range(n):
            v = fx[i]
            v2 = v * v
            inner = _GELU_C * (v + _GELU_A * v * v2)
            t = math.tanh(inner)
            dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * v2)
            out[i] = fg[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
        return out.reshape(x.shape)

    @njit(cache=True)
    def nb_adam_step(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
        n = p.size
        fp = p.ravel()
        fg = g.ravel()
        fm = m.ravel()
        fv = v.ravel()
        for i in range(n):
            gi = fg[i]
            fm[i] = beta1 * fm[i] + (1.0 - beta1) * gi
            fv[i] = beta2 * fv[i] + (1.0 - beta2) * gi * gi
            fp[i] -= lr * (fm[i] / bc1) / (math.sqrt(fv[i] / bc2) + eps)

    return {
        "masked_softmax_fwd": nb_masked_softmax_fwd,
        "softmax_bwd": nb_softmax_bwd,
        "layer_norm_fwd": nb_layer_norm_fwd,
        "layer_norm_bwd": nb_layer_norm_bwd,
        "gelu_fwd": nb_gelu_fwd,
        "gelu_bwd": nb_gelu_bwd,
        "adam_step": nb_adam_step,
    }


def numpy_lane():
    return {
        "masked_softmax_fwd": _np_masked_softmax_fwd,
        "softmax_bwd": _np_softmax_bwd,
        "layer_norm_fwd": _np_layer_norm_fwd,
        "layer_norm_bwd": _np_layer_norm_bwd,
        "gelu_fwd": _np_gelu_fwd,
        "gelu_bwd": _np_gelu_bwd,
        "adam_step": _np_adam_step,
    }


def numba_lane():
    return _build_numba_lane()


def _select():
    flag = os.environ.get("RTR_NUMBA", "").strip()
    if flag == "0":
        return "numpy", numpy_lane()
    if flag == "1":
        return "numba", numba_lane()
    try:
        return "numba", numba_lane()
    except ImportError:
        return "numpy", numpy_lane()


BACKEND, _impl = _select()

masked_softmax_fwd = _impl["masked_softmax_fwd"]
softmax_bwd = _impl["softmax_bwd"]
layer_norm_fwd = _impl["layer_norm_fwd"]
layer_norm_bwd = _impl["layer_norm_bwd"]
gelu_fwd = _impl["gelu_fwd"]
gelu_bwd = _impl["gelu_bwd"]
adam_step = _impl["adam_step"]
