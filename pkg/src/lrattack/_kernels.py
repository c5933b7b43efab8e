"""Hot numeric kernels for convolution and pooling.

Every kernel exists twice: a numba ``@njit`` loop version and a vectorised
numpy version.  The forward convolution picks between them by problem size
(see ``conv2d``).  ``LRATTACK_NUMBA=0`` in the environment forces the numpy
path; otherwise numba is used whenever it can be imported.  Both paths take
and return C-contiguous batched arrays laid out as (batch, channel, h, w).
"""

import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("LRATTACK_NUMBA", "1") != "0"


def _speed_up(func):
    """Compile ``func`` with numba when enabled, else return it untouched."""
    if USE_NUMBA:
        return numba.njit(cache=True)(func)
    return func


def out_size(n, k, stride, pad=0):
    return (n + 2 * pad - k) // stride + 1


# --------------------------------------------------------------------------
# numba loop versions


def _col_range(n_out, n_in, offset, stride):
    """Output positions ``j`` with ``0 <= j * stride + offset < n_in``."""
    lo = 0
    while lo < n_out and lo * stride + offset < 0:
        lo += 1
    hi = n_out
    while hi > lo and (hi - 1) * stride + offset >= n_in:
        hi -= 1
    return lo, hi


def _conv2d_loops(x, w, stride, pad):
    nb, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((nb, co, ho, wo), dtype=x.dtype)
    for b in range(nb):
        for o in range(co):
            for c in range(ci):
                for p in range(kh):
                    i0, i1 = _col_range(ho, h, p - pad, stride)
                    for q in range(kw):
                        j0, j1 = _col_range(wo, wd, q - pad, stride)
                        wv = w[o, c, p, q]
                        for i in range(i0, i1):
                            r = i * stride + p - pad
                            if stride == 1:
                                s = q - pad
                                for j in range(j0, j1):
                                    out[b, o, i, j] += wv * x[b, c, r, j + s]
                            else:
                                for j in range(j0, j1):
                                    out[b, o, i, j] += wv * x[b, c, r, j * stride + q - pad]
    return out


def _conv2d_t_loops(g, w, stride, pad, h, wd):
    nb, co, ho, wo = g.shape
    _, ci, kh, kw = w.shape
    out = np.zeros((nb, ci, h, wd), dtype=g.dtype)
    for b in range(nb):
        for o in range(co):
            for c in range(ci):
                for p in range(kh):
                    i0, i1 = _col_range(ho, h, p - pad, stride)
                    for q in range(kw):
                        j0, j1 = _col_range(wo, wd, q - pad, stride)
                        wv = w[o, c, p, q]
                        for i in range(i0, i1):
                            r = i * stride + p - pad
                            if stride == 1:
                                s = q - pad
                                for j in range(j0, j1):
                                    out[b, c, r, j + s] += wv * g[b, o, i, j]
                            else:
                                for j in range(j0, j1):
                                    out[b, c, r, j * stride + q - pad] += wv * g[b, o, i, j]
    return out


def _avgpool_loops(x, k, stride):
    nb, c, h, wd = x.shape
    ho = (h - k) // stride + 1
    wo = (wd - k) // stride + 1
    out = np.zeros((nb, c, ho, wo), dtype=x.dtype)
    inv = 1.0 / (k * k)
    for b in range(nb):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for p in range(k):
                        for q in range(k):
                            acc += x[b, ch, i * stride + p, j * stride + q]
                    out[b, ch, i, j] = acc * inv
    return out


def _avgpool_t_loops(g, k, stride, h, wd):
    nb, c, ho, wo = g.shape
    out = np.zeros((nb, c, h, wd), dtype=g.dtype)
    inv = 1.0 / (k * k)
    for b in range(nb):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    gv = g[b, ch, i, j] * inv
                    for p in range(k):
                        for q in range(k):
                            out[b, ch, i * stride + p, j * stride + q] += gv
    return out


def _maxpool_argmax_loops(x, k, stride):
    # flat indices into the (c, h, w) tensor; first maximum wins ties
    nb, c, h, wd = x.shape
    ho = (h - k) // stride + 1
    wo = (wd - k) // stride + 1
    out = np.zeros((nb, c, ho, wo), dtype=np.int64)
    for b in range(nb):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    r0 = i * stride
                    s0 = j * stride
                    best = x[b, ch, r0, s0]
                    bi = (ch * h + r0) * wd + s0
                    for p in range(k):
                        for q in range(k):
                            v = x[b, ch, r0 + p, s0 + q]
                            if v > best:
                                best = v
                                bi = (ch * h + r0 + p) * wd + s0 + q
                    out[b, ch, i, j] = bi
    return out


def _scatter_add_loops(g, idx, n):
    nb = g.shape[0]
    out = np.zeros((nb, n), dtype=g.dtype)
    for b in range(nb):
        for t in range(idx.shape[0]):
            out[b, idx[t]] += g[b, t]
    return out


# --------------------------------------------------------------------------
# numpy versions


def _windows(x, kh, kw, stride):
    v = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def _conv2d_np(x, w, stride, pad):
    kh, kw = w.shape[2:]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _windows(x, kh, kw, stride)
    return np.ascontiguousarray(np.einsum("bchwkl,ockl->bohw", cols, w, optimize=True))


def _conv2d_t_np(g, w, stride, pad, h, wd):
    nb, _, ho, wo = g.shape
    ci, kh, kw = w.shape[1:]
    out = np.zeros((nb, ci, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    for p in range(kh):
        for q in range(kw):
            out[:, :, p:p + stride * ho:stride, q:q + stride * wo:stride] += np.einsum(
                "bohw,oc->bchw", g, w[:, :, p, q]
            )
    return np.ascontiguousarray(out[:, :, pad:pad + h, pad:pad + wd])


def _avgpool_np(x, k, stride):
    return np.ascontiguousarray(_windows(x, k, k, stride).mean(axis=(4, 5)))


def _avgpool_t_np(g, k, stride, h, wd):
    nb, c, ho, wo = g.shape
    out = np.zeros((nb, c, h, wd), dtype=g.dtype)
    gs = g / (k * k)
    for p in range(k):
        for q in range(k):
            out[:, :, p:p + stride * ho:stride, q:q + stride * wo:stride] += gs
    return out


def _maxpool_argmax_np(x, k, stride):
    nb, c, h, wd = x.shape
    win = _windows(x, k, k, stride)
    ho, wo = win.shape[2:4]
    local = win.reshape(nb, c, ho, wo, k * k).argmax(axis=-1)
    rows = np.arange(ho)[:, None] * stride + local // k
    cols = np.arange(wo)[None, :] * stride + local % k
    chan = np.arange(c)[None, :, None, None]
    return (chan * h + rows) * wd + cols


def _scatter_add_np(g, idx, n):
    out = np.zeros((g.shape[0], n), dtype=g.dtype)
    np.add.at(out, (slice(None), idx), g)
    return out


# --------------------------------------------------------------------------
# dispatch

if USE_NUMBA:
    _col_range = _speed_up(_col_range)
    _conv2d_fast = _speed_up(_conv2d_loops)
    _conv2d_t = _speed_up(_conv2d_t_loops)
    _avgpool = _speed_up(_avgpool_loops)
    _avgpool_t = _speed_up(_avgpool_t_loops)
    _maxpool_argmax = _speed_up(_maxpool_argmax_loops)
    _scatter_add = _speed_up(_scatter_add_loops)
else:
    _conv2d_t = _conv2d_t_np
    _avgpool = _avgpool_np
    _avgpool_t = _avgpool_t_np
    _maxpool_argmax = _maxpool_argmax_np
    _scatter_add = _scatter_add_np


# multiply-adds above which BLAS beats the direct loops (measured on 1 CPU)
CONV_LOOP_LIMIT = 100_000


def conv2d(x, w, stride, pad):
    """Cross-correlation without bias; ``x`` is (B, Ci, H, W).

    Small problems run the numba loops; larger ones the BLAS-backed numpy
    path, which wins once the per-call overhead is amortised.
    """
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    if USE_NUMBA and x.shape[0] * w.size * x.shape[2] * x.shape[3] < CONV_LOOP_LIMIT:
        return _conv2d_fast(x, w, stride, pad)
    return _conv2d_np(x, w, stride, pad)


def conv2d_transpose(g, w, stride, pad, h, wd):
    """Adjoint of :func:`conv2d` with respect to its input."""
    return _conv2d_t(np.ascontiguousarray(g), np.ascontiguousarray(w, dtype=g.dtype), stride, pad, h, wd)


def avgpool(x, k, stride):
    return _avgpool(np.ascontiguousarray(x), k, stride)


def avgpool_transpose(g, k, stride, h, wd):
    return _avgpool_t(np.ascontiguousarray(g), k, stride, h, wd)


def maxpool_argmax(x, k, stride):
    """Flat (c, h, w) index of each window maximum, first index on ties."""
    return _maxpool_argmax(np.ascontiguousarray(x), k, stride)


def scatter_add(g, idx, n):
    """``out[b, idx[t]] += g[b, t]`` into a zero (B, n) array."""
    return _scatter_add(np.ascontiguousarray(g), np.ascontiguousarray(idx, dtype=np.int64), n)
