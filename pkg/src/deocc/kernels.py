"""Hot convolution kernels: numba-jitted loops with a pure-numpy fallback.

The numpy path implements the same contraction via shifted strided slices
(one einsum per kernel tap), the numba path via explicit loops.  Which one
runs is decided once at import: set DEOCC_NO_NUMBA=1 to force the numpy
path (also used automatically when numba is unavailable).

All kernels take and return C-contiguous float64 arrays in NCHW layout.
Backward kernels are exact adjoints of the forward, including the
asymmetric edge case where stride does not evenly tile the padded input.
"""

from __future__ import annotations

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("DEOCC_NO_NUMBA", "") not in ("", "0")

try:  # pragma: no cover - exercised via the active backend
    if _FORCE_NUMPY:
        raise ImportError("numba disabled by DEOCC_NO_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def wrap(fn):
            return fn

        return wrap


def out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# numpy path: shift-and-contract, one einsum per kernel tap
# ---------------------------------------------------------------------------

def _np_conv2d_fwd(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh, ow = out_size(h, kh, stride, pad), out_size(wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    y = np.broadcast_to(b[None, :, None, None], (n, o, oh, ow)).copy()
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            y += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j], optimize=True)
    return y


def _np_conv2d_bwd_input(gy, w, stride, pad, h, wd):
    n, o, oh, ow = gy.shape
    _, c, kh, kw = w.shape
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                np.einsum("nohw,oc->nchw", gy, w[:, :, i, j], optimize=True)
            )
    if pad:
        return np.ascontiguousarray(gxp[:, :, pad:-pad, pad:-pad])
    return gxp


def _np_conv2d_bwd_weight(gy, x, stride, pad, kh, kw):
    n, o, oh, ow = gy.shape
    _, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    gw = np.empty((o, c, kh, kw))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            gw[:, :, i, j] = np.einsum("nohw,nchw->oc", gy, patch, optimize=True)
    return gw


# ---------------------------------------------------------------------------
# numba path: jitted im2col/col2im around BLAS gemm (np.dot inside numba)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _nb_pad(x, pad):  # pragma: no cover - jitted
    n, c, h, wd = x.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    return xp


@njit(cache=True)
def _nb_im2col(xp_n, kh, kw, stride, oh, ow):  # pragma: no cover - jitted
    c = xp_n.shape[0]
    cols = np.empty((c * kh * kw, oh * ow))
    for cc in range(c):
        plane = xp_n[cc]
        for i in range(kh):
            for j in range(kw):
                row_out = cols[(cc * kh + i) * kw + j]
                for yy in range(oh):
                    src = plane[i + yy * stride]
                    base = yy * ow
                    for xx in range(ow):
                        row_out[base + xx] = src[j + xx * stride]
    return cols


@njit(cache=True)
def _nb_conv2d_fwd(x, w, b, stride, pad):  # pragma: no cover - jitted
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = _nb_pad(x, pad) if pad > 0 else x
    w2 = np.ascontiguousarray(w.reshape(o, c * kh * kw))
    y = np.empty((n, o, oh, ow))
    for nn in range(n):
        cols = _nb_im2col(xp[nn], kh, kw, stride, oh, ow)
        prod = np.dot(w2, cols)
        for oo in range(o):
            y[nn, oo] = prod[oo].reshape(oh, ow) + b[oo]
    return y


@njit(cache=True)
def _nb_conv2d_bwd_input(gy, w, stride, pad, h, wd):  # pragma: no cover - jitted
    n, o, oh, ow = gy.shape
    _, c, kh, kw = w.shape
    w2t = np.ascontiguousarray(w.reshape(o, c * kh * kw).T)
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for nn in range(n):
        gy2 = np.ascontiguousarray(gy[nn].reshape(o, oh * ow))
        gcols = np.dot(w2t, gy2)  # (c*kh*kw, oh*ow)
        for cc in range(c):
            plane = gxp[nn, cc]
            for i in range(kh):
                for j in range(kw):
                    src = gcols[(cc * kh + i) * kw + j]
                    for yy in range(oh):
                        dst = plane[i + yy * stride]
                        base = yy * ow
                        for xx in range(ow):
                            dst[j + xx * stride] += src[base + xx]
    if pad > 0:
        return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd])
    return gxp


@njit(cache=True)
def _nb_conv2d_bwd_weight(gy, x, stride, pad, kh, kw):  # pragma: no cover - jitted
    n, o, oh, ow = gy.shape
    _, c, h, wd = x.shape
    xp = _nb_pad(x, pad) if pad > 0 else x
    gw2 = np.zeros((o, c * kh * kw))
    for nn in range(n):
        cols = _nb_im2col(xp[nn], kh, kw, stride, oh, ow)
        gy2 = np.ascontiguousarray(gy[nn].reshape(o, oh * ow))
        gw2 += np.dot(gy2, cols.T)
    return gw2.reshape(o, c, kh, kw)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

BACKEND = "numba" if HAS_NUMBA else "numpy"


def _as64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_fwd(x, w, b, stride=1, pad=0):
    x, w, b = _as64(x), _as64(w), _as64(b)
    if BACKEND == "numba":
        return _nb_conv2d_fwd(x, w, b, stride, pad)
    return _np_conv2d_fwd(x, w, b, stride, pad)


def conv2d_bwd_input(gy, w, stride, pad, h, wd):
    gy, w = _as64(gy), _as64(w)
    if BACKEND == "numba":
        return _nb_conv2d_bwd_input(gy, w, stride, pad, h, wd)
    return _np_conv2d_bwd_input(gy, w, stride, pad, h, wd)


def conv2d_bwd_weight(gy, x, stride, pad, kh, kw):
    gy, x = _as64(gy), _as64(x)
    if BACKEND == "numba":
        return _nb_conv2d_bwd_weight(gy, x, stride, pad, kh, kw)
    return _np_conv2d_bwd_weight(gy, x, stride, pad, kh, kw)


def numpy_kernels():
    """The pure-numpy implementations, for equivalence tests and benchmarks."""
    return _np_conv2d_fwd, _np_conv2d_bwd_input, _np_conv2d_bwd_weight


def numba_kernels():
    """The jitted implementations, or None when numba is unavailable/disabled."""
    if not HAS_NUMBA:
        return None
    return _nb_conv2d_fwd, _nb_conv2d_bwd_input, _nb_conv2d_bwd_weight
