"""Low-level 3D convolution kernels (the hot inner loops).

Two interchangeable backends compute identical results:

* ``numba`` — ``@njit(parallel=True)`` loop nests, the default whenever
  numba imports.
* ``numpy`` — slice-and-einsum fallback, no compilation step.

Select explicitly with the environment variable ``ALPHAGAN3D_NUMBA``
(``0``/``false`` forces the numpy path, ``1``/``true`` requires numba);
unset means "numba if available".  ``benchmarks/bench_kernels.py`` times
both paths.

All kernels accumulate in float64 regardless of the input dtype, so the
float32 training path stays within one rounding step of an exact
summation, and both backends agree to float32 resolution.

Conventions: volumes are ``[N, C, D, H, W]``, convolution is
cross-correlation (no kernel flip) over zero-padded input, kernels are
cubic, stride/padding are shared by the three spatial axes.
"""
from __future__ import annotations

import os

import numpy as np


def _env_numba_choice():
    raw = os.environ.get("ALPHAGAN3D_NUMBA", "").strip().lower()
    if raw in ("0", "false", "off", "no"):
        return False
    if raw in ("1", "true", "on", "yes"):
        return True
    return None


_choice = _env_numba_choice()
HAVE_NUMBA = False
if _choice is not False:
    try:
        import numba

        if numba.config.THREADING_LAYER == "default":
            # the default TBB probe warns on older system TBB; omp is fine
            numba.config.THREADING_LAYER = "omp"
        from numba import njit, prange

        HAVE_NUMBA = True
    except ImportError:
        if _choice is True:
            raise ImportError(
                "ALPHAGAN3D_NUMBA=1 but numba is not importable; install numba "
                "or unset the variable to use the numpy fallback"
            )

USE_NUMBA = HAVE_NUMBA and _choice is not False


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


def conv_output_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv_transpose_output_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + k


def _pad_spatial(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def conv3d_forward_np(x, w, stride, padding):
    """y[n,co,o] = sum_{ci,t} x[n,ci,o*s-p+t] w[co,ci,t]"""
    n, ci, d, h, wd = x.shape
    co, ci2, k = w.shape[0], w.shape[1], w.shape[2]
    do = conv_output_extent(d, k, stride, padding)
    ho = conv_output_extent(h, k, stride, padding)
    wo = conv_output_extent(wd, k, stride, padding)
    xp = _pad_spatial(x, padding).astype(np.float64, copy=False)
    w64 = w.astype(np.float64, copy=False)
    out = np.zeros((n, co, do, ho, wo), dtype=np.float64)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                patch = xp[
                    :, :,
                    kd : kd + do * stride : stride,
                    kh : kh + ho * stride : stride,
                    kw : kw + wo * stride : stride,
                ]
                out += np.einsum(
                    "ncdhw,oc->nodhw", patch, w64[:, :, kd, kh, kw], optimize=True
                )
    return out.astype(x.dtype, copy=False)


def conv3d_input_grad_np(gy, w, stride, padding, in_spatial):
    """Adjoint of conv3d_forward in its input argument (scatter form)."""
    n, co = gy.shape[0], gy.shape[1]
    do, ho, wo = gy.shape[2:]
    ci, k = w.shape[1], w.shape[2]
    d, h, wd = in_spatial
    p = padding
    gxp = np.zeros((n, ci, d + 2 * p, h + 2 * p, wd + 2 * p), dtype=np.float64)
    gy64 = gy.astype(np.float64, copy=False)
    w64 = w.astype(np.float64, copy=False)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                contrib = np.einsum(
                    "nodhw,oc->ncdhw", gy64, w64[:, :, kd, kh, kw], optimize=True
                )
                gxp[
                    :, :,
                    kd : kd + do * stride : stride,
                    kh : kh + ho * stride : stride,
                    kw : kw + wo * stride : stride,
                ] += contrib
    gx = gxp[:, :, p : p + d, p : p + h, p : p + wd]
    return np.ascontiguousarray(gx).astype(gy.dtype, copy=False)


def conv3d_weight_grad_np(x, gy, k, stride, padding):
    """gw[co,ci,t] = sum_{n,o} x[n,ci,o*s-p+t] gy[n,co,o]"""
    do, ho, wo = gy.shape[2:]
    co, ci = gy.shape[1], x.shape[1]
    xp = _pad_spatial(x, padding).astype(np.float64, copy=False)
    gy64 = gy.astype(np.float64, copy=False)
    gw = np.zeros((co, ci, k, k, k), dtype=np.float64)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                patch = xp[
                    :, :,
                    kd : kd + do * stride : stride,
                    kh : kh + ho * stride : stride,
                    kw : kw + wo * stride : stride,
                ]
                gw[:, :, kd, kh, kw] = np.einsum(
                    "ncdhw,nodhw->oc", patch, gy64, optimize=True
                )
    return gw.astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _conv3d_forward_jit(xp, w, stride, out):
        n, co, do, ho, wo = out.shape
        ci = w.shape[1]
        k = w.shape[2]
        for nc in prange(n * co):
            b = nc // co
            o = nc % co
            for od in range(do):
                for oh in range(ho):
                    for ow in range(wo):
                        acc = 0.0
                        for c in range(ci):
                            for kd in range(k):
                                for kh in range(k):
                                    xrow = xp[b, c, od * stride + kd, oh * stride + kh]
                                    wrow = w[o, c, kd, kh]
                                    for kw in range(k):
                                        acc += xrow[ow * stride + kw] * wrow[kw]
                        out[b, o, od, oh, ow] = acc

    @njit(parallel=True, cache=True)
    def _conv3d_input_grad_jit(gy, w, stride, gxp):
        n, co, do, ho, wo = gy.shape
        ci = w.shape[1]
        k = w.shape[2]
        for b in prange(n):
            for o in range(co):
                for od in range(do):
                    for oh in range(ho):
                        for ow in range(wo):
                            g = gy[b, o, od, oh, ow]
                            for c in range(ci):
                                for kd in range(k):
                                    for kh in range(k):
                                        grow = gxp[b, c, od * stride + kd, oh * stride + kh]
                                        wrow = w[o, c, kd, kh]
                                        for kw in range(k):
                                            grow[ow * stride + kw] += g * wrow[kw]

    @njit(parallel=True, cache=True)
    def _conv3d_weight_grad_jit(xp, gy, stride, gw):
        n, co, do, ho, wo = gy.shape
        ci = gw.shape[1]
        k = gw.shape[2]
        for o in prange(co):
            for c in range(ci):
                for kd in range(k):
                    for kh in range(k):
                        for kw in range(k):
                            acc = 0.0
                            for b in range(n):
                                for od in range(do):
                                    for oh in range(ho):
                                        xrow = xp[b, c, od * stride + kd, oh * stride + kh]
                                        grow = gy[b, o, od, oh]
                                        for ow in range(wo):
                                            acc += xrow[ow * stride + kw] * grow[ow]
                            gw[o, c, kd, kh, kw] = acc

    def conv3d_forward_nb(x, w, stride, padding):
        n, ci, d, h, wd = x.shape
        co, k = w.shape[0], w.shape[2]
        do = conv_output_extent(d, k, stride, padding)
        ho = conv_output_extent(h, k, stride, padding)
        wo = conv_output_extent(wd, k, stride, padding)
        xp = _pad_spatial(x, padding).astype(np.float64, copy=False)
        out = np.empty((n, co, do, ho, wo), dtype=np.float64)
        _conv3d_forward_jit(xp, w.astype(np.float64, copy=False), stride, out)
        return out.astype(x.dtype, copy=False)

    def conv3d_input_grad_nb(gy, w, stride, padding, in_spatial):
        n = gy.shape[0]
        ci = w.shape[1]
        d, h, wd = in_spatial
        p = padding
        gxp = np.zeros((n, ci, d + 2 * p, h + 2 * p, wd + 2 * p), dtype=np.float64)
        _conv3d_input_grad_jit(
            np.ascontiguousarray(gy).astype(np.float64, copy=False),
            w.astype(np.float64, copy=False),
            stride,
            gxp,
        )
        gx = gxp[:, :, p : p + d, p : p + h, p : p + wd]
        return np.ascontiguousarray(gx).astype(gy.dtype, copy=False)

    def conv3d_weight_grad_nb(x, gy, k, stride, padding):
        co, ci = gy.shape[1], x.shape[1]
        xp = _pad_spatial(x, padding).astype(np.float64, copy=False)
        gw = np.empty((co, ci, k, k, k), dtype=np.float64)
        _conv3d_weight_grad_jit(
            xp, np.ascontiguousarray(gy).astype(np.float64, copy=False), stride, gw
        )
        return gw.astype(x.dtype, copy=False)


if USE_NUMBA:
    conv3d_forward = conv3d_forward_nb
    conv3d_input_grad = conv3d_input_grad_nb
    conv3d_weight_grad = conv3d_weight_grad_nb
else:
    conv3d_forward = conv3d_forward_np
    conv3d_input_grad = conv3d_input_grad_np
    conv3d_weight_grad = conv3d_weight_grad_np
