"""JIT-compiled gather/scatter kernels for the convolution hot path.

numpy's generic strided copies are far too slow for the im2col/col2im
data movement, so these loops are compiled with numba.  Column layout is
batch-major ([N*out, C*K]) so the BLAS GEMMs see one tall matrix.
Scatter kernels parallelize over channels only, keeping every write
owned by a single thread (bit-deterministic results).
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def im2col2d(xp, kh, kw, sh, sw, ho, wo):
    n, c, _, _ = xp.shape
    cols = np.empty((n * ho * wo, c * kh * kw), xp.dtype)
    for r in prange(n * ho * wo):
        wi = r % wo
        hi = (r // wo) % ho
        ni = r // (ho * wo)
        hb = hi * sh
        wb = wi * sw
        q = 0
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    cols[r, q] = xp[ni, ci, hb + i, wb + j]
                    q += 1
    return cols


@njit(parallel=True, cache=True)
def im2col3d(xp, kd, kh, kw, sd, sh, sw, do, ho, wo):
    n, c, _, _, _ = xp.shape
    cols = np.empty((n * do * ho * wo, c * kd * kh * kw), xp.dtype)
    for r in prange(n * do * ho * wo):
        wi = r % wo
        hi = (r // wo) % ho
        di = (r // (wo * ho)) % do
        ni = r // (do * ho * wo)
        db = di * sd
        hb = hi * sh
        wb = wi * sw
        q = 0
        for ci in range(c):
            for m in range(kd):
                for i in range(kh):
                    for j in range(kw):
                        cols[r, q] = xp[ni, ci, db + m, hb + i, wb + j]
                        q += 1
    return cols


@njit(parallel=True, cache=True)
def col2im2d(colg, n, c, hp, wp, kh, kw, sh, sw, ho, wo):
    gxp = np.zeros((n, c, hp, wp), colg.dtype)
    for ni in prange(n):
        for hi in range(ho):
            rb = (ni * ho + hi) * wo
            for ci in range(c):
                for i in range(kh):
                    hb = hi * sh + i
                    for j in range(kw):
                        q = (ci * kh + i) * kw + j
                        for wi in range(wo):
                            gxp[ni, ci, hb, wi * sw + j] += colg[rb + wi, q]
    return gxp


@njit(parallel=True, cache=True)
def col2im3d(colg, n, c, dp, hp, wp, kd, kh, kw, sd, sh, sw, do, ho, wo):
    gxp = np.zeros((n, c, dp, hp, wp), colg.dtype)
    for ni in prange(n):
        for di in range(do):
            for hi in range(ho):
                rb = ((ni * do + di) * ho + hi) * wo
                for ci in range(c):
                    for m in range(kd):
                        db = di * sd + m
                        for i in range(kh):
                            hb = hi * sh + i
                            for j in range(kw):
                                q = ((ci * kd + m) * kh + i) * kw + j
                                for wi in range(wo):
                                    gxp[ni, ci, db, hb, wi * sw + j] += colg[rb + wi, q]
    return gxp


@njit(parallel=True, cache=True)
def nhwc_to_nchw(y):
    """[N, *spatial flattened as one axis, C] -> [N, C, S] contiguous."""
    n, s, c = y.shape
    out = np.empty((n, c, s), y.dtype)
    for ci in prange(c):
        for ni in range(n):
            for si in range(s):
                out[ni, ci, si] = y[ni, si, ci]
    return out


@njit(parallel=True, cache=True)
def nchw_to_nhwc(y):
    """[N, C, S] -> [N, S, C] contiguous."""
    n, c, s = y.shape
    out = np.empty((n, s, c), y.dtype)
    for ci in prange(c):
        for ni in range(n):
            for si in range(s):
                out[ni, si, ci] = y[ni, ci, si]
    return out


@njit(parallel=True, cache=True)
def scatter_add_channels(gx, idx, g):
    """gx[n, c, flat] += g[n, c, o] at spatial positions idx[n, c, o]."""
    n, c, o = g.shape
    for ci in prange(c):
        for ni in range(n):
            for oi in range(o):
                gx[ni, ci, idx[ni, ci, oi]] += g[ni, ci, oi]
    return gx
