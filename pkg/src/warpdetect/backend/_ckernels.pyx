# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: im2col/col2im fills, direct convolution for
small output-channel counts, bilinear sampling, and 2x2 average pooling.

All buffers are float64 and C-contiguous; the Python wrappers in
``compiled_impl`` own allocation and BLAS calls.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor


def fill_colT(double[:, :, :, ::1] x, double[:, ::1] colT,
              int KH, int KW, int stride, int pad):
    """Write the transposed patch matrix (K, N*OH*OW) for x (N,C,H,W)."""
    cdef int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int OH = (H + 2 * pad - KH) // stride + 1
    cdef int OW = (W + 2 * pad - KW) // stride + 1
    cdef int ci, kh, kw, n, oy, ox, iy, ix, cidx, row0
    for ci in range(C):
        for kh in range(KH):
            for kw in range(KW):
                cidx = (ci * KH + kh) * KW + kw
                for n in range(N):
                    for oy in range(OH):
                        row0 = (n * OH + oy) * OW
                        iy = oy * stride - pad + kh
                        if iy < 0 or iy >= H:
                            for ox in range(OW):
                                colT[cidx, row0 + ox] = 0.0
                            continue
                        for ox in range(OW):
                            ix = ox * stride - pad + kw
                            if ix < 0 or ix >= W:
                                colT[cidx, row0 + ox] = 0.0
                            else:
                                colT[cidx, row0 + ox] = x[n, ci, iy, ix]


def col2im_addT(double[:, ::1] dcolT, double[:, :, :, ::1] dx,
                int KH, int KW, int stride, int pad):
    """Scatter-add the transposed patch gradient back into dx (N,C,H,W)."""
    cdef int N = dx.shape[0], C = dx.shape[1], H = dx.shape[2], W = dx.shape[3]
    cdef int OH = (H + 2 * pad - KH) // stride + 1
    cdef int OW = (W + 2 * pad - KW) // stride + 1
    cdef int ci, kh, kw, n, oy, ox, iy, ix, cidx, row0
    for ci in range(C):
        for kh in range(KH):
            for kw in range(KW):
                cidx = (ci * KH + kh) * KW + kw
                for n in range(N):
                    for oy in range(OH):
                        iy = oy * stride - pad + kh
                        if iy < 0 or iy >= H:
                            continue
                        row0 = (n * OH + oy) * OW
                        for ox in range(OW):
                            ix = ox * stride - pad + kw
                            if 0 <= ix < W:
                                dx[n, ci, iy, ix] += dcolT[cidx, row0 + ox]


def conv2d_direct(double[:, :, :, ::1] x, double[:, :, :, ::1] k,
                  double[::1] b, int pad):
    """Direct stride-1 convolution; efficient when CO is small.

    Works row by row on a zero-padded input row buffer so the inner loops
    are branch-free and vectorizable.
    """
    cdef int N = x.shape[0], CI = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int CO = k.shape[0], KH = k.shape[2], KW = k.shape[3]
    cdef int OH = H + 2 * pad - KH + 1, OW = W + 2 * pad - KW + 1
    out_np = np.empty((N, CO, OH, OW))
    cdef double[:, :, :, ::1] out = out_np
    xpad_np = np.zeros((CI, H + 2 * pad, W + 2 * pad))
    cdef double[:, :, ::1] xpad = xpad_np
    acc_np = np.empty(OW)
    cdef double[::1] acc = acc_np
    cdef int n, co, ci, kh, kw, oy, ox, HP = H + 2 * pad
    cdef double kv, bv
    for n in range(N):
        for ci in range(CI):
            for oy in range(H):
                for ox in range(W):
                    xpad[ci, oy + pad, ox + pad] = x[n, ci, oy, ox]
        for co in range(CO):
            bv = b[co] if b is not None else 0.0
            for oy in range(OH):
                for ox in range(OW):
                    acc[ox] = bv
                for ci in range(CI):
                    for kh in range(KH):
                        for kw in range(KW):
                            kv = k[co, ci, kh, kw]
                            if kv == 0.0:
                                continue
                            for ox in range(OW):
                                acc[ox] += kv * xpad[ci, oy + kh, ox + kw]
                for ox in range(OW):
                    out[n, co, oy, ox] = acc[ox]
    return out_np


def conv2d_direct_dk(double[:, :, :, ::1] x, double[:, :, :, ::1] dy, int pad):
    """Kernel gradient for the direct stride-1 path (padded row buffers)."""
    cdef int N = x.shape[0], CI = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int CO = dy.shape[1], OH = dy.shape[2], OW = dy.shape[3]
    cdef int KH = H + 2 * pad - OH + 1, KW = W + 2 * pad - OW + 1
    dk_np = np.zeros((CO, CI, KH, KW))
    cdef double[:, :, :, ::1] dk = dk_np
    xpad_np = np.zeros((CI, H + 2 * pad, W + 2 * pad))
    cdef double[:, :, ::1] xpad = xpad_np
    cdef int n, co, ci, kh, kw, oy, ox
    cdef double acc
    for n in range(N):
        for ci in range(CI):
            for oy in range(H):
                for ox in range(W):
                    xpad[ci, oy + pad, ox + pad] = x[n, ci, oy, ox]
        for co in range(CO):
            for ci in range(CI):
                for kh in range(KH):
                    for oy in range(OH):
                        for kw in range(KW):
                            acc = 0.0
                            for ox in range(OW):
                                acc += dy[n, co, oy, ox] * xpad[ci, oy + kh, ox + kw]
                            dk[co, ci, kh, kw] += acc
    return dk_np


def avgpool2_forward(double[:, :, :, ::1] x):
    cdef int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int OH = H // 2, OW = W // 2
    out_np = np.empty((N, C, OH, OW))
    cdef double[:, :, :, ::1] out = out_np
    cdef int n, c, oy, ox
    for n in range(N):
        for c in range(C):
            for oy in range(OH):
                for ox in range(OW):
                    out[n, c, oy, ox] = 0.25 * (
                        x[n, c, 2 * oy, 2 * ox] + x[n, c, 2 * oy, 2 * ox + 1]
                        + x[n, c, 2 * oy + 1, 2 * ox] + x[n, c, 2 * oy + 1, 2 * ox + 1])
    return out_np


def avgpool2_backward(double[:, :, :, ::1] dy):
    cdef int N = dy.shape[0], C = dy.shape[1], OH = dy.shape[2], OW = dy.shape[3]
    dx_np = np.empty((N, C, OH * 2, OW * 2))
    cdef double[:, :, :, ::1] dx = dx_np
    cdef int n, c, oy, ox
    cdef double g
    for n in range(N):
        for c in range(C):
            for oy in range(OH):
                for ox in range(OW):
                    g = 0.25 * dy[n, c, oy, ox]
                    dx[n, c, 2 * oy, 2 * ox] = g
                    dx[n, c, 2 * oy, 2 * ox + 1] = g
                    dx[n, c, 2 * oy + 1, 2 * ox] = g
                    dx[n, c, 2 * oy + 1, 2 * ox + 1] = g
    return dx_np


def bilinear_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] grid, int mode):
    """Sample x (N,C,H,W) at grid (N,OH,OW,2) pixel coordinates.

    mode 0: zeros padding outside the frame; mode 1: clamp to border.
    """
    cdef int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int OH = grid.shape[1], OW = grid.shape[2]
    out_np = np.zeros((N, C, OH, OW))
    cdef double[:, :, :, ::1] out = out_np
    cdef int n, c, oy, ox, x0, y0, x1, y1
    cdef double px, py, fx, fy, w00, w01, w10, w11, v
    for n in range(N):
        for oy in range(OH):
            for ox in range(OW):
                px = grid[n, oy, ox, 0]
                py = grid[n, oy, ox, 1]
                if mode == 1:
                    if px < 0.0: px = 0.0
                    if px > W - 1.0: px = W - 1.0
                    if py < 0.0: py = 0.0
                    if py > H - 1.0: py = H - 1.0
                x0 = <int>floor(px)
                y0 = <int>floor(py)
                fx = px - x0
                fy = py - y0
                x1 = x0 + 1
                y1 = y0 + 1
                w00 = (1.0 - fx) * (1.0 - fy)
                w01 = fx * (1.0 - fy)
                w10 = (1.0 - fx) * fy
                w11 = fx * fy
                for c in range(C):
                    v = 0.0
                    if 0 <= y0 < H:
                        if 0 <= x0 < W:
                            v += w00 * x[n, c, y0, x0]
                        if 0 <= x1 < W:
                            v += w01 * x[n, c, y0, x1]
                    if 0 <= y1 < H:
                        if 0 <= x0 < W:
                            v += w10 * x[n, c, y1, x0]
                        if 0 <= x1 < W:
                            v += w11 * x[n, c, y1, x1]
                    out[n, c, oy, ox] = v
    return out_np


def bilinear_backward(double[:, :, :, ::1] x, double[:, :, :, ::1] grid,
                      double[:, :, :, ::1] dy, int mode):
    cdef int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int OH = grid.shape[1], OW = grid.shape[2]
    dx_np = np.zeros((N, C, H, W))
    dgrid_np = np.zeros((N, OH, OW, 2))
    cdef double[:, :, :, ::1] dx = dx_np
    cdef double[:, :, :, ::1] dgrid = dgrid_np
    cdef int n, c, oy, ox, x0, y0, x1, y1
    cdef bint v00, v01, v10, v11, inx, iny
    cdef double px, py, fx, fy, g
    cdef double a00, a01, a10, a11, gx, gy
    for n in range(N):
        for oy in range(OH):
            for ox in range(OW):
                px = grid[n, oy, ox, 0]
                py = grid[n, oy, ox, 1]
                inx = True
                iny = True
                if mode == 1:
                    inx = 0.0 < px < W - 1.0
                    iny = 0.0 < py < H - 1.0
                    if px < 0.0: px = 0.0
                    if px > W - 1.0: px = W - 1.0
                    if py < 0.0: py = 0.0
                    if py > H - 1.0: py = H - 1.0
                x0 = <int>floor(px)
                y0 = <int>floor(py)
                fx = px - x0
                fy = py - y0
                x1 = x0 + 1
                y1 = y0 + 1
                v00 = (0 <= y0 < H) and (0 <= x0 < W)
                v01 = (0 <= y0 < H) and (0 <= x1 < W)
                v10 = (0 <= y1 < H) and (0 <= x0 < W)
                v11 = (0 <= y1 < H) and (0 <= x1 < W)
                gx = 0.0
                gy = 0.0
                for c in range(C):
                    g = dy[n, c, oy, ox]
                    a00 = x[n, c, y0, x0] if v00 else 0.0
                    a01 = x[n, c, y0, x1] if v01 else 0.0
                    a10 = x[n, c, y1, x0] if v10 else 0.0
                    a11 = x[n, c, y1, x1] if v11 else 0.0
                    gx += g * ((1.0 - fy) * (a01 - a00) + fy * (a11 - a10))
                    gy += g * ((1.0 - fx) * (a10 - a00) + fx * (a11 - a01))
                    if v00: dx[n, c, y0, x0] += g * (1.0 - fx) * (1.0 - fy)
                    if v01: dx[n, c, y0, x1] += g * fx * (1.0 - fy)
                    if v10: dx[n, c, y1, x0] += g * (1.0 - fx) * fy
                    if v11: dx[n, c, y1, x1] += g * fx * fy
                if inx:
                    dgrid[n, oy, ox, 0] = gx
                if iny:
                    dgrid[n, oy, ox, 1] = gy
    return dx_np, dgrid_np
