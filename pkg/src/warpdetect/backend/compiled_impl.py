"""Compiled backend: Cython fills/scatters plus BLAS matmuls.

Mirrors the ``numpy_impl`` API exactly. Convolutions build a transposed
patch matrix in C and hand it to BLAS; convolutions with few output
channels and large kernels (the 7x7 spatial-attention case) take a direct
loop path where im2col traffic would dominate.
"""

import numpy as np

from . import _ckernels as ck

NAME = "compiled"

_colT_cache: dict = {}


def _out_hw(H, W, KH, KW, stride, pad):
    return (H + 2 * pad - KH) // stride + 1, (W + 2 * pad - KW) // stride + 1


def _colT(x, KH, KW, stride, pad):
    """Fresh transposed patch matrix; callers may keep it until backward."""
    N, C, H, W = x.shape
    OH, OW = _out_hw(H, W, KH, KW, stride, pad)
    buf = np.empty((C * KH * KW, N * OH * OW))
    ck.fill_colT(x, buf, KH, KW, stride, pad)
    return buf


def _use_direct(k, stride):
    CO, CI, KH, KW = k.shape
    return stride == 1 and CO <= 4 and KH * KW >= 25


def conv2d_forward(x, k, b, stride, pad, workspace=None):
    """Forward convolution; when ``workspace`` is a dict the patch matrix is
    stashed there under "colT" for reuse by the matching backward call."""
    N, CI, H, W = x.shape
    CO, _, KH, KW = k.shape
    if _use_direct(k, stride):
        bb = b if b is not None else np.zeros(CO)
        return ck.conv2d_direct(x, k, bb, pad)
    OH, OW = _out_hw(H, W, KH, KW, stride, pad)
    colT = _colT(x, KH, KW, stride, pad)
    if workspace is not None:
        workspace["colT"] = colT
    kmat = k.reshape(CO, -1)
    out = np.empty((N, CO, OH, OW))
    S = OH * OW
    for n in range(N):
        np.matmul(kmat, colT[:, n * S:(n + 1) * S], out=out[n].reshape(CO, S))
    if b is not None:
        out += b[:, None, None]
    return out


def _flip_transpose(k):
    # (CO,CI,KH,KW) -> (CI,CO,KH,KW) rotated 180 degrees in the window
    return np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


def conv2d_backward(x, k, dy, stride, pad, workspace=None, need_dx=True):
    N, CI, H, W = x.shape
    CO, _, KH, KW = k.shape
    OH, OW = _out_hw(H, W, KH, KW, stride, pad)
    db = dy.sum(axis=(0, 2, 3))
    if _use_direct(k, stride):
        dk = ck.conv2d_direct_dk(x, dy, pad)
        dx = None
        if need_dx:
            dyc = np.ascontiguousarray(dy)
            dx = ck.conv2d_direct(dyc, _flip_transpose(k), np.zeros(CI),
                                  KH - 1 - pad)
        return dx, dk, db
    S = OH * OW
    K = CI * KH * KW
    kmat = k.reshape(CO, K)
    colT = workspace.pop("colT", None) if workspace is not None else None
    if colT is None:
        colT = _colT(x, KH, KW, stride, pad)
    dk = np.zeros((CO, K))
    dcolT = np.empty((K, N * S)) if need_dx else None
    for n in range(N):
        dy_n = dy[n].reshape(CO, S)
        seg = colT[:, n * S:(n + 1) * S]
        dk += dy_n @ seg.T
        if need_dx:
            np.matmul(kmat.T, dy_n, out=dcolT[:, n * S:(n + 1) * S])
    dx = None
    if need_dx:
        dx = np.zeros_like(x)
        ck.col2im_addT(dcolT, dx, KH, KW, stride, pad)
    return dx, dk.reshape(CO, CI, KH, KW), db


def avgpool2_forward(x):
    return ck.avgpool2_forward(x)


def avgpool2_backward(dy):
    return ck.avgpool2_backward(np.ascontiguousarray(dy))


def bilinear_forward(x, grid, mode):
    return ck.bilinear_forward(np.ascontiguousarray(x),
                               np.ascontiguousarray(grid), mode)


def bilinear_backward(x, grid, dy, mode):
    return ck.bilinear_backward(np.ascontiguousarray(x),
                                np.ascontiguousarray(grid),
                                np.ascontiguousarray(dy), mode)
