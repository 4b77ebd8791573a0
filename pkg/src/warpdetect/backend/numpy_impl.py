"""Pure-numpy kernel implementations (fallback backend).

Every function here is array-in / array-out on float64 and carries no
autodiff state; the differentiable ops in ``warpdetect.ops`` wrap these.
Convolutions go through im2col + BLAS matmul; scatter-style backward
passes use ``np.bincount`` with cached flat index tables.
"""

import numpy as np

NAME = "numpy"

# per-shape scratch buffers and index tables; keyed by the geometry tuple
_col_cache: dict = {}
_idx_cache: dict = {}


def _out_hw(H, W, KH, KW, stride, pad):
    return (H + 2 * pad - KH) // stride + 1, (W + 2 * pad - KW) // stride + 1


def _col_indices(C, H, W, KH, KW, stride, pad):
    """Flat indices into the zero-padded image for every im2col entry."""
    key = (C, H, W, KH, KW, stride, pad)
    hit = _idx_cache.get(key)
    if hit is not None:
        return hit
    OH, OW = _out_hw(H, W, KH, KW, stride, pad)
    HP, WP = H + 2 * pad, W + 2 * pad
    ci, kh, kw = np.meshgrid(np.arange(C), np.arange(KH), np.arange(KW), indexing="ij")
    patch = (ci * HP + kh) * WP + kw                      # (C,KH,KW)
    oy, ox = np.meshgrid(np.arange(OH), np.arange(OW), indexing="ij")
    origin = (oy * stride) * WP + (ox * stride)           # (OH,OW)
    idx = origin.reshape(-1, 1) + patch.reshape(1, -1)    # (OH*OW, C*KH*KW)
    idx = np.ascontiguousarray(idx, dtype=np.intp)
    _idx_cache[key] = idx
    return idx


def _pad_image(x, pad):
    if pad == 0:
        return x
    N, C, H, W = x.shape
    key = ("pad", N, C, H, W, pad)
    buf = _col_cache.get(key)
    if buf is None:
        buf = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
        _col_cache[key] = buf
    buf[:, :, pad:pad + H, pad:pad + W] = x
    return buf


def im2col(x, KH, KW, stride, pad):
    """(N,C,H,W) -> (N*OH*OW, C*KH*KW) patch matrix."""
    N, C, H, W = x.shape
    xp = _pad_image(x, pad)
    idx = _col_indices(C, H, W, KH, KW, stride, pad)
    xf = xp.reshape(N, -1)
    key = ("col", N, C, H, W, KH, KW, stride, pad)
    buf = _col_cache.get(key)
    if buf is None:
        buf = np.empty((N, idx.size))
        _col_cache[key] = buf
    np.take(xf, idx.reshape(-1), axis=1, out=buf)
    return buf.reshape(-1, idx.shape[1])


def conv2d_forward(x, k, b, stride, pad, workspace=None):
    N, CI, H, W = x.shape
    CO, _, KH, KW = k.shape
    OH, OW = _out_hw(H, W, KH, KW, stride, pad)
    col = im2col(x, KH, KW, stride, pad)
    y = col @ k.reshape(CO, -1).T
    if b is not None:
        y += b
    return np.ascontiguousarray(
        y.reshape(N, OH, OW, CO).transpose(0, 3, 1, 2))


def conv2d_backward(x, k, dy, stride, pad, workspace=None, need_dx=True):
    N, CI, H, W = x.shape
    CO, _, KH, KW = k.shape
    OH, OW = _out_hw(H, W, KH, KW, stride, pad)
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, CO)
    col = im2col(x, KH, KW, stride, pad)
    dk = (col.T @ dy_mat).T.reshape(CO, CI, KH, KW)
    db = dy_mat.sum(axis=0)
    if not need_dx:
        return None, dk, db
    # scatter dcol back through the same index table
    dcol = dy_mat @ k.reshape(CO, -1)                     # (N*OH*OW, CI*KH*KW)
    idx = _col_indices(CI, H, W, KH, KW, stride, pad)
    HP, WP = H + 2 * pad, W + 2 * pad
    plane = CI * HP * WP
    dcol_n = dcol.reshape(N, -1)
    flat = np.empty(N * plane)
    for n in range(N):
        flat[n * plane:(n + 1) * plane] = np.bincount(
            idx.ravel(), weights=dcol_n[n], minlength=plane)
    dxp = flat.reshape(N, CI, HP, WP)
    dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
    return np.ascontiguousarray(dx), dk, db


def avgpool2_forward(x):
    N, C, H, W = x.shape
    return x.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(dy):
    N, C, OH, OW = dy.shape
    dx = np.empty((N, C, OH, 2, OW, 2))
    dx[...] = (dy * 0.25)[:, :, :, None, :, None]
    return dx.reshape(N, C, OH * 2, OW * 2)


def _corner_setup(x, grid, mode):
    """Shared gather arithmetic for bilinear sampling.

    grid holds (x, y) pairs in pixel units, already snapped/unnormalized by
    the caller. mode 0 = zeros padding, 1 = clamp.
    """
    N, C, H, W = x.shape
    px = grid[..., 0]
    py = grid[..., 1]
    if mode == 1:
        px = np.clip(px, 0.0, W - 1.0)
        py = np.clip(py, 0.0, H - 1.0)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    corners = []
    for dy_, dx_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
        cx = x0 + dx_
        cy = y0 + dy_
        if mode == 1:
            valid = np.ones(cx.shape, dtype=bool)
            cxc = np.clip(cx, 0, W - 1)
            cyc = np.clip(cy, 0, H - 1)
        else:
            valid = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
            cxc = np.clip(cx, 0, W - 1)
            cyc = np.clip(cy, 0, H - 1)
        wx = fx if dx_ == 1 else 1.0 - fx
        wy = fy if dy_ == 1 else 1.0 - fy
        corners.append((cyc, cxc, valid, wx * wy, wx, wy, dx_, dy_))
    return corners, fx, fy


def bilinear_forward(x, grid, mode):
    N, C, H, W = x.shape
    OH, OW = grid.shape[1], grid.shape[2]
    corners, _, _ = _corner_setup(x, grid, mode)
    out = np.zeros((N, C, OH, OW))
    nn = np.arange(N)[:, None, None]
    for cy, cx, valid, w, _, _, _, _ in corners:
        vals = x[nn, :, cy, cx]                           # (N,OH,OW,C)
        out += (vals * (w * valid)[..., None]).transpose(0, 3, 1, 2)
    return out


def bilinear_backward(x, grid, dy, mode):
    N, C, H, W = x.shape
    OH, OW = grid.shape[1], grid.shape[2]
    corners, fx, fy = _corner_setup(x, grid, mode)
    nn = np.arange(N)[:, None, None]
    dyt = dy.transpose(0, 2, 3, 1)                        # (N,OH,OW,C)
    dx_img = np.zeros(N * C * H * W)
    dgx = np.zeros((N, OH, OW))
    dgy = np.zeros((N, OH, OW))
    idx_nc = ((np.arange(N)[:, None, None] * C)[..., None]
              + np.arange(C)[None, None, None, :])        # (N,1,1,C) broadcastable
    for cy, cx, valid, w, wx, wy, dx_, dy_ in corners:
        vals = x[nn, :, cy, cx]                           # (N,OH,OW,C)
        dot = (dyt * vals).sum(axis=-1)                   # (N,OH,OW)
        sx = 1.0 if dx_ == 1 else -1.0
        sy = 1.0 if dy_ == 1 else -1.0
        dgx += sx * wy * dot * valid
        dgy += sy * wx * dot * valid
        # scatter dL/dvals = dyt * w at flat index ((n*C + c)*H + cy)*W + cx
        contrib = dyt * (w * valid)[..., None]            # (N,OH,OW,C)
        idx = (idx_nc * H + cy[..., None]) * W + cx[..., None]
        dx_img += np.bincount(idx.ravel(), weights=contrib.ravel(),
                              minlength=dx_img.size)
    if mode == 1:
        # clamped coordinates have zero grid gradient outside the frame
        inx = (grid[..., 0] > 0.0) & (grid[..., 0] < W - 1.0)
        iny = (grid[..., 1] > 0.0) & (grid[..., 1] < H - 1.0)
        dgx *= inx
        dgy *= iny
    dgrid = np.stack([dgx, dgy], axis=-1)
    return dx_img.reshape(N, C, H, W), dgrid
