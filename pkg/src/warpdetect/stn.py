"""Spatial transformer with thin-plate-spline (or affine) warping.

A small localization network predicts bounded displacements for a regular
G x G control lattice; the warp fitted to lattice -> lattice+displacement
is evaluated on the output pixel grid and the input is bilinearly sampled
there. With a zero-initialized head the transform starts as the exact
identity. Because the control lattice is fixed, the fitted parameters are
linear in the targets, so one precomputed matrix turns targets into the
dense grid."""

from dataclasses import dataclass

import numpy as np

from . import init, ops, tps
from .errors import ConfigurationError
from .tensor import Tensor, as_tensor


@dataclass
class StnConfig:
    grid_size: int = 4
    lam: float = 0.01
    displacement_scale: float = 0.25
    mode: str = "tps"

    def __post_init__(self):
        if self.grid_size < 2:
            raise ConfigurationError("grid_size must be >= 2 (TPS needs >= 3 "
                                     "control points)")
        if self.displacement_scale <= 0:
            raise ConfigurationError("displacement_scale must be positive")
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.mode not in ("tps", "affine"):
            raise ConfigurationError(f"mode must be tps or affine, got "
                                     f"{self.mode!r}")


@dataclass
class LocalizationNet:
    """Two conv blocks (8 then 16 channels, 3x3 + ReLU + 2x2 average pool)
    and a fully connected head to 2*G^2 outputs. The head is zero-initialized
    so the initial displacement field is exactly zero."""
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    fc_w: Tensor
    fc_b: Tensor
    grid_size: int
    in_shape: tuple

    def named_parameters(self, prefix="stn"):
        return {f"{prefix}.conv1_w": self.conv1_w, f"{prefix}.conv1_b": self.conv1_b,
                f"{prefix}.conv2_w": self.conv2_w, f"{prefix}.conv2_b": self.conv2_b,
                f"{prefix}.fc_w": self.fc_w, f"{prefix}.fc_b": self.fc_b}


def init_localization_net(rng, in_channels, height, width, grid_size=4):
    if height < 8 or width < 8 or height % 4 or width % 4:
        raise ConfigurationError(
            f"localization net needs spatial sides >= 8 and divisible by 4, "
            f"got {height}x{width}")
    flat = 16 * (height // 4) * (width // 4)
    return LocalizationNet(
        conv1_w=init.uniform_fan_in(rng, (8, in_channels, 3, 3), in_channels * 9),
        conv1_b=init.zeros((8,)),
        conv2_w=init.uniform_fan_in(rng, (16, 8, 3, 3), 8 * 9),
        conv2_b=init.zeros((16,)),
        fc_w=init.zeros((flat, 2 * grid_size * grid_size)),
        fc_b=init.zeros((2 * grid_size * grid_size,)),
        grid_size=grid_size,
        in_shape=(in_channels, height, width))


def control_lattice(grid_size):
    """Regular G x G source lattice over [-1,1]^2 (never collinear)."""
    return tps.normalized_lattice(grid_size, grid_size)


def localize(net, image, displacement_scale=0.25):
    """Bounded displacement vectors for the control lattice: the raw head
    output is squashed by tanh and scaled, keeping each component inside
    (-displacement_scale, +displacement_scale)."""
    image = as_tensor(image)
    batched = image.data.ndim == 4
    shape = image.data.shape[1:] if batched else image.data.shape
    if tuple(shape) != tuple(net.in_shape):
        raise ConfigurationError(f"image shape {tuple(shape)} does not match "
                                 f"localization net input {net.in_shape}")
    h = ops.relu(ops.conv2d(image, net.conv1_w, net.conv1_b, 1, 1))
    h = ops.avg_pool2(h)
    h = ops.relu(ops.conv2d(h, net.conv2_w, net.conv2_b, 1, 1))
    h = ops.avg_pool2(h)
    flat_dim = net.fc_w.shape[0]
    h = ops.reshape(h, (-1, flat_dim) if batched else (flat_dim,))
    raw = ops.linear(h, net.fc_w, net.fc_b)
    G2 = net.grid_size ** 2
    disp = ops.scale(ops.tanh(raw), displacement_scale)
    return ops.reshape(disp, (-1, G2, 2) if batched else (G2, 2))


_grid_map_cache: dict = {}


def _grid_map(mode, grid_size, lam, height, width):
    """Constant (H*W, G^2) matrix taking control targets to grid coords."""
    key = (mode, grid_size, float(lam), height, width)
    hit = _grid_map_cache.get(key)
    if hit is not None:
        return hit
    lattice = control_lattice(grid_size)
    out_pts = tps.normalized_lattice(height, width)
    if mode == "tps":
        S = tps.solve_matrix(lattice, lam)                # (N+3, N)
        B = tps.tps_basis(out_pts, lattice)               # (HW, N+3)
        M = B @ S
    else:
        P = np.hstack([np.ones((len(lattice), 1)), lattice])
        Q = tps.lu_solve(tps.lu_factor(P.T @ P), P.T)     # (3, N)
        B = np.hstack([np.ones((len(out_pts), 1)), out_pts])
        M = B @ Q
    _grid_map_cache[key] = M
    return M


def stn_tps_forward(net, cfg, image):
    """Warp the image by the predicted control-point displacements.

    tps mode fits the spline at cfg.lam; affine mode takes the least-squares
    affine fit to the same correspondences. Differentiable end to end; with
    zero displacements the output equals the input bit-exactly."""
    image = as_tensor(image)
    batched = image.data.ndim == 4
    H, W = (image.data.shape[2], image.data.shape[3]) if batched else \
        (image.data.shape[1], image.data.shape[2])
    disp = localize(net, image, cfg.displacement_scale)
    lattice = control_lattice(cfg.grid_size)
    targets = ops.add(disp, lattice)
    M = _grid_map(cfg.mode, cfg.grid_size, cfg.lam, H, W)
    flat = ops.apply_linear_map(M, targets)
    grid = ops.reshape(flat, (-1, H, W, 2) if batched else (H, W, 2))
    return ops.grid_sample(image, grid, padding="zeros")
