"""Convolutional block attention: channel gating from pooled descriptors
through a shared bottleneck MLP, then spatial gating from channel-pooled
planes through a 7x7 convolution. Both gates are sigmoids, applied
sequentially (channels first)."""

from dataclasses import dataclass

import numpy as np

from . import init, ops
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, as_tensor

SPATIAL_KERNEL_SIZE = 7


@dataclass
class CbamParams:
    """Shared-MLP channel gate (w0: C/r x C, w1: C x C/r) and the 7x7
    spatial gate kernel. The same MLP serves both pooled descriptors."""
    mlp_w0: Tensor
    mlp_w1: Tensor
    spatial_kernel: Tensor
    spatial_bias: Tensor
    reduction: int

    @property
    def channels(self):
        return self.mlp_w0.shape[1]

    def named_parameters(self, prefix="cbam"):
        return {f"{prefix}.mlp_w0": self.mlp_w0,
                f"{prefix}.mlp_w1": self.mlp_w1,
                f"{prefix}.spatial_kernel": self.spatial_kernel,
                f"{prefix}.spatial_bias": self.spatial_bias}


def init_cbam(rng, channels, reduction=4):
    if channels % reduction:
        raise ConfigurationError(
            f"channels {channels} not divisible by reduction {reduction}")
    hidden = channels // reduction
    k = SPATIAL_KERNEL_SIZE
    return CbamParams(
        mlp_w0=init.uniform_fan_in(rng, (hidden, channels), channels),
        mlp_w1=init.uniform_fan_in(rng, (channels, hidden), hidden),
        spatial_kernel=init.uniform_fan_in(rng, (1, 2, k, k), 2 * k * k),
        spatial_bias=init.zeros((1,)),
        reduction=reduction)


def _shared_mlp(params, v):
    h = ops.relu(ops.matmul(v, ops.transpose(params.mlp_w0, (1, 0))))
    return ops.matmul(h, ops.transpose(params.mlp_w1, (1, 0)))


def channel_attention(params, x):
    """Per-channel gate sigmoid(MLP(GAP) + MLP(GMP)); entries in (0,1)."""
    x = as_tensor(x)
    batched = x.data.ndim == 4
    C = x.data.shape[1] if batched else x.data.shape[0]
    if C != params.channels:
        raise DimensionError(f"input has {C} channels, params expect "
                             f"{params.channels}")
    gap = ops.global_pool(x, "average")
    gmp = ops.global_pool(x, "max")
    if not batched:
        gap = ops.reshape(gap, (1, C))
        gmp = ops.reshape(gmp, (1, C))
    gate = ops.sigmoid(ops.add(_shared_mlp(params, gap),
                               _shared_mlp(params, gmp)))
    return gate if batched else ops.reshape(gate, (C,))


def spatial_attention(params, x):
    """Per-pixel gate from 7x7 convolution of [channel-max; channel-mean]."""
    x = as_tensor(x)
    axis = 1 if x.data.ndim == 4 else 0
    pooled = ops.concat([ops.channel_pool(x, "max"),
                         ops.channel_pool(x, "average")], axis=axis)
    conv = ops.conv2d(pooled, params.spatial_kernel, params.spatial_bias,
                      stride=1, padding=SPATIAL_KERNEL_SIZE // 2)
    return ops.sigmoid(conv)


def cbam_forward(params, x):
    """Sequential gating: channels first, then space; shape preserved."""
    x = as_tensor(x)
    mc = channel_attention(params, x)
    if x.data.ndim == 4:
        mc = ops.reshape(mc, (x.data.shape[0], x.data.shape[1], 1, 1))
    else:
        mc = ops.reshape(mc, (x.data.shape[0], 1, 1))
    gated = ops.mul(x, mc)
    ms = spatial_attention(params, gated)
    return ops.mul(gated, ms)
