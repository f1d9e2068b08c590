"""Channel and spatial feature gating blocks.

All blocks are pure functions of (input, params) mapping (C,H,W) to
(C,H,W); the gates go through a sigmoid so every multiplier lies strictly
in (0,1). With all parameters zero each gate is exactly 0.5, which gives
the handy closed forms 0.5*F for a single gate and 0.25*F for the
channel+spatial cascade.

Defaults the surrounding literature settles and this config exposes:
MLP reduction ratio r (default 16), ReLU between the MLP layers, and the
adaptive kernel rule for the cross-channel 1-D convolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat, conv1d, conv2d, linear, pool, relu, sigmoid

__all__ = [
    "AttentionConfig",
    "ChannelAttentionParams",
    "SpatialAttentionParams",
    "CBAMParams",
    "SEParams",
    "ECAParams",
    "channel_attention",
    "spatial_attention",
    "cbam",
    "se_block",
    "eca_block",
    "make_attention",
    "apply_attention",
    "eca_kernel_size",
    "init_uniform",
]

VARIANTS = ("none", "se", "eca", "cbam")


@dataclass(frozen=True)
class AttentionConfig:
    """Per-block gating configuration.

    channels: C of the map the block gates.
    reduction: bottleneck ratio r of the squeeze MLP; must divide C.
    variant: one of "none", "se", "eca", "cbam".
    eca_kernel: odd kernel size for the cross-channel conv, or "adaptive".
    init: "fan_in_uniform" (symmetric uniform scaled by fan-in, keeps the
    sigmoid pre-activations near 0) or "zeros".
    """

    channels: int
    reduction: int = 16
    variant: str = "cbam"
    eca_kernel: int | str = "adaptive"
    init: str = "fan_in_uniform"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant in ("se", "cbam") and self.channels % self.reduction != 0:
            raise ValueError(f"channels {self.channels} not divisible by reduction {self.reduction}")
        if isinstance(self.eca_kernel, int) and self.eca_kernel % 2 == 0:
            raise ValueError("eca kernel must be odd")


def init_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, scheme: str) -> Tensor:
    if scheme == "zeros":
        return Tensor(np.zeros(shape), requires_grad=True)
    if scheme == "fan_in_uniform":
        bound = 1.0 / math.sqrt(max(fan_in, 1))
    elif scheme == "he_uniform":
        # variance 2/fan_in keeps activation scale steady across relu convs
        bound = math.sqrt(6.0 / max(fan_in, 1))
    elif scheme == "near_zero_uniform":
        # final prediction layers start near-neutral so the first updates
        # stay gentle instead of fighting confident random logits
        bound = 0.01
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def eca_kernel_size(channels: int) -> int:
    """Adaptive odd kernel from the channel count: grows like log2(C)/2,
    bumped to the next odd number, never below 3."""
    t = int(abs(math.log2(channels) + 1.0) / 2.0)
    k = t if t % 2 else t + 1
    return max(k, 3)


# -- parameter containers ------------------------------------------------------


@dataclass
class ChannelAttentionParams:
    """Shared two-layer MLP (C -> C/r -> C) applied to both pooled vectors."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class SpatialAttentionParams:
    """One 7x7 conv mapping the stacked [avg, max] channel maps to a gate."""

    w: Tensor  # (1, 2, 7, 7)
    b: Tensor  # (1,)


@dataclass
class CBAMParams:
    cam: ChannelAttentionParams
    sam: SpatialAttentionParams


@dataclass
class SEParams:
    """Squeeze-excitation MLP, same C -> C/r -> C layout as the channel gate."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ECAParams:
    """Cross-channel 1-D conv weights; no bias, matching the usual form."""

    w: Tensor

    @property
    def kernel(self) -> int:
        return self.w.shape[0]


def _init_mlp(cfg: AttentionConfig, rng: np.random.Generator):
    c, r = cfg.channels, cfg.reduction
    mid = c // r
    if mid < 1:
        raise ValueError(f"reduction {r} leaves no hidden units for {c} channels")
    return (
        init_uniform((mid, c), c, rng, cfg.init),
        init_uniform((mid,), c, rng, cfg.init),
        init_uniform((c, mid), mid, rng, cfg.init),
        init_uniform((c,), mid, rng, cfg.init),
    )


def init_channel_attention(cfg: AttentionConfig, rng: np.random.Generator) -> ChannelAttentionParams:
    return ChannelAttentionParams(*_init_mlp(cfg, rng))


def init_spatial_attention(cfg: AttentionConfig, rng: np.random.Generator) -> SpatialAttentionParams:
    return SpatialAttentionParams(
        w=init_uniform((1, 2, 7, 7), 2 * 49, rng, cfg.init),
        b=init_uniform((1,), 2 * 49, rng, cfg.init),
    )


def init_se(cfg: AttentionConfig, rng: np.random.Generator) -> SEParams:
    return SEParams(*_init_mlp(cfg, rng))


def init_eca(cfg: AttentionConfig, rng: np.random.Generator) -> ECAParams:
    k = eca_kernel_size(cfg.channels) if cfg.eca_kernel == "adaptive" else int(cfg.eca_kernel)
    return ECAParams(w=init_uniform((k,), k, rng, cfg.init))


def make_attention(cfg: AttentionConfig, rng: np.random.Generator):
    """Build the parameter container for cfg.variant (None for "none")."""
    if cfg.variant == "none":
        return None
    if cfg.variant == "cbam":
        return CBAMParams(init_channel_attention(cfg, rng), init_spatial_attention(cfg, rng))
    if cfg.variant == "se":
        return init_se(cfg, rng)
    return init_eca(cfg, rng)


# -- forward passes ------------------------------------------------------------


def _mlp(vec: Tensor, p) -> Tensor:
    return linear(relu(linear(vec, p.w1, p.b1)), p.w2, p.b2)


def channel_attention(x: Tensor, params: ChannelAttentionParams) -> Tensor:
    """Gate channels by sigmoid(MLP(avg pool) + MLP(max pool))."""
    c = x.shape[0]
    avg = pool(x, "spatial", "avg").reshape(c)
    mx = pool(x, "spatial", "max").reshape(c)
    gate = sigmoid(_mlp(avg, params) + _mlp(mx, params)).reshape(c, 1, 1)
    return x * gate


def spatial_attention(x: Tensor, params: SpatialAttentionParams) -> Tensor:
    """Gate positions by a 7x7 conv over the stacked channel avg/max maps."""
    stacked = concat([pool(x, "channel", "avg"), pool(x, "channel", "max")], axis=0)
    gate = sigmoid(conv2d(stacked, params.w, params.b, stride=1, padding=3))
    return x * gate


def cbam(x: Tensor, params: CBAMParams) -> Tensor:
    """Channel gate followed by spatial gate."""
    return spatial_attention(channel_attention(x, params.cam), params.sam)


def se_block(x: Tensor, params: SEParams) -> Tensor:
    """Channel gate from the spatially averaged descriptor alone."""
    c = x.shape[0]
    squeezed = pool(x, "spatial", "avg").reshape(c)
    gate = sigmoid(_mlp(squeezed, params)).reshape(c, 1, 1)
    return x * gate


def eca_block(x: Tensor, params: ECAParams) -> Tensor:
    """Channel gate from a 1-D conv sliding across the pooled channel vector."""
    c = x.shape[0]
    squeezed = pool(x, "spatial", "avg").reshape(c)
    k = params.kernel
    gate = sigmoid(conv1d(squeezed, params.w, padding=(k - 1) // 2)).reshape(c, 1, 1)
    return x * gate


def apply_attention(x: Tensor, params) -> Tensor:
    """Dispatch on the parameter container type; None is the identity."""
    if params is None:
        return x
    if isinstance(params, CBAMParams):
        return cbam(x, params)
    if isinstance(params, SEParams):
        return se_block(x, params)
    if isinstance(params, ECAParams):
        return eca_block(x, params)
    raise TypeError(f"unknown attention params {type(params).__name__}")
