"""Quantization-free region feature extraction via bilinear sampling.

A region's box is mapped into feature coordinates by dividing by the
feature stride -- never rounded -- and split into a p x p grid of bins.
Each bin is read at its four quarter points, every sample bilinearly
interpolated from the four surrounding cells (cell centers sit at
integer + 0.5, reads outside the map return 0), and the bin keeps the max
of its four samples. Mean aggregation is available behind the config for
comparison. The max backward follows the first-winner tie rule used by
the rest of the tensor core.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boxes import Box
from .tensor import Tensor, _accum

__all__ = ["ROI", "ROIAlignConfig", "assign_level", "roi_align"]

# bin-relative (dy, dx) sample offsets; order fixes the max tie rule
_SAMPLE_OFFSETS = ((0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75))


@dataclass(frozen=True)
class ROI:
    """A region routed to a pyramid level within one image."""

    box: Box
    image_id: int = 0
    level: int = 2


@dataclass(frozen=True)
class ROIAlignConfig:
    """Output grid size and per-bin aggregation; 4 samples per bin, always."""

    resolution: int = 7
    aggregation: str = "max"

    def __post_init__(self):
        if self.resolution < 1:
            raise ValueError("resolution must be >= 1")
        if self.aggregation not in ("max", "avg"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


def assign_level(box: Box, k0: int = 4) -> int:
    """Route a region to a pyramid level by its scale.

    level = clamp(floor(k0 + log2(sqrt(area)/224)), 2, 5): a 224-pixel
    square lands on level k0, halving the extent drops one level.
    """
    level = math.floor(k0 + math.log2(math.sqrt(box.area) / 224.0))
    return min(max(level, 2), 5)


def roi_align(feature: Tensor, stride: float, box: Box, cfg: ROIAlignConfig) -> Tensor:
    """Extract a (C, p, p) grid from a (C, H, W) feature map for one region.

    box is in image coordinates; stride converts it to feature coordinates.
    """
    c, h, w = feature.shape
    p = cfg.resolution
    x1, y1 = box.x1 / stride, box.y1 / stride
    bw, bh = box.w / stride / p, box.h / stride / p
    if bw <= 0 or bh <= 0:
        raise ValueError("zero-area region")

    # sample coordinates, shape (4, p, p)
    rows = np.arange(p)
    sy = np.stack([y1 + (rows[:, None] + dy) * bh + np.zeros(p) for dy, _ in _SAMPLE_OFFSETS])
    sx = np.stack([x1 + (rows[None, :] + dx) * bw + np.zeros((p, 1)) for _, dx in _SAMPLE_OFFSETS])

    # bilinear neighborhoods relative to cell centers at integer + 0.5
    u = sx - 0.5
    v = sy - 0.5
    x0 = np.floor(u).astype(np.intp)
    y0 = np.floor(v).astype(np.intp)
    fx = u - x0
    fy = v - y0

    corner_ix, corner_iy, corner_w = [], [], []
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        cxi = x0 + dx
        cyi = y0 + dy
        valid = (cxi >= 0) & (cxi < w) & (cyi >= 0) & (cyi < h)
        corner_ix.append(np.clip(cxi, 0, w - 1))
        corner_iy.append(np.clip(cyi, 0, h - 1))
        corner_w.append(np.where(valid, wgt, 0.0))

    samples = np.zeros((4, c, p, p))
    for iy, ix, wgt in zip(corner_iy, corner_ix, corner_w):
        samples += feature.data[:, iy, ix].transpose(1, 0, 2, 3) * wgt[:, None]

    if cfg.aggregation == "max":
        arg = samples.argmax(axis=0)
        out = np.take_along_axis(samples, arg[None], axis=0)[0]
    else:
        arg = None
        out = samples.mean(axis=0)

    def bwd(g, feat=feature, arg=arg):
        if not feat.requires_grad:
            return
        dfeat = np.zeros_like(feat.data)
        chan = np.arange(c)[:, None, None]
        for s in range(4):
            gsel = g * (arg == s) if arg is not None else g / 4.0
            for iy, ix, wgt in zip(corner_iy, corner_ix, corner_w):
                np.add.at(dfeat, (chan, iy[s][None], ix[s][None]), gsel * wgt[s][None])
        _accum(feat, dfeat)

    return Tensor(out, _parents=(feature,), _backward=bwd)
