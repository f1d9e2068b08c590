"""Box algebra: IoU, offset encoding, anchor grids and non-maximum suppression.

Coordinates are continuous pixels with the origin at the image's top-left
corner. Boxes are closed regions in center form (cx, cy, w, h) with
area = w * h (no +1 convention). The COCO top-left [x, y, w, h] layout is
accepted and emitted only at module boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Box",
    "Anchor",
    "BoxDelta",
    "AnchorConfig",
    "iou",
    "encode",
    "decode",
    "generate_anchors",
    "nms",
    "LOG_EXTENT_CAP",
]

# |tw| and |th| are capped here when decoding so a wild regression output
# cannot produce a box with overflowing area.
LOG_EXTENT_CAP = math.log(1000.0)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in center form; extents must be positive."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box extents w={self.w}, h={self.h}")

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @classmethod
    def from_coco(cls, xywh) -> "Box":
        x, y, w, h = (float(v) for v in xywh)
        return cls(x + w / 2.0, y + h / 2.0, w, h)

    def to_coco(self) -> list[float]:
        return [self.x1, self.y1, self.w, self.h]

    def clip(self, width: float, height: float) -> "Box":
        """Intersect with the image rectangle [0,width] x [0,height]."""
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        if x2 <= x1 or y2 <= y1:
            raise ValueError("box lies entirely outside the image")
        return Box.from_corners(x1, y1, x2, y2)


@dataclass(frozen=True)
class Anchor:
    """A reference box tied to a pyramid level and its flat grid index."""

    box: Box
    level: int
    index: int


@dataclass(frozen=True)
class BoxDelta:
    """Dimensionless center offsets plus log-scale extent ratios."""

    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self):
        for v in (self.tx, self.ty, self.tw, self.th):
            if not math.isfinite(v):
                raise ValueError("non-finite box delta")


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor grid layout: one area scale per pyramid level, shared ratios.

    ratios are h/w; anchor extents are w = s/sqrt(ratio), h = s*sqrt(ratio)
    so every anchor's area is exactly s^2. The extended ratio set trades
    proposal cost for coverage of very elongated objects.
    """

    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    scales: tuple[float, ...] = (32.0, 64.0, 128.0, 256.0, 512.0)
    levels: tuple[int, ...] = (2, 3, 4, 5, 6)
    extended_ratios: bool = False

    EXTENDED_RATIOS = (1.0 / 3.0, 0.5, 1.0, 2.0, 3.0)

    def __post_init__(self):
        if len(self.scales) != len(self.levels):
            raise ValueError("need exactly one scale per level")
        if any(r <= 0 for r in self.ratios):
            raise ValueError("ratios must be positive")

    def effective_ratios(self) -> tuple[float, ...]:
        return self.EXTENDED_RATIOS if self.extended_ratios else self.ratios

    def scale_for(self, level: int) -> float:
        return self.scales[self.levels.index(level)]

    @staticmethod
    def stride_for(level: int) -> int:
        return 2 ** level


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def encode(anchor: Anchor | Box, target: Box) -> BoxDelta:
    """Offsets of target relative to the anchor: centers are normalized by
    the anchor extents, extents become log ratios."""
    a = anchor.box if isinstance(anchor, Anchor) else anchor
    return BoxDelta(
        tx=(target.cx - a.cx) / a.w,
        ty=(target.cy - a.cy) / a.h,
        tw=math.log(target.w / a.w),
        th=math.log(target.h / a.h),
    )


def decode(anchor: Anchor | Box, delta: BoxDelta) -> Box:
    """Inverse of encode; log-extent components are capped at log(1000)."""
    a = anchor.box if isinstance(anchor, Anchor) else anchor
    tw = min(max(delta.tw, -LOG_EXTENT_CAP), LOG_EXTENT_CAP)
    th = min(max(delta.th, -LOG_EXTENT_CAP), LOG_EXTENT_CAP)
    return Box(
        cx=delta.tx * a.w + a.cx,
        cy=delta.ty * a.h + a.cy,
        w=a.w * math.exp(tw),
        h=a.h * math.exp(th),
    )


def generate_anchors(level_shapes: dict[int, tuple[int, int]], cfg: AnchorConfig) -> list[Anchor]:
    """Tile anchors over feature grids.

    level_shapes maps pyramid level -> (H, W) of its feature map. Each cell
    centers len(ratios) anchors at ((col+0.5)*stride, (row+0.5)*stride);
    levels are emitted in ascending order, cells in row-major order.
    """
    ratios = cfg.effective_ratios()
    anchors: list[Anchor] = []
    index = 0
    for level in sorted(level_shapes):
        if level not in cfg.levels:
            raise ValueError(f"no anchor scale configured for level {level}")
        h, w = level_shapes[level]
        stride = cfg.stride_for(level)
        scale = cfg.scale_for(level)
        for row in range(h):
            cy = (row + 0.5) * stride
            for col in range(w):
                cx = (col + 0.5) * stride
                for ratio in ratios:
                    root = math.sqrt(ratio)
                    anchors.append(
                        Anchor(Box(cx, cy, scale / root, scale * root), level, index)
                    )
                    index += 1
    return anchors


def nms(
    boxes: list[Box],
    scores,
    iou_threshold: float,
    score_threshold: float = 0.5,
) -> list[int]:
    """Greedy non-maximum suppression.

    Drops boxes scoring below score_threshold, then repeatedly keeps the
    highest-scoring survivor and suppresses everything overlapping it above
    iou_threshold. Score ties resolve to the lower original index. Returns
    kept indices ordered by descending score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != scores.shape[0]:
        raise ValueError("boxes and scores must have equal length")
    if len(boxes) == 0:
        return []

    alive = np.flatnonzero(scores >= score_threshold)
    if alive.size == 0:
        return []
    # stable sort on negated scores: ties keep original index order
    order = alive[np.argsort(-scores[alive], kind="stable")]

    x1 = np.array([boxes[i].x1 for i in order])
    y1 = np.array([boxes[i].y1 for i in order])
    x2 = np.array([boxes[i].x2 for i in order])
    y2 = np.array([boxes[i].y2 for i in order])
    areas = (x2 - x1) * (y2 - y1)

    keep: list[int] = []
    active = np.ones(order.size, dtype=bool)
    for i in range(order.size):
        if not active[i]:
            continue
        keep.append(int(order[i]))
        rest = np.flatnonzero(active[i + 1 :]) + i + 1
        if rest.size == 0:
            continue
        ix = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        iy = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
        ious = inter / (areas[i] + areas[rest] - inter)
        active[rest[ious > iou_threshold]] = False
    return keep
