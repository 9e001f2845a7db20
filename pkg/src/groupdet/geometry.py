"""Box representations, conversions, overlap measures, and flip transforms.

Two interchangeable encodings are used throughout:
  * normalized center form (cx, cy, w, h), fractions of image size in [0, 1]
  * absolute corner form (x1, y1, x2, y2) in pixels

Scalar ops work on the dataclasses below in double precision. The tensor
variants at the bottom operate on [..., 4] torch tensors and are used inside
the model and the losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


def _clamp01(v: float) -> float:
    return 0.0 if v < 0.0 else (1.0 if v > 1.0 else v)


@dataclass(frozen=True)
class BoxN:
    """Normalized center-form box. Coordinates are clamped to [0, 1] on construction."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        object.__setattr__(self, "cx", _clamp01(float(self.cx)))
        object.__setattr__(self, "cy", _clamp01(float(self.cy)))
        object.__setattr__(self, "w", _clamp01(float(self.w)))
        object.__setattr__(self, "h", _clamp01(float(self.h)))


@dataclass(frozen=True)
class BoxA:
    """Absolute corner-form box in pixels; corners must be ordered."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"inverted box corners: {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class Detection:
    box: BoxA
    category_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0, 1]: {self.score}")


# A per-image detection set is a plain list of Detection entries.
DetectionSet = list


def to_absolute(b: BoxN, width: float, height: float) -> BoxA:
    """Convert a normalized box to absolute pixels."""
    if width <= 0 or height <= 0:
        raise ValueError(f"image dimensions must be positive, got {width}x{height}")
    return BoxA(
        (b.cx - b.w / 2.0) * width,
        (b.cy - b.h / 2.0) * height,
        (b.cx + b.w / 2.0) * width,
        (b.cy + b.h / 2.0) * height,
    )


def to_normalized(b: BoxA, width: float, height: float) -> BoxN:
    """Inverse of to_absolute up to rounding."""
    if width <= 0 or height <= 0:
        raise ValueError(f"image dimensions must be positive, got {width}x{height}")
    return BoxN(
        (b.x1 + b.x2) / 2.0 / width,
        (b.y1 + b.y2) / 2.0 / height,
        (b.x2 - b.x1) / width,
        (b.y2 - b.y1) / height,
    )


def iou(a: BoxA, b: BoxA) -> float:
    """Intersection over union; degenerate pairs (zero union) return 0."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: BoxA, b: BoxA) -> float:
    """Generalized IoU: iou minus the empty fraction of the smallest enclosing box."""
    ew = max(a.x2, b.x2) - min(a.x1, b.x1)
    eh = max(a.y2, b.y2) - min(a.y1, b.y1)
    enclosing = ew * eh
    inter_w = min(a.x2, b.x2) - max(a.x1, b.x1)
    inter_h = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(inter_w, 0.0) * max(inter_h, 0.0)
    union = a.area + b.area - inter
    v = iou(a, b)
    if enclosing <= 0.0:
        return v
    return v - (enclosing - union) / enclosing


def hflip(b: BoxA, width: float) -> BoxA:
    """Mirror a box horizontally inside an image of the given width."""
    return BoxA(width - b.x2, b.y1, width - b.x1, b.y2)


# ---------------------------------------------------------------------------
# Tensor variants, [..., 4] layout.


def box_cxcywh_to_xyxy(t: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = t.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(t: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = t.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def box_iou_matrix(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Pairwise IoU and union for xyxy boxes a [N, 4] and b [M, 4].

    Zero-union pairs get IoU 0 exactly (no epsilon smoothing).
    """
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    safe = torch.where(union > 0, union, torch.ones_like(union))
    out = torch.where(union > 0, inter / safe, torch.zeros_like(union))
    return out, union


def generalized_box_iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise GIoU for xyxy boxes a [N, 4] and b [M, 4]."""
    v, union = box_iou_matrix(a, b)
    lt = torch.min(a[:, None, :2], b[None, :, :2])
    rb = torch.max(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    enclosing = wh[..., 0] * wh[..., 1]
    safe = torch.where(enclosing > 0, enclosing, torch.ones_like(enclosing))
    penalty = torch.where(enclosing > 0, (enclosing - union) / safe, torch.zeros_like(enclosing))
    return v - penalty
