"""Axis-aligned boxes: IoU, anchors, anchor labelling, box deltas and NMS.

Boxes are ``(x1, y1, x2, y2)`` in pixels, upper-left then lower-right corner.
Array-valued functions take ``(n, 4)`` float arrays; the scalar helpers accept
anything that unpacks to four numbers, including :class:`Box`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InputError, NumericError
from .validation import check_boxes

# Same clamp torchvision uses: keeps exp() of a width/height delta finite.
DELTA_CLAMP = math.log(1000.0 / 16)


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def of(cls, coords) -> "Box":
        x1, y1, x2, y2 = (float(c) for c in coords)
        box = cls(x1, y1, x2, y2)
        check_boxes(box)
        return box

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


class AnchorLabel(enum.IntEnum):
    IGNORE = -1
    NEGATIVE = 0
    POSITIVE = 1


class Regime(str, enum.Enum):
    DENSE = "dense"
    SPARSE = "sparse"


@dataclass(frozen=True)
class MatchPolicy:
    """IoU thresholds used to label anchors against ground truth."""

    pos_threshold: float = 0.5
    neg_threshold: float = 0.3
    regime: Regime = Regime.DENSE

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if not 0.0 < self.pos_threshold <= 1.0:
            raise InputError(f"pos_threshold must be in (0, 1]; got {self.pos_threshold}")
        if not 0.0 <= self.neg_threshold < 1.0:
            raise InputError(f"neg_threshold must be in [0, 1); got {self.neg_threshold}")
        if self.neg_threshold > self.pos_threshold:
            raise InputError("neg_threshold must not exceed pos_threshold")

    @classmethod
    def dense(cls) -> "MatchPolicy":
        return cls(0.5, 0.3, Regime.DENSE)

    @classmethod
    def sparse(cls) -> "MatchPolicy":
        return cls(0.3, 0.3, Regime.SPARSE)

    def to_dict(self) -> dict:
        return {
            "pos_threshold": self.pos_threshold,
            "neg_threshold": self.neg_threshold,
            "regime": self.regime.value,
        }


def iou(a, b) -> float:
    """IoU of two single boxes."""
    ax1, ay1, ax2, ay2 = Box.of(a)
    bx1, by1, bx2, by2 = Box.of(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def box_iou(boxes1, boxes2) -> np.ndarray:
    """Pairwise IoU matrix of shape ``(len(boxes1), len(boxes2))``."""
    a = check_boxes(boxes1, "boxes1")
    b = check_boxes(boxes2, "boxes2")
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def generate_anchors(map_h: int, map_w: int, stride: int, sizes: Sequence[int]) -> np.ndarray:
    """Square anchors centred on every feature-map cell.

    Order is row-major over cells, then over ``sizes``; the anchor for cell
    ``(i, j)`` and size index ``a`` sits at row ``(i * map_w + j) * len(sizes) + a``.
    """
    if min(map_h, map_w, stride) < 1:
        raise InputError("map_h, map_w and stride must be >= 1")
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.ndim != 1 or len(sizes) == 0 or np.any(sizes <= 0):
        raise InputError("sizes must be a nonempty list of positive values")
    cy, cx = np.meshgrid(
        (np.arange(map_h) + 0.5) * stride, (np.arange(map_w) + 0.5) * stride, indexing="ij"
    )
    cx = np.repeat(cx.ravel(), len(sizes))
    cy = np.repeat(cy.ravel(), len(sizes))
    half = np.tile(sizes, map_h * map_w) / 2
    return np.stack([cx - half, cy - half, cx + half, cy + half], axis=1)


def anchor_max_iou(anchors, gt) -> np.ndarray:
    """Best IoU of each anchor over ``gt`` (zeros when ``gt`` is empty)."""
    gt = check_boxes(gt, "gt")
    if len(gt) == 0:
        return np.zeros(len(anchors))
    return box_iou(anchors, gt).max(axis=1)


def match_anchors(anchors, gt, policy: MatchPolicy = MatchPolicy()) -> np.ndarray:
    """Label each anchor POSITIVE / NEGATIVE / IGNORE as ``AnchorLabel`` ints.

    The best anchor of every ground-truth box is always POSITIVE, ties going
    to the lowest anchor index, so that no object is left without a target.
    """
    anchors = check_boxes(anchors, "anchors")
    gt = check_boxes(gt, "gt")
    labels = np.full(len(anchors), int(AnchorLabel.NEGATIVE), dtype=np.int8)
    if len(gt) == 0 or len(anchors) == 0:
        return labels
    ious = box_iou(anchors, gt)
    best = ious.max(axis=1)
    labels[:] = AnchorLabel.IGNORE
    labels[best < policy.neg_threshold] = AnchorLabel.NEGATIVE
    labels[best >= policy.pos_threshold] = AnchorLabel.POSITIVE
    forced = ious.argmax(axis=0)
    forced = forced[ious[forced, np.arange(len(gt))] > 0]
    labels[forced] = AnchorLabel.POSITIVE
    return labels


def assigned_gt(anchors, gt) -> np.ndarray:
    """Index of the highest-IoU gt box per anchor; the forced best anchors win."""
    ious = box_iou(anchors, gt)
    idx = ious.argmax(axis=1)
    best = ious.argmax(axis=0)
    for g, a in enumerate(best):
        idx[a] = g
    return idx


def _centers(boxes):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode_boxes(anchors, gt) -> np.ndarray:
    """Row-wise regression targets ``(dx, dy, dw, dh)`` of ``gt`` w.r.t. ``anchors``."""
    anchors = check_boxes(anchors, "anchors")
    gt = check_boxes(gt, "gt")
    acx, acy, aw, ah = _centers(anchors)
    gcx, gcy, gw, gh = _centers(gt)
    return np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )


def decode_boxes(anchors, deltas, clamp: bool = True) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; size deltas are clamped when ``clamp``."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    acx, acy, aw, ah = _centers(anchors)
    dw, dh = deltas[:, 2], deltas[:, 3]
    if clamp:
        dw = np.minimum(dw, DELTA_CLAMP)
        dh = np.minimum(dh, DELTA_CLAMP)
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_box(anchor, gt) -> tuple[float, float, float, float]:
    return tuple(encode_boxes(Box.of(anchor), Box.of(gt))[0].tolist())


def decode_box(anchor, deltas) -> Box:
    with np.errstate(over="ignore", invalid="ignore"):
        out = decode_boxes(Box.of(anchor), deltas, clamp=False)[0]
    if not np.all(np.isfinite(out)) or out[2] <= out[0] or out[3] <= out[1]:
        raise NumericError(f"decoded box is not valid: {out.tolist()}")
    return Box(*out.tolist())


def clip_boxes(boxes, height: float, width: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, width)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, height)
    return boxes


def nms(boxes, scores, iou_thresh: float) -> list[int]:
    """Greedy non-maximum suppression.

    Boxes are visited by descending score (lower index first on ties); any box
    whose IoU with an already kept box exceeds ``iou_thresh`` is dropped.
    """
    boxes = check_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if len(scores) != len(boxes):
        raise InputError(f"{len(boxes)} boxes but {len(scores)} scores")
    order = np.argsort(-scores, kind="stable")
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.minimum(boxes[i, 2], boxes[rest, 2]) - np.maximum(boxes[i, 0], boxes[rest, 0])
        ih = np.minimum(boxes[i, 3], boxes[rest, 3]) - np.maximum(boxes[i, 1], boxes[rest, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        overlap = inter / (areas[i] + areas[rest] - inter)
        order = rest[overlap <= iou_thresh]
    return keep
