"""Box arithmetic, greedy non-maximum suppression and IoU-ranked neighbors.

Boxes use continuous coordinates: area is ``(x2 - x1) * (y2 - y1)`` with no
``+1`` pixel convention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates {vals}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {vals}: need x2 > x1 and y2 > y1")

    @classmethod
    def from_list(cls, coords: Sequence[float]) -> "BBox":
        if len(coords) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(coords)}")
        return cls(*(float(c) for c in coords))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass
class ScoredRegion:
    """A box with a confidence, and optionally a caption and a feature vector."""

    box: BBox
    confidence: float = 1.0
    caption: Optional[list] = None
    feature: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([b.as_list() for b in boxes], dtype=np.float64)


def iou_matrix(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``[N, 4]`` and ``[M, 4]`` arrays of x1, y1, x2, y2."""
    boxes1 = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    boxes2 = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(boxes1[:, None, 2], boxes2[None, :, 2]) - np.maximum(boxes1[:, None, 0], boxes2[None, :, 0])
    ih = np.minimum(boxes1[:, None, 3], boxes2[None, :, 3]) - np.maximum(boxes1[:, None, 1], boxes2[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area1 = (boxes1[:, 2] - boxes1[:, 0]) * (boxes1[:, 3] - boxes1[:, 1])
    area2 = (boxes2[:, 2] - boxes2[:, 0]) * (boxes2[:, 3] - boxes2[:, 1])
    union = area1[:, None] + area2[None, :] - inter
    return inter / union


def confidence_order(confidences: Sequence[float]) -> np.ndarray:
    """Indices by descending confidence; equal confidences keep input order."""
    return np.argsort(-np.asarray(confidences, dtype=np.float64), kind="stable")


def nms_indices(boxes: np.ndarray, confidences: Sequence[float], iou_threshold: float,
                max_keep: Optional[int] = None) -> list:
    """Greedy suppression; returns kept input indices in descending confidence."""
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = confidence_order(confidences)
    keep = []
    limit = len(order) if max_keep is None else max_keep
    while order.size > 0 and len(keep) < limit:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        ovr = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][ovr < iou_threshold]
    return keep


def nms(regions: Sequence[ScoredRegion], iou_threshold: float, max_keep: Optional[int] = None) -> list:
    if len(regions) == 0:
        return []
    boxes = boxes_to_array([r.box for r in regions])
    keep = nms_indices(boxes, [r.confidence for r in regions], iou_threshold, max_keep)
    return [regions[i] for i in keep]


def top_k_neighbors(target: ScoredRegion, pool: Sequence[ScoredRegion], k: int) -> list:
    """Indices into ``pool`` of the ``k`` highest-IoU regions to ``target``.

    Zero-overlap regions stay eligible so the neighbor count is ``min(k, len(pool))``.
    Ties go to the lower index.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(pool) == 0:
        return []
    overlaps = iou_matrix(boxes_to_array([target.box]), boxes_to_array([r.box for r in pool]))[0]
    return rank_by_overlap(overlaps, k)


def rank_by_overlap(overlaps: np.ndarray, k: int) -> list:
    order = np.argsort(-overlaps, kind="stable")
    return [int(i) for i in order[:k]]
