"""Neighboring-context features for a target region.

The neighbor feature is a softmax-weighted sum of neighbor features, with
weights from the dot-product affinity to the target. Neighbors are either the
top-k regions by IoU or a seeded random subset; averaged and max-pooled
top-k baselines are provided for comparison. Everything here is
parameter-free; the learned fully-connected baseline lives with the model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import ScoredRegion, boxes_to_array, iou_matrix, rank_by_overlap


class NoNeighborsError(ValueError):
    def __init__(self, msg="no neighbors"):
        super().__init__(msg)


@dataclass
class RegionFeatureSet:
    regions: list
    global_feature: np.ndarray
    _overlaps: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if len(self.regions) == 0:
            raise ValueError("a region feature set needs at least one region")
        self.global_feature = np.asarray(self.global_feature, dtype=np.float64)
        feats = []
        for n, r in enumerate(self.regions):
            if r.feature is None:
                raise ValueError(f"region {n} has no feature")
            feats.append(np.asarray(r.feature, dtype=np.float64))
        dims = {f.shape for f in feats}
        if len(dims) != 1 or feats[0].ndim != 1:
            raise ValueError(f"non-uniform region feature shapes {sorted(dims)}")
        if self.global_feature.shape != feats[0].shape:
            raise ValueError(
                f"global feature shape {self.global_feature.shape} != region feature shape {feats[0].shape}")
        self.features = np.stack(feats)
        if not np.isfinite(self.features).all() or not np.isfinite(self.global_feature).all():
            raise ValueError("non-finite feature values")

    @classmethod
    def from_arrays(cls, boxes, features, global_feature):
        from .geometry import BBox
        regions = [ScoredRegion(BBox.from_list(b), feature=f) for b, f in zip(boxes, features)]
        return cls(regions, global_feature)

    def __len__(self):
        return len(self.regions)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def overlaps(self) -> np.ndarray:
        if self._overlaps is None:
            boxes = boxes_to_array([r.box for r in self.regions])
            self._overlaps = iou_matrix(boxes, boxes)
        return self._overlaps


@dataclass
class NeighborGraph:
    target_index: int
    neighbor_indices: list
    weights: np.ndarray


def graph_weights(target_feature: np.ndarray, neighbor_features: np.ndarray) -> np.ndarray:
    logits = neighbor_features @ target_feature
    logits = logits - logits.max()
    w = np.exp(logits)
    # fsum is correctly rounded, so the weights do not depend on neighbor order
    return w / math.fsum(w)


def neighbor_weights(target: int, neighbors: Sequence[int], fset: RegionFeatureSet) -> NeighborGraph:
    neighbors = [int(j) for j in neighbors]
    if not neighbors:
        raise NoNeighborsError()
    if target in neighbors:
        raise ValueError(f"target {target} listed among its own neighbors")
    w = graph_weights(fset.features[target], fset.features[neighbors])
    return NeighborGraph(target, neighbors, w)


def select_neighbors(target: int, fset: RegionFeatureSet, k: int, selection: str = "nearest",
                     seed: int = 0) -> list:
    """Pick up to ``k`` neighbor indices (never the target itself).

    ``nearest`` ranks the other regions by IoU to the target (ties to the lower
    index); ``random`` draws a uniform sample without replacement from
    ``numpy.random.default_rng(seed)``.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    others = np.array([j for j in range(len(fset)) if j != target], dtype=np.int64)
    if others.size == 0:
        raise NoNeighborsError()
    if selection == "nearest":
        ranked = rank_by_overlap(fset.overlaps[target, others], k)
        return [int(others[i]) for i in ranked]
    if selection == "random":
        rng = np.random.default_rng(seed)
        picked = rng.choice(others.size, size=min(k, others.size), replace=False)
        return [int(others[i]) for i in picked]
    raise ValueError(f"unknown neighbor selection {selection!r}")


def neighbor_feature(target: int, fset: RegionFeatureSet, k: int, selection: str = "nearest",
                     seed: int = 0) -> np.ndarray:
    graph = neighbor_weights(target, select_neighbors(target, fset, k, selection, seed), fset)
    return aggregate(graph, fset)


def aggregate(graph: NeighborGraph, fset: RegionFeatureSet) -> np.ndarray:
    """Weighted sum of neighbor features, accumulated in ascending index order."""
    order = np.argsort(graph.neighbor_indices, kind="stable")
    out = np.zeros(fset.dim)
    for n in order:
        out += graph.weights[n] * fset.features[graph.neighbor_indices[n]]
    return out


def pooled_neighbor_feature(target: int, fset: RegionFeatureSet, k: int, mode: str = "avg") -> np.ndarray:
    feats = fset.features[select_neighbors(target, fset, k, "nearest")]
    if mode == "avg":
        return feats.mean(axis=0)
    if mode == "max":
        return feats.max(axis=0)
    raise ValueError(f"unknown pooling mode {mode!r}")


def sorted_neighbor_stack(target: int, fset: RegionFeatureSet, k: int) -> np.ndarray:
    """Concatenation of the k IoU-sorted neighbor features, zero-padded to ``k * d``."""
    out = np.zeros(k * fset.dim)
    feats = fset.features[select_neighbors(target, fset, k, "nearest")]
    out[:feats.size] = feats.ravel()
    return out
