"""Dense-captioning metrics: METEOR-lite, joint IoU/METEOR AP and the mAP grid.

A prediction is assigned to the ground truth it overlaps most (ties to the
lower index). It counts as a true positive when that ground truth is still
unclaimed and both the IoU and the METEOR gate pass; otherwise it is a false
positive. Fixing the assignment before gating keeps AP monotone in both
thresholds. AP is the area under the monotone precision envelope.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import ScoredRegion, boxes_to_array, iou_matrix, nms

IOU_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)
METEOR_THRESHOLDS = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25)
REPORT_VERSION = 1


@dataclass(frozen=True)
class EvalGrid:
    iou_thresholds: tuple = IOU_THRESHOLDS
    meteor_thresholds: tuple = METEOR_THRESHOLDS

    def __post_init__(self):
        for name in ("iou_thresholds", "meteor_thresholds"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals or any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} must be non-empty and strictly increasing")
            object.__setattr__(self, name, vals)


@dataclass(frozen=True)
class MeteorParams:
    alpha: float = 0.9
    beta: float = 3.0
    gamma: float = 0.5
    stemming: bool = True

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.gamma <= 1.0 and self.beta > 0.0):
            raise ValueError(f"invalid METEOR parameters {self}")


@lru_cache(maxsize=None)
def _stemmer():
    from nltk.stem.porter import PorterStemmer
    return PorterStemmer()


@lru_cache(maxsize=65536)
def stem(word: str) -> str:
    return _stemmer().stem(word)


def align(candidate: Sequence[str], reference: Sequence[str], stemming: bool = True) -> list:
    """Unigram alignment as ``(cand_idx, ref_idx)`` pairs sorted by candidate position.

    Exact matches are taken first, then stem matches; each stage walks the
    candidate left to right and takes the leftmost free reference token.
    """
    pairs = []
    used_c, used_r = set(), set()
    stages = [lambda w: w]
    if stemming:
        stages.append(stem)
    for key in stages:
        ref_keys = [key(w) for w in reference]
        for i, w in enumerate(candidate):
            if i in used_c:
                continue
            kw = key(w)
            for j, rk in enumerate(ref_keys):
                if j not in used_r and rk == kw:
                    pairs.append((i, j))
                    used_c.add(i)
                    used_r.add(j)
                    break
    pairs.sort()
    return pairs


def count_chunks(pairs: Sequence[tuple]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_single(candidate, reference, params: MeteorParams = MeteorParams()) -> float:
    if not candidate or not reference:
        return 0.0
    pairs = align(candidate, reference, params.stemming)
    m = len(pairs)
    if m == 0:
        return 0.0
    P = m / len(candidate)
    R = m / len(reference)
    fmean = P * R / (params.alpha * P + (1.0 - params.alpha) * R)
    penalty = params.gamma * (count_chunks(pairs) / m) ** params.beta
    return fmean * (1.0 - penalty)


def meteor_lite(candidate, references, params: MeteorParams = MeteorParams()) -> float:
    """Best score of ``candidate`` over the references (exact + stem modules only)."""
    candidate = list(candidate or [])
    if not candidate:
        return 0.0
    return max((meteor_single(candidate, list(r), params) for r in references), default=0.0)


# --- average precision ------------------------------------------------------

def envelope_ap(tp: np.ndarray, n_gt: int) -> float:
    """All-points AP over a confidence-sorted TP indicator sequence."""
    if n_gt <= 0:
        raise ValueError("average precision needs at least one ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    drec = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(drec * env))


@dataclass
class _ImageMatches:
    confidence: np.ndarray   # per prediction, input order
    best_gt: np.ndarray      # argmax-IoU ground truth, -1 when there is none
    best_iou: np.ndarray
    meteor: np.ndarray       # METEOR of the caption against that ground truth
    order: np.ndarray        # prediction indices by descending confidence
    n_gt: int


def _match_image(preds: Sequence[ScoredRegion], gts: Sequence[ScoredRegion], params: MeteorParams) -> _ImageMatches:
    conf = np.array([p.confidence for p in preds], dtype=np.float64)
    n = len(preds)
    best_gt = np.full(n, -1, dtype=np.int64)
    best_iou = np.zeros(n)
    met = np.zeros(n)
    if n and gts:
        ov = iou_matrix(boxes_to_array([p.box for p in preds]), boxes_to_array([g.box for g in gts]))
        best_gt = ov.argmax(axis=1)
        best_iou = ov[np.arange(n), best_gt]
        for i, p in enumerate(preds):
            met[i] = meteor_lite(p.caption, [gts[best_gt[i]].caption or []], params)
    return _ImageMatches(conf, best_gt, best_iou, met, np.argsort(-conf, kind="stable"), len(gts))


def _tp_flags(m: _ImageMatches, t_iou: float, t_meteor: float) -> np.ndarray:
    flags = np.zeros(m.confidence.size)
    claimed = set()
    for i in m.order:
        g = int(m.best_gt[i])
        if g < 0 or g in claimed:
            continue
        if m.best_iou[i] >= t_iou and m.meteor[i] >= t_meteor:
            flags[i] = 1.0
            claimed.add(g)
    return flags


def _pooled_ap(matches: Sequence[_ImageMatches], t_iou: float, t_meteor: float) -> float:
    n_gt = sum(m.n_gt for m in matches)
    if n_gt == 0:
        raise ValueError("average precision needs at least one ground truth")
    conf = np.concatenate([m.confidence for m in matches]) if matches else np.zeros(0)
    if conf.size == 0:
        return 0.0
    tp = np.concatenate([_tp_flags(m, t_iou, t_meteor) for m in matches])
    order = np.argsort(-conf, kind="stable")
    return envelope_ap(tp[order], n_gt)


def average_precision(predictions: Sequence[ScoredRegion], ground_truths: Sequence[ScoredRegion],
                      t_iou: float, t_meteor: float, params: MeteorParams = MeteorParams()) -> float:
    """Joint localization/language AP for a single image."""
    if not ground_truths:
        raise ValueError("average precision needs at least one ground truth")
    return _pooled_ap([_match_image(list(predictions), list(ground_truths), params)], t_iou, t_meteor)


# --- whole-split report -------------------------------------------------------

@dataclass
class EvalReport:
    ap: list                 # [len(iou_thresholds)][len(meteor_thresholds)]
    map: float
    meteor: float
    n_predictions: int
    n_ground_truths: int
    grid: EvalGrid = field(default_factory=EvalGrid)

    def to_dict(self) -> dict:
        return {
            "format": "ctxcap-eval-report",
            "version": REPORT_VERSION,
            "iou_thresholds": list(self.grid.iou_thresholds),
            "meteor_thresholds": list(self.grid.meteor_thresholds),
            "ap": self.ap,
            "map": self.map,
            "meteor": self.meteor,
            "n_predictions": self.n_predictions,
            "n_ground_truths": self.n_ground_truths,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        head = "IoU\\METEOR " + " ".join(f"{t:>6.2f}" for t in self.grid.meteor_thresholds)
        rows = [head]
        for t, row in zip(self.grid.iou_thresholds, self.ap):
            rows.append(f"{t:>10.2f} " + " ".join(f"{v:>6.4f}" for v in row))
        rows.append(f"mAP = {self.map:.6f}   METEOR = {self.meteor:.6f}   "
                    f"predictions = {self.n_predictions}   ground truths = {self.n_ground_truths}")
        return "\n".join(rows) + "\n"


def _check_keys(predictions: Mapping, ground_truths: Mapping):
    missing_pred = sorted(set(ground_truths) - set(predictions), key=str)
    missing_gt = sorted(set(predictions) - set(ground_truths), key=str)
    if missing_pred or missing_gt:
        raise KeyError(f"image keys differ: no predictions for {missing_pred}, no ground truth for {missing_gt}")


def apply_protocol(regions: Sequence[ScoredRegion], first_nms: float = 0.7, keep: int = 300,
                   second_nms: float = 0.3) -> list:
    """Top ``keep`` after NMS at ``first_nms``, then another NMS round at ``second_nms``."""
    return nms(nms(list(regions), first_nms, keep), second_nms)


def language_meteor(predictions: Mapping, ground_truths: Mapping, params: MeteorParams = MeteorParams()) -> float:
    """Mean METEOR of each prediction against every ground-truth caption of its image."""
    _check_keys(predictions, ground_truths)
    scores = []
    for key in predictions:
        refs = [g.caption for g in ground_truths[key] if g.caption]
        scores += [meteor_lite(p.caption, refs, params) for p in predictions[key]]
    return float(np.mean(scores)) if scores else 0.0


def dense_map(predictions: Mapping, ground_truths: Mapping, grid: EvalGrid = EvalGrid(),
              params: MeteorParams = MeteorParams(), use_nms: bool = True) -> EvalReport:
    """AP over the (IoU, METEOR) grid, pooled across images, plus language-only METEOR.

    ``use_nms=False`` scores predictions as given (ground-truth-box mode).
    """
    _check_keys(predictions, ground_truths)
    keys = sorted(predictions, key=str)
    preds = {k: (apply_protocol(predictions[k]) if use_nms else list(predictions[k])) for k in keys}
    gts = {k: [g for g in ground_truths[k] if g.caption] for k in keys}
    matches = [_match_image(preds[k], gts[k], params) for k in keys]
    ap = [[_pooled_ap(matches, ti, tm) for tm in grid.meteor_thresholds] for ti in grid.iou_thresholds]
    flat = [v for row in ap for v in row]
    return EvalReport(
        ap=ap,
        map=float(np.mean(flat)),
        meteor=language_meteor(preds, gts, params),
        n_predictions=sum(len(v) for v in preds.values()),
        n_ground_truths=sum(len(v) for v in gts.values()),
        grid=grid,
    )
