"""Dataset records and their JSONL serialization.

One image per line::

    {"image_id": ..., "width": W, "height": H, "global_feature": [...],
     "regions": [{"box": [x1, y1, x2, y2], "caption": "a b c", "feature": [...], "meta": {...}}],
     "proposals": [{"box": [...], "feature": [...], "label": 1, "gt": 0}]}

The optional first line ``{"format": "ctxcap-dataset", ...}`` is a header; when
it names a ``feature_file``, features are ``{"offset": n, "dim": d}`` references
into that flat little-endian float64 sidecar.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import BBox

DATASET_FORMAT = "ctxcap-dataset"
DATASET_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class RegionRecord:
    box: BBox
    feature: np.ndarray
    caption: Optional[list] = None
    meta: dict = field(default_factory=dict)


@dataclass
class ProposalRecord:
    box: BBox
    feature: np.ndarray
    label: int
    gt: int = -1


@dataclass
class DatasetRecord:
    image_id: str
    width: float
    height: float
    global_feature: np.ndarray
    regions: list
    proposals: list = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        return int(self.global_feature.shape[0])


def _num_list(v):
    return [float(x) for x in v]


class _Sidecar:
    def __init__(self, path: Optional[Path]):
        self.path = path
        self.data = None
        self.out = []
        self.offset = 0

    def read(self, ref, where):
        if self.path is None:
            raise DatasetError(f"{where}: feature reference but no feature_file in the header")
        if self.data is None:
            self.data = np.fromfile(self.path, dtype="<f8")
        off, dim = int(ref["offset"]), int(ref["dim"])
        if off < 0 or off + dim > self.data.size:
            raise DatasetError(f"{where}: feature reference [{off}, {off + dim}) outside {self.path}")
        return self.data[off:off + dim].astype(np.float64)

    def write(self, vec):
        vec = np.asarray(vec, dtype="<f8")
        ref = {"offset": self.offset, "dim": int(vec.size)}
        self.out.append(vec)
        self.offset += vec.size
        return ref


def _feature(value, where, sidecar: _Sidecar, dim=None):
    if isinstance(value, dict):
        vec = sidecar.read(value, where)
    else:
        if not isinstance(value, list):
            raise DatasetError(f"{where}: feature must be a list of numbers")
        vec = np.array(_num_list(value), dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0 or not np.isfinite(vec).all():
        raise DatasetError(f"{where}: feature must be a non-empty finite vector")
    if dim is not None and vec.size != dim:
        raise DatasetError(f"{where}: feature dimension {vec.size} != {dim}")
    return vec


def _box(value, where, width, height):
    try:
        box = BBox.from_list(value)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: {exc}") from None
    if box.x1 < 0 or box.y1 < 0 or box.x2 > width or box.y2 > height:
        raise DatasetError(f"{where}: box {box.as_list()} exceeds image extent {width}x{height}")
    return box


def _caption(value, where):
    if value is None:
        return None
    if isinstance(value, str):
        return value.lower().split()
    if isinstance(value, list) and all(isinstance(t, str) for t in value):
        return [t.lower() for t in value]
    raise DatasetError(f"{where}: caption must be a string or a list of strings")


def parse_record(obj: dict, where: str, sidecar: _Sidecar, max_words: Optional[int] = None) -> DatasetRecord:
    try:
        image_id = str(obj["image_id"])
        width, height = float(obj["width"]), float(obj["height"])
        gfeat = _feature(obj["global_feature"], f"{where}: global_feature", sidecar)
        dim = gfeat.size
        regions = []
        for n, r in enumerate(obj.get("regions", [])):
            rw = f"{where}: regions[{n}]"
            cap = _caption(r.get("caption"), f"{rw}.caption")
            if cap is not None and max_words is not None and len(cap) > max_words:
                cap = None
            regions.append(RegionRecord(
                box=_box(r["box"], f"{rw}.box", width, height),
                feature=_feature(r["feature"], f"{rw}.feature", sidecar, dim),
                caption=cap,
                meta=dict(r.get("meta", {})),
            ))
        proposals = []
        for n, p in enumerate(obj.get("proposals", [])):
            pw = f"{where}: proposals[{n}]"
            label = int(p["label"])
            if label not in (0, 1):
                raise DatasetError(f"{pw}.label: must be 0 or 1")
            gt = int(p.get("gt", -1))
            if label == 1 and not (0 <= gt < len(regions)):
                raise DatasetError(f"{pw}.gt: positive proposal needs a valid region index")
            proposals.append(ProposalRecord(_box(p["box"], f"{pw}.box", width, height),
                                            _feature(p["feature"], f"{pw}.feature", sidecar, dim), label, gt))
    except KeyError as exc:
        raise DatasetError(f"{where}: missing field {exc.args[0]!r}") from None
    return DatasetRecord(image_id, width, height, gfeat, regions, proposals)


def load_dataset(path, max_words: Optional[int] = None) -> list:
    """Parse and validate a JSONL dataset.

    Captions are lowercased; with ``max_words``, longer captions are dropped
    (their region stays as context but is no longer a caption target).
    """
    path = Path(path)
    records = []
    sidecar = _Sidecar(None)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"{where}: expected a JSON object")
            if obj.get("format") == DATASET_FORMAT:
                if int(obj.get("version", 0)) != DATASET_VERSION:
                    raise DatasetError(f"{where}: unsupported dataset version {obj.get('version')}")
                if obj.get("feature_file"):
                    sidecar = _Sidecar(path.parent / obj["feature_file"])
                continue
            records.append(parse_record(obj, where, sidecar, max_words))
    return records


def record_to_json(rec: DatasetRecord, sidecar: Optional[_Sidecar] = None) -> dict:
    def feat(v):
        return sidecar.write(v) if sidecar is not None else [float(x) for x in v]

    regions = []
    for r in rec.regions:
        d = {"box": r.box.as_list(), "caption": None if r.caption is None else " ".join(r.caption),
             "feature": feat(r.feature)}
        if r.meta:
            d["meta"] = r.meta
        regions.append(d)
    out = {"image_id": rec.image_id, "width": rec.width, "height": rec.height,
           "global_feature": feat(rec.global_feature), "regions": regions}
    if rec.proposals:
        out["proposals"] = [{"box": p.box.as_list(), "feature": feat(p.feature), "label": p.label, "gt": p.gt}
                            for p in rec.proposals]
    return out


def save_dataset(path, records, sidecar: bool = False):
    path = Path(path)
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION}
    side = None
    if sidecar:
        header["feature_file"] = path.name + ".features.bin"
        side = _Sidecar(None)
    lines = [json.dumps(record_to_json(r, side), sort_keys=True) for r in records]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for line in lines:
            fh.write(line + "\n")
    if side is not None:
        blob = np.concatenate(side.out) if side.out else np.zeros(0)
        blob.astype("<f8").tofile(path.parent / header["feature_file"])


def records_equal(a: DatasetRecord, b: DatasetRecord) -> bool:
    if (a.image_id, a.width, a.height) != (b.image_id, b.width, b.height):
        return False
    if not np.array_equal(a.global_feature, b.global_feature):
        return False
    if len(a.regions) != len(b.regions) or len(a.proposals) != len(b.proposals):
        return False
    for r, s in zip(a.regions, b.regions):
        if r.box != s.box or r.caption != s.caption or r.meta != s.meta or not np.array_equal(r.feature, s.feature):
            return False
    for p, q in zip(a.proposals, b.proposals):
        if (p.box, p.label, p.gt) != (q.box, q.label, q.gt) or not np.array_equal(p.feature, q.feature):
            return False
    return True


def save_predictions(path, predictions: dict):
    """Predictions JSONL: ``{"image_id", "regions": [{"box", "confidence", "caption"}]}`` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(predictions, key=str):
            regions = [{"box": r.box.as_list(), "confidence": r.confidence,
                        "caption": " ".join(r.caption or [])} for r in predictions[key]]
            fh.write(json.dumps({"image_id": key, "regions": regions}, sort_keys=True) + "\n")


def load_predictions(path) -> dict:
    from .geometry import ScoredRegion
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
                regions = []
                for n, r in enumerate(obj["regions"]):
                    try:
                        box = BBox.from_list(r["box"])
                        region = ScoredRegion(box, float(r["confidence"]), _caption(r.get("caption"), where) or [])
                    except (TypeError, ValueError) as exc:
                        raise DatasetError(f"{where}: regions[{n}]: {exc}") from None
                    regions.append(region)
                out[str(obj["image_id"])] = regions
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}: malformed JSON ({exc.msg})") from None
            except KeyError as exc:
                raise DatasetError(f"{where}: missing field {exc.args[0]!r}") from None
    return out


def ground_truth_regions(records) -> dict:
    from .geometry import ScoredRegion
    return {rec.image_id: [ScoredRegion(r.box, 1.0, r.caption) for r in rec.regions if r.caption]
            for rec in records}
