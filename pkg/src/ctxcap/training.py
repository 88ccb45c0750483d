"""Loss assembly, example construction and the SGD training loop.

The total objective is ``sent + alpha * bbox + beta * cls + gamma * attr``
where ``attr`` is the sum of the coarse and fine attribute losses. Box
regression and foreground/background classification run on the proposals
stored with each image through a small linear head.
"""
from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .attributes import AttributeVocabulary, LemmaTable, PosLexicon, encode_targets, top_word_targets
from .caption_model import CaptionModel, CaptionModelConfig, Vocabulary, make_batch
from .context_features import (
    RegionFeatureSet,
    neighbor_feature,
    pooled_neighbor_feature,
    sorted_neighbor_stack,
)
from .geometry import ScoredRegion
from .nn_core import (Parameter, linear, linear_backward, load_checkpoint, save_checkpoint, sgd_step, softmax,
                      softmax_cross_entropy)

VARIANTS = ("L", "L+G", "L+G+N", "CAG-Net")
ATTR_SOURCES = ("A2", "A1", "top", "none")
LOSS_LOG_HEADER = "epoch,sent,bbox,cls,attr,total"


class TrainingError(RuntimeError):
    pass


@dataclass
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.01

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


@dataclass
class TrainConfig:
    seed: int
    lr: float = 0.001
    epochs: int = 10
    batch_size: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    model: CaptionModelConfig = field(default_factory=CaptionModelConfig)
    proposals_per_batch: int = 32
    coarse_attrs: str = "A2"
    fine_attrs: str = "A1"
    top_n: int = 1000
    selection: str = "nearest"
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("a seed is mandatory")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        for src in (self.coarse_attrs, self.fine_attrs):
            if src not in ATTR_SOURCES:
                raise ValueError(f"unknown attribute source {src!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["model"] = CaptionModelConfig.from_dict(d.get("model", {}))
        return cls(**d)


def total_loss(sent: float, bbox: float, cls: float, attr: float, w: LossWeights = LossWeights()) -> float:
    for name, v in (("sent", sent), ("bbox", bbox), ("cls", cls), ("attr", attr)):
        if not math.isfinite(v) or v < 0:
            raise ValueError(f"loss component {name}={v} must be finite and non-negative")
    return sent + w.alpha * bbox + w.beta * cls + w.gamma * attr


def smooth_l1(pred, target):
    """Summed smooth-L1 (``0.5 x^2`` inside ``|x| < 1``, ``|x| - 0.5`` outside) and its gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"smooth_l1: shape {pred.shape} vs {target.shape}")
    x = pred - target
    ax = np.abs(x)
    inside = ax < 1.0
    loss = np.where(inside, 0.5 * x * x, ax - 0.5)
    grad = np.where(inside, x, np.sign(x))
    return float(loss.sum()), grad


def box_deltas(proposal, gt) -> np.ndarray:
    """Corner offsets of ``gt`` relative to ``proposal``, scaled by the proposal size."""
    w, h = proposal.width, proposal.height
    return np.array([(gt.x1 - proposal.x1) / w, (gt.y1 - proposal.y1) / h,
                     (gt.x2 - proposal.x2) / w, (gt.y2 - proposal.y2) / h])


class DetectionHead:
    """Linear foreground/background classifier and box regressor on proposal features."""

    def __init__(self, feature_dim: int, seed: int = 0, scale: float = 0.1):
        rng = np.random.default_rng([seed, 7])
        self.cls_W = Parameter(rng.uniform(-scale, scale, (2, feature_dim)), "det.cls.W")
        self.cls_b = Parameter(np.zeros(2), "det.cls.b")
        self.box_W = Parameter(rng.uniform(-scale, scale, (4, feature_dim)), "det.box.W")
        self.box_b = Parameter(np.zeros(4), "det.box.b")

    def parameters(self):
        return [self.cls_W, self.cls_b, self.box_W, self.box_b]

    def losses(self, feats, labels, deltas, backward=False, w_cls=1.0, w_bbox=1.0):
        """Mean classification loss and mean per-positive smooth-L1 box loss."""
        n = feats.shape[0]
        logits, lc = linear(feats, self.cls_W, self.cls_b)
        ce, g = softmax_cross_entropy(logits, labels)
        cls = float(ce.mean())
        pos = np.flatnonzero(labels == 1)
        bbox = 0.0
        if pos.size:
            pred, bc = linear(feats[pos], self.box_W, self.box_b)
            bbox, bg = smooth_l1(pred, deltas[pos])
            bbox /= pos.size
        if backward:
            linear_backward(w_cls * g / n, lc, self.cls_W, self.cls_b)
            if pos.size:
                linear_backward(w_bbox * bg / pos.size, bc, self.box_W, self.box_b)
        return bbox, cls

    def foreground_prob(self, feats) -> np.ndarray:
        logits, _ = linear(np.atleast_2d(feats), self.cls_W, self.cls_b)
        return softmax(logits)[:, 1]


# --- examples -----------------------------------------------------------------

def variant_model_config(variant: str, base: CaptionModelConfig) -> CaptionModelConfig:
    if variant == "L":
        return replace(base, use_neighboring=False, use_global=False, stages=1, coarse_attr_size=0)
    if variant == "L+G":
        return replace(base, use_neighboring=False, use_global=True, stages=1, coarse_attr_size=0)
    if variant == "L+G+N":
        return replace(base, use_neighboring=True, use_global=True, stages=1, coarse_attr_size=0)
    if variant == "CAG-Net":
        return replace(base, use_neighboring=True, use_global=True, stages=2)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def variant_attr_sources(variant: str, config: TrainConfig):
    if variant == "CAG-Net":
        return config.coarse_attrs, config.fine_attrs
    return "none", "none"


@dataclass
class AttributeResources:
    vocab: AttributeVocabulary
    lexicon: PosLexicon
    lemmas: LemmaTable


def region_inputs(rec, k: int, frontend: str, selection: str = "nearest", seed: int = 0, boxes_from=None):
    """Per-region ``(local, neighboring, global)`` triples for one image.

    ``boxes_from`` selects the region list (default: the image's regions;
    pass ``rec.proposals`` to caption proposals in their own context).
    """
    items = rec.regions if boxes_from is None else boxes_from
    fset = RegionFeatureSet([ScoredRegion(r.box, feature=r.feature) for r in items], rec.global_feature)
    out = []
    for i in range(len(items)):
        if len(items) < 2:
            neigh = np.zeros(k * fset.dim if frontend == "fc" else fset.dim)
        elif frontend == "graph":
            neigh = neighbor_feature(i, fset, k, selection, seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
        elif frontend in ("avg", "max"):
            neigh = pooled_neighbor_feature(i, fset, k, frontend)
        elif frontend == "fc":
            neigh = sorted_neighbor_stack(i, fset, k)
        else:
            raise ValueError(f"unknown front-end {frontend!r}")
        out.append((fset.features[i], neigh, rec.global_feature))
    return out


def attr_targets(source: str, words, ids, attrs: Optional[AttributeResources], top_ids):
    if source == "none":
        return None
    if source == "top":
        return top_word_targets(ids, top_ids)
    if attrs is None:
        raise ValueError(f"attribute source {source} needs an attribute vocabulary")
    a2, a1 = encode_targets(words, attrs.vocab, attrs.lexicon, attrs.lemmas)
    return a2 if source == "A2" else a1


def attr_size(source: str, attrs: Optional[AttributeResources], top_ids) -> int:
    if source == "none":
        return 0
    if source == "top":
        return len(top_ids)
    if attrs is None:
        raise ValueError(f"attribute source {source} needs an attribute vocabulary")
    return len(attrs.vocab.a2) if source == "A2" else len(attrs.vocab.a1)


def top_vocab_ids(vocab: Vocabulary, n: int) -> list:
    return list(range(3, min(len(vocab), 3 + n)))


def build_examples(records, vocab: Vocabulary, model_cfg: CaptionModelConfig, coarse_src="none", fine_src="none",
                   attrs: Optional[AttributeResources] = None, selection="nearest", seed=0, top_ids=()):
    examples = []
    for n, rec in enumerate(records):
        triples = region_inputs(rec, model_cfg.k, model_cfg.frontend, selection, seed=seed * 1000003 + n)
        for i, (r, (loc, neigh, glob)) in enumerate(zip(rec.regions, triples)):
            if not r.caption:
                continue
            ids = vocab.encode(r.caption)
            examples.append({
                "local": loc, "neighboring": neigh, "global": glob,
                "caption": ids + [Vocabulary.eos_id],
                "a2": attr_targets(coarse_src, r.caption, ids, attrs, top_ids),
                "a1": attr_targets(fine_src, r.caption, ids, attrs, top_ids),
                "image": n, "region": i,
            })
    return examples


def proposal_examples(records):
    feats, labels, deltas = [], [], []
    for rec in records:
        for p in rec.proposals:
            feats.append(p.feature)
            labels.append(p.label)
            deltas.append(box_deltas(p.box, rec.regions[p.gt].box) if p.label == 1 else np.zeros(4))
    if not feats:
        return None
    return np.array(feats), np.array(labels, dtype=np.int64), np.array(deltas)


# --- training loop ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: CaptionModel
    detector: DetectionHead
    vocab: Vocabulary
    log: list
    variant: str
    config: TrainConfig
    top_ids: list

    def state_dict(self) -> dict:
        state = self.model.state_dict()
        for p in self.detector.parameters():
            state[p.name] = p.value.copy()
        return state


MODEL_FORMAT = "ctxcap-model"
MODEL_VERSION = 1


def save_result(path, result: TrainResult, extra: Optional[dict] = None):
    meta = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "variant": result.variant,
        "model": result.model.config.to_dict(),
        "train": result.config.to_dict(),
        "vocab": result.vocab.tokens,
        "top_ids": list(result.top_ids),
    }
    if extra:
        meta["extra"] = extra
    save_checkpoint(path, result.state_dict(), meta)


def load_result(path) -> TrainResult:
    state, meta = load_checkpoint(path)
    if meta.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint")
    if meta.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {meta.get('version')}")
    mcfg = CaptionModelConfig.from_dict(meta["model"])
    model = CaptionModel(mcfg, seed=None)
    detector = DetectionHead(mcfg.feature_dim)
    det = {p.name: p for p in detector.parameters()}
    model.load_state_dict({k: v for k, v in state.items() if k not in det})
    for name, p in det.items():
        p.value[...] = state[name]
    return TrainResult(model, detector, Vocabulary(meta["vocab"]), [], meta["variant"],
                       TrainConfig.from_dict(meta["train"]), meta["top_ids"])


def train(records, config: TrainConfig, variant: str = "CAG-Net", attrs: Optional[AttributeResources] = None,
          vocab: Optional[Vocabulary] = None, fixed_steps: Optional[int] = None) -> TrainResult:
    """Seeded minibatch SGD; returns the trained model and a per-epoch loss log.

    ``fixed_steps`` replaces the epoch budget by a number of updates (each
    "epoch" row of the log then covers one update).
    """
    if not records:
        raise TrainingError("empty dataset")
    if vocab is None:
        vocab = Vocabulary.build([r.caption for rec in records for r in rec.regions if r.caption])
    coarse_src, fine_src = variant_attr_sources(variant, config)
    top_ids = top_vocab_ids(vocab, config.top_n)
    mcfg = variant_model_config(variant, replace(config.model, vocab_size=len(vocab),
                                                 feature_dim=records[0].feature_dim))
    if mcfg.stages == 1:
        coarse_src = "none"
    mcfg = replace(mcfg, coarse_attr_size=attr_size(coarse_src, attrs, top_ids),
                   fine_attr_size=attr_size(fine_src, attrs, top_ids))
    examples = build_examples(records, vocab, mcfg, coarse_src, fine_src, attrs, config.selection,
                              config.seed, top_ids)
    if not examples:
        raise TrainingError("dataset has no captioned regions")
    model = CaptionModel(mcfg, seed=config.seed)
    detector = DetectionHead(mcfg.feature_dim, seed=config.seed)
    props = proposal_examples(records)
    params = model.parameters() + detector.parameters()
    rng = np.random.default_rng(config.seed)
    w = config.weights
    log = []

    def batches():
        if fixed_steps is not None:
            for _ in range(fixed_steps):
                idx = rng.choice(len(examples), size=min(config.batch_size, len(examples)), replace=False)
                yield [idx]
            return
        for _ in range(config.epochs):
            order = rng.permutation(len(examples))
            yield [order[s:s + config.batch_size] for s in range(0, len(order), config.batch_size)]

    for epoch, epoch_batches in enumerate(batches(), 1):
        sums = np.zeros(5)
        for idx in epoch_batches:
            for p in params:
                p.zero_grad()
            batch = make_batch([examples[i] for i in idx])
            try:
                losses = model.forward_train(batch, backward=True, attr_weight=w.gamma)
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}: {exc}") from exc
            bbox = cls = 0.0
            if props is not None:
                pidx = rng.choice(len(props[1]), size=min(config.proposals_per_batch, len(props[1])), replace=False)
                bbox, cls = detector.losses(props[0][pidx], props[1][pidx], props[2][pidx], backward=True,
                                            w_cls=w.beta, w_bbox=w.alpha)
            attr = losses.coarse_attr + losses.fine_attr
            vals = (losses.sentence, bbox, cls, attr)
            if not all(math.isfinite(v) for v in vals):
                raise TrainingError(f"non-finite loss at epoch {epoch}: sent={vals[0]} bbox={vals[1]} "
                                    f"cls={vals[2]} attr={vals[3]}")
            sums += np.array([*vals, total_loss(*vals, w)])
            sgd_step(params, config.lr, config.clip_norm)
        m = sums / len(epoch_batches)
        log.append({"epoch": epoch, "sent": m[0], "bbox": m[1], "cls": m[2], "attr": m[3], "total": m[4]})
    return TrainResult(model, detector, vocab, log, variant, config, top_ids)


def loss_log_csv(log) -> str:
    buf = io.StringIO()
    buf.write(LOSS_LOG_HEADER + "\n")
    for row in log:
        buf.write(",".join([str(row["epoch"])] + [repr(float(row[k])) for k in ("sent", "bbox", "cls", "attr", "total")]) + "\n")
    return buf.getvalue()


# --- inference over records ----------------------------------------------------------

def caption_regions(result: TrainResult, records, use_proposals: bool = False, batch_size: int = 256):
    """Greedy captions for every region (or proposal) of every record.

    Returns ``{image_id: [ScoredRegion]}`` with confidence = foreground
    probability times the geometric-mean token probability of the caption.
    """
    mcfg = result.model.config
    cfg = result.config
    out = {}
    for n, rec in enumerate(records):
        items = rec.proposals if use_proposals else rec.regions
        if not items:
            out[rec.image_id] = []
            continue
        triples = region_inputs(rec, mcfg.k, mcfg.frontend, cfg.selection, seed=cfg.seed * 1000003 + n,
                                boxes_from=items)
        loc = np.array([t[0] for t in triples])
        neigh = np.array([t[1] for t in triples])
        glob = np.array([t[2] for t in triples])
        caps, mean_lp, _, _ = result.model.greedy(loc, neigh, glob)
        fg = result.detector.foreground_prob(loc)
        regions = []
        for item, cap, lp, f in zip(items, caps, mean_lp, fg):
            conf = float(np.clip(f * math.exp(lp), 0.0, 1.0))
            regions.append(ScoredRegion(item.box, conf, result.vocab.decode(cap)))
        out[rec.image_id] = regions
    return out


def context_accuracy(result: TrainResult, records, position: int = 2) -> float:
    """Fraction of captioned regions whose decoded word at ``position`` matches the reference."""
    preds = caption_regions(result, records)
    hits = total = 0
    for rec in records:
        for r, p in zip(rec.regions, preds[rec.image_id]):
            if not r.caption or len(r.caption) <= position:
                continue
            total += 1
            hits += int(len(p.caption) > position and p.caption[position] == r.caption[position])
    return hits / total if total else 0.0
