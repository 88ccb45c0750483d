"""Synthetic images whose captions need a neighbor to be described.

Each image holds overlapping pairs of regions stacked in disjoint horizontal
strips, so a region's highest-IoU neighbor is always its partner. A region
caption reads ``<attribute> <object> <context>``: attribute and object are
encoded in the region's own feature, while the context word is a fixed
function of the partner's object. Objects are drawn independently, so the
target feature alone carries no information about its context word.

Alongside the corpus the generator emits the lexicon, lemma table and
taxonomy needed to build attribute vocabularies for it.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attributes import LemmaTable, PosLexicon, Taxonomy
from .data import DatasetRecord, ProposalRecord, RegionRecord
from .geometry import BBox, iou_matrix

OBJECTS = ("girl", "man", "dog", "cat", "cup", "mug")
ATTRIBUTES = ("red", "blue", "small", "large")
CONTEXTS = ("park", "street", "farm", "barn", "kitchen", "table")

# concept of each word; words sharing a concept cluster together at 0.85
_CONCEPTS = {
    "girl": "person", "man": "person", "dog": "animal", "cat": "animal", "cup": "vessel", "mug": "vessel",
    "park": "outdoors", "street": "outdoors", "farm": "rural", "barn": "rural",
    "kitchen": "indoors", "table": "indoors",
    "red": "color", "blue": "color", "small": "size", "large": "size",
}
_TREE = {
    "physical_entity": "entity", "abstraction": "entity",
    "living_thing": "physical_entity", "artifact": "physical_entity", "location": "physical_entity",
    "person": "living_thing", "animal": "living_thing", "vessel": "artifact",
    "outdoors": "location", "rural": "location", "indoors": "location",
    "property": "abstraction", "color": "property", "size": "property",
}
_PLURALS = {"girls": "girl", "men": "man", "dogs": "dog", "cats": "cat", "cups": "cup", "mugs": "mug"}


@dataclass
class SyntheticWorldSpec:
    images: int = 500
    regions_per_image: int = 4
    feature_dim: int = 16
    noise: float = 0.0            # probability the context word is replaced by a uniform draw
    feature_noise: float = 0.0    # std of additive Gaussian feature noise
    pair_affinity: float = 4.0    # squared norm of the appearance key shared inside a pair
    negatives_per_image: int = 2
    width: float = 100.0
    height: float = 100.0
    seed: int = 0
    objects: tuple = OBJECTS
    attributes: tuple = ATTRIBUTES
    contexts: tuple = CONTEXTS

    def validate(self):
        if self.regions_per_image < 2:
            raise ValueError("regions_per_image must be >= 2: every region needs a neighbor")
        if self.regions_per_image % 2:
            raise ValueError("regions_per_image must be even: regions come in overlapping pairs")
        if self.images < 1 or self.feature_dim < 1:
            raise ValueError("images and feature_dim must be positive")
        if len(self.contexts) != len(self.objects):
            raise ValueError("need exactly one context word per object")
        if not (0.0 <= self.noise <= 1.0):
            raise ValueError("noise must be a probability")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class World:
    spec: SyntheticWorldSpec
    records: list
    lexicon: PosLexicon
    lemmas: LemmaTable
    taxonomy: Taxonomy
    context_of: dict = field(default_factory=dict)   # object -> context word


def _pair_boxes(rng, strip_top, strip_h, width):
    h = rng.uniform(0.6, 0.9) * strip_h
    w = rng.uniform(0.25, 0.4) * width
    y1 = strip_top + rng.uniform(0.0, strip_h - h)
    x1 = rng.uniform(0.0, width - 1.6 * w)
    shift = rng.uniform(0.3, 0.6) * w
    a = BBox(x1, y1, x1 + w, y1 + h)
    b = BBox(x1 + shift, y1, x1 + shift + w, y1 + h)
    return a, b


def _jitter(rng, box: BBox, width, height, frac=0.08):
    dw, dh = frac * box.width, frac * box.height
    x1 = min(max(box.x1 + rng.uniform(-dw, dw), 0.0), box.x2 - 1.0)
    y1 = min(max(box.y1 + rng.uniform(-dh, dh), 0.0), box.y2 - 1.0)
    x2 = max(min(box.x2 + rng.uniform(-dw, dw), width), x1 + 1.0)
    y2 = max(min(box.y2 + rng.uniform(-dh, dh), height), y1 + 1.0)
    return BBox(x1, y1, x2, y2)


def _negative_box(rng, gts, width, height, tries=50):
    gt_arr = np.array([g.as_list() for g in gts])
    for _ in range(tries):
        w = rng.uniform(0.05, 0.2) * width
        h = rng.uniform(0.05, 0.2) * height
        x1 = rng.uniform(0.0, width - w)
        y1 = rng.uniform(0.0, height - h)
        box = BBox(x1, y1, x1 + w, y1 + h)
        if iou_matrix(np.array([box.as_list()]), gt_arr).max() < 0.3:
            return box
    return None


def world_tables(spec: SyntheticWorldSpec):
    lexicon = PosLexicon({**{o: {"noun"} for o in spec.objects}, **{c: {"noun"} for c in spec.contexts},
                          **{a: {"adjective"} for a in spec.attributes}})
    lemmas = LemmaTable({**_PLURALS, **{w: w for w in (*spec.objects, *spec.contexts, *spec.attributes)}})
    words = {w: _CONCEPTS.get(w, "entity") for w in (*spec.objects, *spec.contexts, *spec.attributes)}
    taxonomy = Taxonomy(_TREE, words)
    return lexicon, lemmas, taxonomy


def generate_world(spec: SyntheticWorldSpec) -> World:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.feature_dim
    obj_emb = rng.normal(0.0, 1.0 / np.sqrt(d), (len(spec.objects), d))
    attr_emb = rng.normal(0.0, 1.0 / np.sqrt(d), (len(spec.attributes), d))
    context_of = dict(zip(spec.objects, spec.contexts))
    n_pairs = spec.regions_per_image // 2
    strip_h = spec.height / n_pairs
    records = []
    for img in range(spec.images):
        objs = rng.integers(0, len(spec.objects), spec.regions_per_image)
        attrs = rng.integers(0, len(spec.attributes), spec.regions_per_image)
        boxes, keys = [], []
        for p in range(n_pairs):
            a, b = _pair_boxes(rng, p * strip_h, strip_h, spec.width)
            boxes += [a, b]
            key = rng.normal(0.0, np.sqrt(spec.pair_affinity / d), d)
            keys += [key, key]
        regions = []
        for i in range(spec.regions_per_image):
            partner = i ^ 1
            feat = obj_emb[objs[i]] + attr_emb[attrs[i]] + keys[i]
            if spec.feature_noise > 0:
                feat = feat + rng.normal(0.0, spec.feature_noise, d)
            ctx = context_of[spec.objects[objs[partner]]]
            if spec.noise > 0 and rng.random() < spec.noise:
                ctx = spec.contexts[rng.integers(0, len(spec.contexts))]
            caption = [spec.attributes[attrs[i]], spec.objects[objs[i]], ctx]
            meta = {"object": spec.objects[objs[i]], "attribute": spec.attributes[attrs[i]], "partner": partner,
                    "partner_object": spec.objects[objs[partner]], "context": ctx}
            regions.append(RegionRecord(boxes[i], feat, caption, meta))
        gfeat = np.mean([r.feature for r in regions], axis=0)
        proposals = []
        for i, r in enumerate(regions):
            pf = r.feature + rng.normal(0.0, 0.05, d)
            proposals.append(ProposalRecord(_jitter(rng, r.box, spec.width, spec.height), pf, 1, i))
        for _ in range(spec.negatives_per_image):
            nb = _negative_box(rng, boxes, spec.width, spec.height)
            if nb is not None:
                proposals.append(ProposalRecord(nb, rng.normal(0.0, 1.0 / np.sqrt(d), d), 0, -1))
        records.append(DatasetRecord(f"img{img:05d}", spec.width, spec.height, gfeat, regions, proposals))
    lexicon, lemmas, taxonomy = world_tables(spec)
    return World(spec, records, lexicon, lemmas, taxonomy, context_of)
