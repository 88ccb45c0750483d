"""Scaled-down ablation sweeps on the synthetic contextual world.

Every sweep trains one model per (setting, seed) on a fresh world drawn with
that seed, holds out the last images for testing and reports seed-averaged
context-token accuracy and ground-truth-box mAP.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .attributes import build_attribute_vocabulary
from .caption_model import CaptionModelConfig
from .data import ground_truth_regions
from .evaluation import EvalGrid, dense_map
from .training import AttributeResources, TrainConfig, caption_regions, context_accuracy, train
from .world import SyntheticWorldSpec, World, generate_world

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class ExperimentSetup:
    """Desk-scale training recipe shared by all sweeps."""
    images: int = 500
    test_images: int = 100
    regions_per_image: int = 4
    feature_dim: int = 16
    pair_affinity: float = 4.0
    noise: float = 0.0
    lr: float = 1.0
    epochs: int = 60
    batch_size: int = 32
    hidden: int = 32
    k: int = 2
    fusion: str = "adaptive2"
    gate_param: str = "raw"
    frontend: str = "graph"
    selection: str = "nearest"
    threshold: float = 0.85
    clip_norm: Optional[float] = 5.0

    def world_spec(self, seed: int) -> SyntheticWorldSpec:
        return SyntheticWorldSpec(images=self.images, regions_per_image=self.regions_per_image,
                                  feature_dim=self.feature_dim, pair_affinity=self.pair_affinity,
                                  noise=self.noise, seed=seed)

    def train_config(self, seed: int, coarse="A2", fine="A1") -> TrainConfig:
        model = CaptionModelConfig(embed_dim=self.hidden, hidden_dim=self.hidden, k=self.k, fusion=self.fusion,
                                   gate_param=self.gate_param, frontend=self.frontend)
        return TrainConfig(seed=seed, lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, model=model,
                           coarse_attrs=coarse, fine_attrs=fine, selection=self.selection,
                           clip_norm=self.clip_norm)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Table:
    title: str
    columns: list
    rows: list = field(default_factory=list)

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def lookup(self, key, column: str):
        for r in self.rows:
            if r[0] == key:
                return r[self.columns.index(column)]
        raise KeyError(key)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in r] for r in self.rows]
        widths = [max(len(str(c)), *(len(r[i]) for r in cells)) for i, c in enumerate(self.columns)]
        line = lambda vals: "  ".join(str(v).ljust(w) for v, w in zip(vals, widths)).rstrip()
        out = [self.title, line(self.columns), line("-" * w for w in widths)]
        out += [line(r) for r in cells]
        return "\n".join(out) + "\n"


def split(world: World, test_images: int):
    if not 0 < test_images < len(world.records):
        raise ValueError(f"test_images must be in (0, {len(world.records)})")
    return world.records[:-test_images], world.records[-test_images:]


def world_attributes(world: World, records=None, threshold: float = 0.85) -> AttributeResources:
    records = world.records if records is None else records
    caps = [r.caption for rec in records for r in rec.regions if r.caption]
    vocab = build_attribute_vocabulary(caps, world.lexicon, world.lemmas, world.taxonomy, threshold)
    return AttributeResources(vocab, world.lexicon, world.lemmas)


def chance_accuracy(world: World) -> float:
    return 1.0 / len(world.spec.contexts)


def run_once(setup: ExperimentSetup, variant: str, seed: int, coarse="A2", fine="A1", grid: EvalGrid = EvalGrid(),
             world: Optional[World] = None, with_map: bool = True) -> dict:
    world = world or generate_world(setup.world_spec(seed))
    tr, te = split(world, setup.test_images)
    attrs = world_attributes(world, tr, setup.threshold)
    result = train(tr, setup.train_config(seed, coarse, fine), variant, attrs)
    out = {"context_acc": context_accuracy(result, te), "chance": chance_accuracy(world),
           "final_loss": float(result.log[-1]["sent"])}
    if with_map:
        report = dense_map(caption_regions(result, te), ground_truth_regions(te), grid, use_nms=False)
        out["map"] = report.map
        out["meteor"] = report.meteor
    return out


def _sweep(title, key_name, settings, seeds, with_map=True):
    """``settings`` is a list of ``(label, setup, variant, coarse, fine)``."""
    cols = [key_name, "context_acc", "context_std"] + (["map", "map_std", "meteor"] if with_map else []) + ["seeds"]
    table = Table(title, cols)
    worlds = {}
    for label, setup, variant, coarse, fine in settings:
        runs = []
        for s in seeds:
            wkey = (s, setup.world_spec(s).__repr__())
            if wkey not in worlds:
                worlds[wkey] = generate_world(setup.world_spec(s))
            runs.append(run_once(setup, variant, s, coarse, fine, world=worlds[wkey], with_map=with_map))
        acc = np.array([r["context_acc"] for r in runs])
        row = [label, float(acc.mean()), float(acc.std())]
        if with_map:
            m = np.array([r["map"] for r in runs])
            row += [float(m.mean()), float(m.std()), float(np.mean([r["meteor"] for r in runs]))]
        row.append(len(seeds))
        table.rows.append(row)
    return table


def variant_table(setup: ExperimentSetup = ExperimentSetup(), seeds: Sequence[int] = DEFAULT_SEEDS,
                  variants=("L", "L+G", "L+G+N", "CAG-Net"), with_map: bool = True) -> Table:
    settings = [(v, setup, v, "A2", "A1") for v in variants]
    return _sweep("context cue integration variants", "variant", settings, seeds, with_map)


ATTR_SETTINGS = (("A2", "A1"), ("A1", "A1"), ("A2", "A2"), ("top", "top"), ("none", "none"))


def attribute_table(setup: ExperimentSetup = ExperimentSetup(), seeds: Sequence[int] = DEFAULT_SEEDS,
                    settings=ATTR_SETTINGS) -> Table:
    rows = [(f"({'-' if c == 'none' else c},{'-' if f == 'none' else f})", setup, "CAG-Net", c, f)
            for c, f in settings]
    return _sweep("attribute losses (coarse, fine)", "attrs", rows, seeds)


def frontend_table(setup: ExperimentSetup = ExperimentSetup(), seeds: Sequence[int] = DEFAULT_SEEDS,
                   frontends=(("graph", "nearest"), ("graph", "random"), ("avg", "nearest"),
                              ("max", "nearest"), ("fc", "nearest"))) -> Table:
    rows = [(f"{fe}/{sel}", replace(setup, frontend=fe, selection=sel), "L+G+N", "none", "none")
            for fe, sel in frontends]
    return _sweep("neighbor front-ends", "frontend", rows, seeds)


def k_table(setup: ExperimentSetup = ExperimentSetup(), seeds: Sequence[int] = DEFAULT_SEEDS,
            ks=(1, 2, 3)) -> Table:
    rows = [(str(k), replace(setup, k=k), "L+G+N", "none", "none") for k in ks]
    return _sweep("number of neighbors", "k", rows, seeds)


def fusion_table(setup: ExperimentSetup = ExperimentSetup(), seeds: Sequence[int] = DEFAULT_SEEDS,
                 fusions=("sum", "product", "concat", "adaptive1", "adaptive2")) -> Table:
    rows = [(f, replace(setup, fusion=f), "L+G+N", "none", "none") for f in fusions]
    return _sweep("fusion operators", "fusion", rows, seeds)


SWEEPS = {
    "variants": variant_table,
    "attributes": attribute_table,
    "frontend": frontend_table,
    "k": k_table,
    "fusion": fusion_table,
}
