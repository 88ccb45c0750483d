"""Command-line entry point: ``ctxcap <command> [--config FILE] [--key value ...]``.

Configuration is a ``key = value`` text file; every key is also a flag
(``max_len`` becomes ``--max-len``) and flags win over the file. Each command
writes the fully resolved configuration next to its artifacts.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__

COMMANDS = ("generate", "attrs-build", "train", "eval", "demo-context", "ablate")
SEEDED = ("generate", "train")
CONFIG_FORMAT = "ctxcap-config"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: Optional[int] = None
    data: str = ""
    out: str = ""
    # world generation
    images: int = 500
    regions_per_image: int = 4
    feature_dim: int = 16
    noise: float = 0.0
    pair_affinity: float = 4.0
    sidecar: bool = False
    # attribute resources
    lexicon: str = ""
    lemmas: str = ""
    taxonomy: str = ""
    attrs: str = ""
    threshold: float = 0.85
    min_count: int = 1
    # model
    variant: str = "CAG-Net"
    embed_dim: int = 32
    hidden_dim: int = 32
    max_len: int = 10
    max_words: int = 10
    vocab_cap: int = 10000
    fusion: str = "adaptive2"
    gate_param: str = "raw"
    frontend: str = "graph"
    selection: str = "nearest"
    k: int = 2
    attr_pool: str = "max"
    init_scale: float = 0.1
    # training
    lr: float = 1.0
    epochs: int = 60
    batch_size: int = 32
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.01
    proposals_per_batch: int = 32
    coarse_attrs: str = "A2"
    fine_attrs: str = "A1"
    clip_norm: Optional[float] = 5.0
    # evaluation
    checkpoint: str = ""
    predictions: str = ""
    gt_boxes: bool = False
    iou_thresholds: str = "0.3,0.4,0.5,0.6,0.7"
    meteor_thresholds: str = "0,0.05,0.1,0.15,0.2,0.25"
    # demo and ablation
    image: str = ""
    region: int = 0
    sweep: str = "variants"
    seeds: str = "0,1,2,3,4"
    test_images: int = 100

    def to_text(self) -> str:
        lines = [f"# {CONFIG_FORMAT} version {__version__}"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    f = _FIELDS[name]
    kind = f.type.replace("Optional[", "").rstrip("]")
    raw = raw.strip()
    if raw == "" and f.type.startswith("Optional"):
        return None
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text: str, where: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{where}:{lineno}: expected 'key = value'")
        if key not in _FIELDS:
            raise ConfigError(f"{where}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def resolve_config(config_path: Optional[str], overrides: dict) -> RunConfig:
    values = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for key, raw in overrides.items():
        if raw is not None:
            values[key] = _coerce(key, raw)
    return RunConfig(**values)


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise ConfigError("an output directory is required (--out)")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return out


def _need(cfg: RunConfig, *keys):
    for key in keys:
        value = getattr(cfg, key)
        if not value:
            raise ConfigError(f"missing required input: {key} (--{key.replace('_', '-')})")
        if key in ("data", "checkpoint", "predictions", "lexicon", "lemmas", "taxonomy", "attrs") and \
                not Path(value).exists():
            raise ConfigError(f"{key}: {value} does not exist")


def _train_config(cfg: RunConfig):
    from .caption_model import CaptionModelConfig
    from .training import LossWeights, TrainConfig
    model = CaptionModelConfig(embed_dim=cfg.embed_dim, hidden_dim=cfg.hidden_dim, max_len=cfg.max_len,
                               fusion=cfg.fusion, gate_param=cfg.gate_param, frontend=cfg.frontend, k=cfg.k,
                               attr_pool=cfg.attr_pool, init_scale=cfg.init_scale)
    return TrainConfig(seed=cfg.seed, lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size,
                       weights=LossWeights(cfg.alpha, cfg.beta, cfg.gamma), model=model,
                       proposals_per_batch=cfg.proposals_per_batch, coarse_attrs=cfg.coarse_attrs,
                       fine_attrs=cfg.fine_attrs, selection=cfg.selection, clip_norm=cfg.clip_norm)


def _load_attrs(cfg: RunConfig):
    """Attribute resources from ``attrs`` (a directory written by attrs-build), if configured."""
    from .attributes import AttributeVocabulary, LemmaTable, PosLexicon
    from .training import AttributeResources
    if not cfg.attrs:
        return None
    d = Path(cfg.attrs)
    _need(cfg, "attrs")
    vocab = AttributeVocabulary.load(d / "a1.tsv", d / "a2.tsv")
    return AttributeResources(vocab, PosLexicon.load(d / "lexicon.tsv"), LemmaTable.load(d / "lemmas.tsv"))


# --- commands ---------------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> int:
    from .data import save_dataset
    from .world import SyntheticWorldSpec, generate_world
    spec = SyntheticWorldSpec(images=cfg.images, regions_per_image=cfg.regions_per_image,
                              feature_dim=cfg.feature_dim, noise=cfg.noise, pair_affinity=cfg.pair_affinity,
                              seed=cfg.seed)
    world = generate_world(spec)
    out = _out_dir(cfg)
    save_dataset(out / "dataset.jsonl", world.records, sidecar=cfg.sidecar)
    world.lexicon.save(out / "lexicon.tsv")
    world.lemmas.save(out / "lemmas.tsv")
    world.taxonomy.save(out / "taxonomy.txt")
    print(f"wrote {len(world.records)} images to {out / 'dataset.jsonl'}")
    return 0


def cmd_attrs_build(cfg: RunConfig) -> int:
    from .attributes import LemmaTable, PosLexicon, Taxonomy, build_attribute_vocabulary, encode_targets
    from .data import load_dataset
    _need(cfg, "data", "lexicon", "lemmas", "taxonomy")
    records = load_dataset(cfg.data, cfg.max_words)
    lexicon, lemmas = PosLexicon.load(cfg.lexicon), LemmaTable.load(cfg.lemmas)
    taxonomy = Taxonomy.load(cfg.taxonomy)
    caps = [r.caption for rec in records for r in rec.regions if r.caption]
    vocab = build_attribute_vocabulary(caps, lexicon, lemmas, taxonomy, cfg.threshold, cfg.min_count)
    out = _out_dir(cfg)
    vocab.save(out / "a1.tsv", out / "a2.tsv")
    lexicon.save(out / "lexicon.tsv")
    lemmas.save(out / "lemmas.tsv")
    with open(out / "targets.jsonl", "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": "ctxcap-attr-targets", "version": 1}) + "\n")
        for rec in records:
            for i, r in enumerate(rec.regions):
                if not r.caption:
                    continue
                a2, a1 = encode_targets(r.caption, vocab, lexicon, lemmas)
                fh.write(json.dumps({"image_id": rec.image_id, "region": i,
                                     "a2": np.flatnonzero(a2).tolist(), "a1": np.flatnonzero(a1).tolist()}) + "\n")
    if vocab.unmapped:
        print(f"{len(vocab.unmapped)} words outside the taxonomy kept as singleton clusters", file=sys.stderr)
    print(f"|A1| = {len(vocab.a1)}, |A2| = {len(vocab.a2)} written to {out}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    from .caption_model import Vocabulary
    from .data import load_dataset
    from .training import loss_log_csv, save_result, train
    _need(cfg, "data")
    records = load_dataset(cfg.data, cfg.max_words)
    attrs = _load_attrs(cfg)
    vocab = Vocabulary.build([r.caption for rec in records for r in rec.regions if r.caption], cfg.vocab_cap)
    result = train(records, _train_config(cfg), cfg.variant, attrs, vocab)
    out = _out_dir(cfg)
    save_result(out / "model.ckpt", result, {"run_config": cfg.to_dict(), "package_version": __version__})
    (out / "loss.csv").write_text(loss_log_csv(result.log), encoding="utf-8")
    result.vocab.save(out / "vocab.txt")
    last = result.log[-1]
    print(f"trained {cfg.variant} for {len(result.log)} epochs; final sent={last['sent']:.4f} "
          f"total={last['total']:.4f}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    from .data import load_dataset, load_predictions, ground_truth_regions, save_predictions
    from .evaluation import EvalGrid, dense_map
    from .training import caption_regions, load_result
    _need(cfg, "data")
    records = load_dataset(cfg.data, cfg.max_words)
    gts = ground_truth_regions(records)
    out = _out_dir(cfg)
    if cfg.predictions:
        _need(cfg, "predictions")
        preds = load_predictions(cfg.predictions)
    else:
        _need(cfg, "checkpoint")
        preds = caption_regions(load_result(cfg.checkpoint), records, use_proposals=not cfg.gt_boxes)
        save_predictions(out / "predictions.jsonl", preds)
    grid = EvalGrid(_floats(cfg.iou_thresholds), _floats(cfg.meteor_thresholds))
    report = dense_map(preds, gts, grid, use_nms=not cfg.gt_boxes)
    doc = report.to_dict()
    doc["config"] = cfg.to_dict()
    (out / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    return 0


def cmd_demo_context(cfg: RunConfig) -> int:
    from .context_features import RegionFeatureSet, neighbor_weights, select_neighbors
    from .data import load_dataset
    from .geometry import ScoredRegion
    from .training import VARIANTS, caption_regions, train
    _need(cfg, "data")
    records = load_dataset(cfg.data, cfg.max_words)
    if not records:
        raise ConfigError("dataset is empty")
    by_id = {r.image_id: r for r in records}
    rec = by_id.get(cfg.image) if cfg.image else records[-1]
    if rec is None:
        raise ConfigError(f"image {cfg.image!r} not in dataset")
    if not 0 <= cfg.region < len(rec.regions):
        raise ConfigError(f"region must be in [0, {len(rec.regions)})")
    fset = RegionFeatureSet([ScoredRegion(r.box, feature=r.feature) for r in rec.regions], rec.global_feature)
    target = rec.regions[cfg.region]
    print(f"image {rec.image_id} region {cfg.region} box {target.box.as_list()} "
          f"caption: {' '.join(target.caption or [])}")
    neigh = select_neighbors(cfg.region, fset, cfg.k, cfg.selection, seed=cfg.seed or 0)
    graph = neighbor_weights(cfg.region, neigh, fset)
    for j, w in zip(graph.neighbor_indices, graph.weights):
        print(f"  neighbor {j}: IoU={fset.overlaps[cfg.region, j]:.3f} weight={w:.4f} "
              f"caption: {' '.join(rec.regions[j].caption or [])}")
    train_recs = [r for r in records if r is not rec] or records
    tcfg = _train_config(replace(cfg, seed=cfg.seed or 0))
    attrs = _load_attrs(cfg)
    for variant in VARIANTS:
        result = train(train_recs, replace(tcfg, coarse_attrs=tcfg.coarse_attrs if attrs else "none",
                                           fine_attrs=tcfg.fine_attrs if attrs else "none"), variant, attrs)
        cap = caption_regions(result, [rec])[rec.image_id][cfg.region].caption
        print(f"  {variant:8s} -> {' '.join(cap)}")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    from .experiments import SWEEPS, ExperimentSetup
    setup = ExperimentSetup(images=cfg.images, test_images=cfg.test_images, regions_per_image=cfg.regions_per_image,
                            feature_dim=cfg.feature_dim, pair_affinity=cfg.pair_affinity, noise=cfg.noise,
                            lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size, hidden=cfg.hidden_dim,
                            k=cfg.k, fusion=cfg.fusion, gate_param=cfg.gate_param, frontend=cfg.frontend,
                            selection=cfg.selection, threshold=cfg.threshold, clip_norm=cfg.clip_norm)
    seeds = tuple(int(s) for s in cfg.seeds.split(",") if s.strip())
    names = list(SWEEPS) if cfg.sweep == "all" else [s.strip() for s in cfg.sweep.split(",")]
    for name in names:
        if name not in SWEEPS:
            raise ConfigError(f"unknown sweep {name!r}; expected one of {sorted(SWEEPS)} or 'all'")
    out = _out_dir(cfg)
    for name in names:
        table = SWEEPS[name](setup, seeds)
        (out / f"{name}.csv").write_text(table.to_csv(), encoding="utf-8")
        (out / f"{name}.txt").write_text(table.to_text(), encoding="utf-8")
        print(table.to_text())
    return 0


HANDLERS = {
    "generate": cmd_generate,
    "attrs-build": cmd_attrs_build,
    "train": cmd_train,
    "eval": cmd_eval,
    "demo-context": cmd_demo_context,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxcap", description="Context-grounded dense region captioning.")
    parser.add_argument("--version", action="version", version=f"ctxcap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        for f in fields(RunConfig):
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar="VALUE")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k in _FIELDS}
    try:
        cfg = resolve_config(args.config, overrides)
        if args.command in SEEDED and cfg.seed is None:
            raise ConfigError(f"{args.command} requires --seed")
        return HANDLERS[args.command](cfg)
    except (ConfigError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"ctxcap {args.command}: error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
