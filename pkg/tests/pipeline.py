"""A small generate -> attrs-build -> train -> eval run through the CLI."""
import shutil
from pathlib import Path

from ctxcap.cli import run

SMALL = ["--embed-dim", "8", "--hidden-dim", "8", "--epochs", "2", "--batch-size", "8"]


def cli(*args):
    code = run([str(a) for a in args])
    assert code == 0, f"ctxcap {' '.join(map(str, args))} exited {code}"


def full_pipeline(root: Path, seed: int = 0, images: int = 12) -> dict:
    root = Path(root)
    gen, attrs, model, ev = root / "gen", root / "attrs", root / "model", root / "eval"
    cli("generate", "--seed", seed, "--images", images, "--feature-dim", 6, "--out", gen)
    cli("attrs-build", "--data", gen / "dataset.jsonl", "--lexicon", gen / "lexicon.tsv",
        "--lemmas", gen / "lemmas.tsv", "--taxonomy", gen / "taxonomy.txt", "--out", attrs)
    cli("train", "--seed", seed, "--data", gen / "dataset.jsonl", "--attrs", attrs, "--out", model, *SMALL)
    cli("eval", "--data", gen / "dataset.jsonl", "--checkpoint", model / "model.ckpt", "--out", ev)
    return {
        "dataset": gen / "dataset.jsonl",
        "targets": attrs / "targets.jsonl",
        "checkpoint": model / "model.ckpt",
        "loss_log": model / "loss.csv",
        "report": ev / "report.json",
        "predictions": ev / "predictions.jsonl",
    }


def twice(root: Path, seed: int = 0) -> tuple:
    """Artifact bytes from two identical runs in the same directory."""
    snaps = []
    for _ in range(2):
        if Path(root).exists():
            shutil.rmtree(root)
        paths = full_pipeline(root, seed)
        snaps.append({k: p.read_bytes() for k, p in paths.items()})
    return snaps
