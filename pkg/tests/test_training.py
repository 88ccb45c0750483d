import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctxcap.caption_model import CaptionModelConfig
from ctxcap.data import save_dataset
from ctxcap.experiments import chance_accuracy, world_attributes
from ctxcap.geometry import BBox
from ctxcap.nn_core import load_checkpoint
from ctxcap.training import (
    LossWeights,
    TrainConfig,
    TrainingError,
    box_deltas,
    caption_regions,
    load_result,
    loss_log_csv,
    save_result,
    smooth_l1,
    total_loss,
    train,
    variant_model_config,
)
from ctxcap.world import SyntheticWorldSpec, generate_world

SMALL = CaptionModelConfig(embed_dim=8, hidden_dim=8)


def small_world(seed=0, images=12, **kw):
    return generate_world(SyntheticWorldSpec(images=images, feature_dim=6, seed=seed, **kw))


def entropy(counter):
    n = sum(counter.values())
    return -sum(c / n * math.log(c / n) for c in counter.values())


def test_total_loss_cases():
    assert total_loss(1, 0, 0, 0) == 1.0
    assert total_loss(1, 1, 1, 1) == pytest.approx(1.21, abs=1e-15)
    assert total_loss(2.5, 3, 4, 5, LossWeights(0, 0, 0)) == 2.5
    with pytest.raises(ValueError):
        total_loss(1, -0.1, 0, 0)
    with pytest.raises(ValueError):
        total_loss(float("nan"), 0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(alpha=-1)


@given(st.lists(st.floats(0, 100), min_size=4, max_size=4), st.integers(0, 3), st.floats(0.001, 10))
def test_total_loss_linear_in_each_component(parts, which, h):
    w = LossWeights()
    coef = (1.0, w.alpha, w.beta, w.gamma)[which]
    bumped = list(parts)
    bumped[which] += h
    slope = (total_loss(*bumped) - total_loss(*parts)) / h
    assert slope == pytest.approx(coef, rel=1e-6, abs=1e-9)


def test_smooth_l1_cases():
    assert smooth_l1([1.0, 2.0], [1.0, 2.0])[0] == 0.0
    assert smooth_l1([0.5], [0.0])[0] == 0.125
    assert smooth_l1([2.0], [0.0])[0] == 1.5
    assert smooth_l1([0.5, -2.0], [0.0, 0.0])[0] == 1.625
    with pytest.raises(ValueError):
        smooth_l1([1.0], [1.0, 2.0])


def test_smooth_l1_c1_at_one():
    eps = 1e-9
    for s in (1.0, -1.0):
        below, gb = smooth_l1([s * (1 - eps)], [0.0])
        above, ga = smooth_l1([s * (1 + eps)], [0.0])
        assert abs(below - 0.5) < 1e-8 and abs(above - 0.5) < 1e-8
        assert gb[0] == pytest.approx(s, abs=1e-8) and ga[0] == s


def test_box_deltas():
    p = BBox(10, 10, 20, 30)
    assert np.array_equal(box_deltas(p, p), np.zeros(4))
    assert np.allclose(box_deltas(p, BBox(11, 8, 25, 30)), [0.1, -0.1, 0.5, 0.0], atol=1e-15)


def test_world_is_byte_deterministic(tmp_path):
    a, b = small_world(3), small_world(3)
    save_dataset(tmp_path / "a.jsonl", a.records)
    save_dataset(tmp_path / "b.jsonl", b.records)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    save_dataset(tmp_path / "c.jsonl", small_world(4).records)
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


def test_world_validation():
    for bad in (dict(regions_per_image=1), dict(regions_per_image=3), dict(images=0), dict(noise=1.5)):
        with pytest.raises(ValueError):
            generate_world(SyntheticWorldSpec(**bad))


def test_noise_free_context_is_determined_by_neighbor():
    w = small_world(1, images=200)
    joint, ctx, partner = Counter(), Counter(), Counter()
    for rec in w.records:
        for r in rec.regions:
            key = rec.regions[r.meta["partner"]].meta["object"]
            joint[(key, r.caption[2])] += 1
            ctx[r.caption[2]] += 1
            partner[key] += 1
    mi = entropy(ctx) + entropy(partner) - entropy(joint)
    assert mi == pytest.approx(entropy(ctx), abs=1e-12)
    assert all(r.caption[2] == w.context_of[rec.regions[r.meta["partner"]].meta["object"]]
               for rec in w.records for r in rec.regions)


def test_target_only_bayes_accuracy_is_chance():
    w = small_world(0)
    objects, contexts = w.spec.objects, w.spec.contexts
    # enumerate (own object, partner object) under the uniform generative rule
    acc = 0.0
    for own in objects:
        post = Counter()
        for partner in objects:
            post[w.context_of[partner]] += 1 / len(objects)
        acc += max(post.values()) / len(objects)
    assert acc == pytest.approx(1 / len(contexts), abs=1e-15)
    assert chance_accuracy(w) == pytest.approx(acc, abs=1e-15)


def test_variant_structures():
    assert variant_model_config("L", SMALL).branches == ("local",)
    assert variant_model_config("L+G", SMALL).branches == ("local", "global")
    lgn = variant_model_config("L+G+N", SMALL)
    assert lgn.stages == 1 and len(lgn.branches) == 3
    assert variant_model_config("CAG-Net", SMALL).stages == 2
    with pytest.raises(ValueError):
        variant_model_config("X", SMALL)
    with pytest.raises(ValueError):
        TrainConfig(seed=None)


def single_example_record():
    w = small_world(0, images=1, regions_per_image=2)
    rec = w.records[0]
    regions = [rec.regions[0], replace(rec.regions[1], caption=None)]
    return replace(rec, regions=regions)


def test_single_example_overfits():
    rec = single_example_record()
    cfg = TrainConfig(seed=0, lr=1.0, batch_size=1, model=SMALL)
    res = train([rec], cfg, "L", fixed_steps=200)
    first, last = res.log[0]["sent"], res.log[-1]["sent"]
    assert len(res.log) == 200
    assert last <= 0.5 * first
    assert caption_regions(res, [rec])[rec.image_id][0].caption == rec.regions[0].caption


def test_same_seed_same_log():
    w = small_world(2)
    cfg = TrainConfig(seed=5, lr=0.5, epochs=2, batch_size=8, model=SMALL)
    attrs = world_attributes(w, w.records, 0.85)
    a = train(w.records, cfg, "CAG-Net", attrs)
    b = train(w.records, cfg, "CAG-Net", attrs)
    assert loss_log_csv(a.log) == loss_log_csv(b.log)
    assert loss_log_csv(a.log).startswith("epoch,sent,bbox,cls,attr,total\n")
    c = train(w.records, replace(cfg, seed=6), "CAG-Net", attrs)
    with pytest.raises(ValueError, match="attribute vocabulary"):
        train(w.records, cfg, "CAG-Net", None)
    assert loss_log_csv(c.log) != loss_log_csv(a.log)


def test_non_finite_loss_aborts():
    rec = single_example_record()
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match="non-finite"):
        train([rec], TrainConfig(seed=0, lr=1e300, model=SMALL), "L", fixed_steps=5)
    with pytest.raises(TrainingError):
        train([], TrainConfig(seed=0))


def test_checkpoint_round_trip(tmp_path):
    w = small_world(0)
    cfg = TrainConfig(seed=1, lr=0.5, epochs=1, batch_size=8, model=replace(SMALL, gate_param="raw"))
    res = train(w.records, cfg, "CAG-Net", world_attributes(w, w.records, 0.85))
    save_result(tmp_path / "m.ckpt", res, extra={"note": "x"})
    back = load_result(tmp_path / "m.ckpt")
    state, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta["extra"] == {"note": "x"}
    for k, v in res.state_dict().items():
        assert np.array_equal(back.state_dict()[k], v)
    assert back.config == res.config and back.variant == "CAG-Net"
    before, after = caption_regions(res, w.records), caption_regions(back, w.records)
    for key in before:
        assert [(r.caption, r.confidence) for r in before[key]] == [(r.caption, r.confidence) for r in after[key]]
    save_result(tmp_path / "m2.ckpt", back, extra={"note": "x"})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
