import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ctxcap.context_features import (
    NoNeighborsError,
    RegionFeatureSet,
    aggregate,
    graph_weights,
    neighbor_feature,
    neighbor_weights,
    pooled_neighbor_feature,
    select_neighbors,
    sorted_neighbor_stack,
)

from oracles import softmax_weights_naive, topk_reference, weighted_sum_naive


def make_set(rng, n, d, scale=1.0):
    xy = rng.uniform(0, 80, (n, 2))
    boxes = np.hstack([xy, xy + rng.uniform(1, 30, (n, 2))])
    feats = rng.normal(0, scale, (n, d))
    return RegionFeatureSet.from_arrays(boxes, feats, feats.mean(axis=0))


def test_identical_features_give_uniform_weights():
    rng = np.random.default_rng(0)
    fs = make_set(rng, 5, 3)
    fs.features[:] = [1.0, -2.0, 0.5]
    g = neighbor_weights(0, [1, 2, 3, 4], fs)
    assert np.allclose(g.weights, 0.25, atol=1e-15)
    assert np.allclose(neighbor_feature(0, fs, 4), [1.0, -2.0, 0.5], atol=1e-12)


def test_closed_form_weights():
    w = graph_weights(np.array([1.0, 0.0]), np.array([[0.0, 5.0], [math.log(3), 1.0]]))
    assert w == pytest.approx([0.25, 0.75], abs=1e-15)


def test_no_neighbors():
    fs = RegionFeatureSet.from_arrays([[0, 0, 1, 1]], [[1.0, 2.0]], [1.0, 2.0])
    with pytest.raises(NoNeighborsError, match="no neighbors"):
        neighbor_feature(0, fs, 2)
    fs2 = make_set(np.random.default_rng(0), 3, 2)
    with pytest.raises(NoNeighborsError, match="no neighbors"):
        neighbor_weights(0, [], fs2)


def test_validation():
    with pytest.raises(ValueError):
        RegionFeatureSet.from_arrays([[0, 0, 1, 1], [0, 0, 2, 2]], [[1.0], [1.0, 2.0]], [1.0])
    with pytest.raises(ValueError):
        RegionFeatureSet.from_arrays([[0, 0, 1, 1]], [[1.0, 2.0]], [1.0])


@pytest.mark.parametrize("seed", range(1000))
def test_matches_naive_loops(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    d = int(rng.integers(1, 7))
    fs = make_set(rng, n, d, scale=float(rng.choice([0.1, 1.0, 3.0])))
    target = int(rng.integers(0, n))
    k = int(rng.integers(1, n + 1))
    boxes = [r.box.as_list() for r in fs.regions]
    others = [j for j in range(n) if j != target]
    ref_nb = [others[i] for i in topk_reference(boxes[target], [boxes[j] for j in others], k)]
    assert select_neighbors(target, fs, k) == ref_nb
    feats = fs.features.tolist()
    ref_w = softmax_weights_naive(feats[target], [feats[j] for j in ref_nb])
    g = neighbor_weights(target, ref_nb, fs)
    assert np.max(np.abs(g.weights - ref_w)) <= 1e-12
    assert abs(g.weights.sum() - 1.0) <= 1e-9
    assert (g.weights > 0).all()
    ref_f = weighted_sum_naive(ref_w, [feats[j] for j in ref_nb])
    assert np.max(np.abs(neighbor_feature(target, fs, k) - ref_f)) <= 1e-12
    # permutation of the neighbor list permutes the weights and keeps the aggregate
    perm = list(rng.permutation(len(ref_nb)))
    shuffled = [ref_nb[i] for i in perm]
    g2 = neighbor_weights(target, shuffled, fs)
    assert np.array_equal(g2.weights, g.weights[perm])
    assert np.array_equal(aggregate(g, fs), aggregate(g2, fs))


def test_full_subset_equals_whole_sum():
    rng = np.random.default_rng(3)
    fs = make_set(rng, 6, 4)
    feats = fs.features.tolist()
    others = [1, 2, 3, 4, 5]
    w = softmax_weights_naive(feats[0], [feats[j] for j in others])
    assert np.allclose(neighbor_feature(0, fs, 5), weighted_sum_naive(w, [feats[j] for j in others]), atol=1e-12)
    assert np.allclose(neighbor_feature(0, fs, 50), neighbor_feature(0, fs, 5), atol=0)


def test_random_selection_four_regions():
    rng = np.random.default_rng(11)
    fs = make_set(rng, 4, 3)
    picked = select_neighbors(2, fs, 2, "random", seed=5)
    expect = [[0, 1, 3][i] for i in np.random.default_rng(5).choice(3, size=2, replace=False)]
    assert picked == expect
    feats = fs.features.tolist()
    w = softmax_weights_naive(feats[2], [feats[j] for j in picked])
    assert np.allclose(neighbor_feature(2, fs, 2, "random", seed=5), weighted_sum_naive(w, [feats[j] for j in picked]),
                       atol=1e-12)
    assert 2 not in picked and len(set(picked)) == 2


@settings(max_examples=100)
@given(arrays(np.float64, (5, 3), elements=st.floats(-5, 5)), st.floats(-50, 50))
def test_shift_invariance(feats, c):
    t = feats[0]
    base = graph_weights(t, feats[1:])
    logits = feats[1:] @ t + c
    e = np.exp(logits - logits.max())
    assert np.allclose(e / e.sum(), base, rtol=0, atol=1e-12)


@settings(max_examples=100)
@given(st.integers(0, 10_000))
def test_convexity(seed):
    rng = np.random.default_rng(seed)
    fs = make_set(rng, 6, 4, scale=2.0)
    nb = select_neighbors(0, fs, 3)
    out = neighbor_feature(0, fs, 3)
    assert np.linalg.norm(out) <= max(np.linalg.norm(fs.features[j]) for j in nb) + 1e-12
    lo, hi = fs.features[nb].min(axis=0), fs.features[nb].max(axis=0)
    assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()


def test_pooling():
    boxes = [[0, 0, 10, 10], [1, 0, 11, 10], [2, 0, 12, 10], [3, 0, 13, 10]]
    fs = RegionFeatureSet.from_arrays(boxes, [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [4.0, 4.0]], [0.0, 0.0])
    assert np.array_equal(pooled_neighbor_feature(0, fs, 2, "max"), [1.0, 1.0])
    assert np.allclose(pooled_neighbor_feature(0, fs, 3, "avg"), [5 / 3, 5 / 3], atol=1e-15)
    same = RegionFeatureSet.from_arrays(boxes, [[2.0, 3.0]] * 4, [2.0, 3.0])
    for mode in ("avg", "max"):
        assert np.array_equal(pooled_neighbor_feature(1, same, 3, mode), [2.0, 3.0])
    with pytest.raises(ValueError):
        pooled_neighbor_feature(0, fs, 2, "median")


def test_sorted_stack_pads_with_zeros():
    boxes = [[0, 0, 10, 10], [1, 0, 11, 10], [5, 0, 15, 10]]
    fs = RegionFeatureSet.from_arrays(boxes, [[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]], [0.0, 0.0])
    assert np.array_equal(sorted_neighbor_stack(0, fs, 3), [2.0, 2.0, 3.0, 3.0, 0.0, 0.0])
