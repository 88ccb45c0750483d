import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxcap.geometry import BBox, ScoredRegion, boxes_to_array, iou, iou_matrix, nms, nms_indices, top_k_neighbors

from oracles import iou_naive, nms_reference, topk_reference


def random_boxes(rng, n, extent=100.0):
    xy = rng.uniform(0, extent * 0.8, (n, 2))
    wh = rng.uniform(1.0, extent * 0.4, (n, 2))
    return np.hstack([xy, xy + wh])


@st.composite
def boxes(draw):
    x1 = draw(st.floats(0, 100, allow_nan=False))
    y1 = draw(st.floats(0, 100, allow_nan=False))
    w = draw(st.floats(0.01, 50, allow_nan=False))
    h = draw(st.floats(0.01, 50, allow_nan=False))
    return BBox(x1, y1, x1 + w, y1 + h)


def test_iou_cases():
    b = BBox(0, 0, 10, 10)
    assert iou(b, b) == 1.0
    assert iou(b, BBox(20, 20, 30, 30)) == 0.0
    assert iou(b, BBox(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)


def test_touching_boxes_do_not_overlap():
    assert iou(BBox(0, 0, 1, 1), BBox(1, 0, 2, 1)) == 0.0


@pytest.mark.parametrize("coords", [(0, 0, 0, 1), (0, 0, 1, 0), (2, 0, 1, 1), (0, 0, float("nan"), 1)])
def test_invalid_boxes_rejected(coords):
    with pytest.raises(ValueError):
        BBox(*coords)


def test_confidence_range():
    with pytest.raises(ValueError):
        ScoredRegion(BBox(0, 0, 1, 1), 1.5)


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    if a != b:
        assert v < 1.0 or np.allclose(a.as_list(), b.as_list())


@given(st.lists(boxes(), min_size=1, max_size=8), st.lists(boxes(), min_size=1, max_size=8))
def test_iou_matrix_matches_scalar(xs, ys):
    m = iou_matrix(boxes_to_array(xs), boxes_to_array(ys))
    for i, a in enumerate(xs):
        for j, b in enumerate(ys):
            assert m[i, j] == pytest.approx(iou_naive(a.as_list(), b.as_list()), abs=1e-12)


def test_nms_trivial():
    r = ScoredRegion(BBox(0, 0, 5, 5), 0.3)
    assert nms([r], 0.5) == [r]
    assert nms([], 0.5) == []
    hi, lo = ScoredRegion(BBox(0, 0, 5, 5), 0.9), ScoredRegion(BBox(0, 0, 5, 5), 0.8)
    assert nms([lo, hi], 0.5) == [hi]


def test_nms_threshold_range():
    with pytest.raises(ValueError):
        nms_indices(np.zeros((0, 4)), [], 0.0)


@pytest.mark.parametrize("seed", range(100))
def test_nms_matches_quadratic_reference(seed):
    rng = np.random.default_rng(seed)
    b = random_boxes(rng, 200)
    # coarse confidences force ties, which must go to the lower index
    conf = np.round(rng.uniform(0, 1, 200), 1)
    thr = float(rng.choice([0.3, 0.5, 0.7]))
    assert nms_indices(b, conf, thr) == nms_reference(b.tolist(), conf.tolist(), thr)


def test_nms_max_keep():
    rng = np.random.default_rng(1)
    b = random_boxes(rng, 50)
    conf = rng.uniform(0, 1, 50)
    full = nms_indices(b, conf, 0.5)
    assert nms_indices(b, conf, 0.5, max_keep=3) == full[:3]


@settings(max_examples=60)
@given(st.lists(st.tuples(boxes(), st.floats(0, 1)), min_size=0, max_size=25), st.sampled_from([0.3, 0.5, 0.7, 1.0]))
def test_nms_properties(items, thr):
    regions = [ScoredRegion(b, c) for b, c in items]
    kept = nms(regions, thr)
    assert all(any(k is r for r in regions) for k in kept)
    confs = [k.confidence for k in kept]
    assert confs == sorted(confs, reverse=True)
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert iou(kept[i].box, kept[j].box) < thr
    assert nms(kept, thr) == kept


def test_top_k_trivial():
    t = ScoredRegion(BBox(10, 10, 20, 20))
    assert top_k_neighbors(t, [ScoredRegion(BBox(10, 10, 20, 20))], 1) == [0]
    far = [ScoredRegion(BBox(50 + 5 * i, 50, 52 + 5 * i, 52)) for i in range(5)]
    assert top_k_neighbors(t, far, 3) == [0, 1, 2]
    assert top_k_neighbors(t, far, 10) == [0, 1, 2, 3, 4]
    assert top_k_neighbors(t, [], 2) == []
    with pytest.raises(ValueError):
        top_k_neighbors(t, far, 0)


def test_top_k_nested_boxes():
    target = BBox(40, 40, 60, 60)
    pool = [BBox(40 - s, 40 - s, 60 + s, 60 + s) for s in (9, 3, 7, 1, 5, 8, 2, 6, 4, 10)]
    got = top_k_neighbors(ScoredRegion(target), [ScoredRegion(b) for b in pool], 10)
    assert got == topk_reference(target.as_list(), [b.as_list() for b in pool], 10)
    assert [pool[i].x1 for i in got] == sorted(b.x1 for b in pool)[::-1]


@pytest.mark.parametrize("seed", range(20))
def test_top_k_matches_exhaustive_sort(seed):
    rng = np.random.default_rng(seed)
    b = random_boxes(rng, 40)
    target, pool = b[0].tolist(), b[1:].tolist()
    got = top_k_neighbors(ScoredRegion(BBox(*target)), [ScoredRegion(BBox(*p)) for p in pool], 7)
    assert got == topk_reference(target, pool, 7)
    ious = [iou_naive(target, pool[j]) for j in got]
    assert ious == sorted(ious, reverse=True)
