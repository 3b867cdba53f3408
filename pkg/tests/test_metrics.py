import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hasa.errors import UsageError
from hasa.metrics import (
    boundary,
    boundary_distance,
    classification_metrics,
    confusion_matrix,
    incomplete_beta,
    paired_t_test,
    region_overlap,
    segmentation_metrics,
)

# scipy.stats.ttest_1samp([1, 2, 3, 4, 5], 0)
T_12345 = 4.242640687119285
P_12345 = 0.013235599563682695


# ---------------------------------------------------------------- confusion / classification


def test_perfect_predictions_diagonal():
    cm = confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert np.array_equal(cm.counts, np.diag([1, 1, 2]))
    assert classification_metrics(cm) == {"accuracy": 1.0, "precision": 1.0, "recall": 1.0, "f1": 1.0}


def test_confusion_direct():
    cm = confusion_matrix([0, 1], [1, 1], 2)
    assert cm.counts[1, 0] == 1 and cm.counts[1, 1] == 1 and cm.total == 2


@settings(max_examples=50, deadline=None)
@given(labels=st.lists(st.integers(0, 4), min_size=1, max_size=60), seed=st.integers(0, 1000))
def test_row_sums_recount(labels, seed):
    preds = np.random.default_rng(seed).integers(0, 5, size=len(labels))
    cm = confusion_matrix(preds, labels, 5)
    assert cm.counts.sum(axis=1).tolist() == [labels.count(c) for c in range(5)]
    assert cm.total == len(labels)


def test_confusion_errors():
    with pytest.raises(UsageError):
        confusion_matrix([0, 3], [0, 1], 3)
    with pytest.raises(UsageError):
        confusion_matrix([0], [0, 1], 3)
    with pytest.raises(UsageError):
        classification_metrics(confusion_matrix([], [], 3))


def test_hand_worked_two_class():
    cm = confusion_matrix([0] * 8 + [1] * 2 + [0] * 3 + [1] * 7, [0] * 10 + [1] * 10, 2)
    assert cm.counts.tolist() == [[8, 2], [3, 7]]
    m = classification_metrics(cm)
    p0, r0 = 8 / 11, 0.8
    p1, r1 = 7 / 9, 0.7
    f = lambda p, r: 2 * p * r / (p + r)  # noqa: E731
    assert m["accuracy"] == 0.75
    assert abs(m["precision"] - (p0 + p1) / 2) < 1e-12
    assert abs(m["recall"] - (r0 + r1) / 2) < 1e-12
    assert abs(m["f1"] - (f(p0, r0) + f(p1, r1)) / 2) < 1e-12


def test_macro_average_excludes_empty_classes():
    cm = confusion_matrix([0, 0, 1], [0, 1, 1], 3)
    m = classification_metrics(cm, "macro")
    assert abs(m["recall"] - (1.0 + 0.5) / 2) < 1e-12
    with pytest.raises(UsageError):
        classification_metrics(cm, "micro")


@pytest.mark.parametrize("seed", range(100))
def test_weighted_recall_equals_accuracy(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 10))
    counts = rng.integers(0, 20, size=(k, k))
    counts[rng.integers(k)] = 0  # an absent class now and then
    if counts.sum() == 0:
        counts[0, 0] = 1
    cm = confusion_matrix(*_expand(counts), k)
    m = classification_metrics(cm)
    assert abs(m["recall"] - m["accuracy"]) < 1e-12


def _expand(counts):
    preds, labels = [], []
    for g in range(counts.shape[0]):
        for p in range(counts.shape[1]):
            preds += [p] * int(counts[g, p])
            labels += [g] * int(counts[g, p])
    return preds, labels


def test_confusion_csv():
    text = confusion_matrix([0, 1], [1, 1], 2).to_csv()
    assert text.splitlines() == ["truth\\pred,0,1", "0,0,0", "1,1,1"]


# ---------------------------------------------------------------- region overlap


def test_overlap_examples():
    g = np.zeros((20, 20), dtype=bool)
    g[:10, :10] = True
    assert region_overlap(g, g) == (1.0, 1.0)
    assert region_overlap(g, ~g) == (0.0, 0.0)
    p = np.zeros_like(g)
    p[:5, :10] = True
    dsc, jc = region_overlap(p, g)
    assert abs(dsc - 2 / 3) < 1e-15 and jc == 0.5
    assert abs(dsc - 2 * jc / (1 + jc)) < 1e-15
    assert region_overlap(np.zeros_like(g), np.zeros_like(g)) == (1.0, 1.0)


def test_overlap_by_class_id():
    a = np.array([[0, 1, 2], [2, 2, 1]])
    b = np.array([[0, 1, 1], [2, 2, 0]])
    assert region_overlap(a, b, 2) == (2 * 2 / 5, 2 / 3)
    with pytest.raises(UsageError):
        region_overlap(a, b[:1])


masks = arrays(bool, st.tuples(st.integers(1, 16), st.integers(1, 16)))


@settings(max_examples=200, deadline=None)
@given(data=st.data())
def test_dice_jaccard_relation(data):
    p = data.draw(masks)
    g = data.draw(arrays(bool, p.shape))
    dsc, jc = region_overlap(p, g)
    assert abs(dsc - 2 * jc / (1 + jc)) < 1e-12
    assert 0 <= jc <= dsc <= 1


# ---------------------------------------------------------------- boundary distances


def brute_surface(mask):
    """4-connected surface by direct neighbour inspection."""
    h, w = mask.shape
    pts = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            nbrs = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
            if any(not (0 <= a < h and 0 <= b < w) or not mask[a, b] for a, b in nbrs):
                pts.append((y, x))
    return pts


def brute_distances(p, g):
    sp, sg = brute_surface(p), brute_surface(g)
    d_pg = [min(math.dist(a, b) for b in sg) for a in sp]
    d_gp = [min(math.dist(a, b) for b in sp) for a in sg]
    return max(max(d_pg), max(d_gp)), (sum(d_pg) + sum(d_gp)) / (len(d_pg) + len(d_gp))


def test_boundary_extraction():
    m = np.zeros((5, 5), dtype=bool)
    m[1:4, 1:4] = True
    b = boundary(m)
    assert b.sum() == 8 and not b[2, 2]
    assert boundary(np.ones((3, 3), dtype=bool)).sum() == 8


def test_identical_masks_distance_zero():
    m = np.zeros((10, 10), dtype=bool)
    m[2:7, 3:8] = True
    sd = boundary_distance(m, m)
    assert sd.hd == 0.0 and sd.asd == 0.0 and not sd.empty


def test_single_pixels_3_4_5():
    p = np.zeros((8, 8), dtype=bool)
    g = np.zeros((8, 8), dtype=bool)
    p[0, 0] = True
    g[3, 4] = True
    sd = boundary_distance(p, g)
    assert sd.hd == 5.0 and sd.asd == 5.0


def test_empty_sentinel():
    p = np.zeros((6, 8), dtype=bool)
    g = p.copy()
    g[2, 2] = True
    sd = boundary_distance(p, g)
    assert sd.empty and sd.hd == sd.asd == 10.0
    assert boundary_distance(p, p).hd == 0.0


@pytest.mark.parametrize("seed", range(100))
def test_distances_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    h, w = (int(v) for v in rng.integers(4, 33, size=2))
    p = rng.random((h, w)) < rng.uniform(0.05, 0.6)
    g = rng.random((h, w)) < rng.uniform(0.05, 0.6)
    p[rng.integers(h), rng.integers(w)] = True
    g[rng.integers(h), rng.integers(w)] = True
    hd, asd = brute_distances(p, g)
    sd = boundary_distance(p, g)
    assert sd.hd == hd
    assert abs(sd.asd - asd) < 1e-12


@settings(max_examples=60, deadline=None)
@given(data=st.data())
def test_distance_properties(data):
    p = data.draw(masks)
    g = data.draw(arrays(bool, p.shape))
    if not p.any() or not g.any():
        return
    a, b = boundary_distance(p, g), boundary_distance(g, p)
    assert a.hd == b.hd
    assert a.hd >= a.asd >= 0


def test_segmentation_metrics_shape():
    gt = np.zeros((2, 16, 16), dtype=np.int64)
    gt[:, 2:14, 2:14] = 1
    gt[:, 5:9, 5:9] = 2
    m = segmentation_metrics(gt, gt)
    assert m["follicle"] == {"dsc": 1.0, "jc": 1.0, "hd": 0.0, "asd": 0.0}
    assert set(m) == {"ovary", "follicle"}


# ---------------------------------------------------------------- t-test


def test_t_test_reference_example():
    r = paired_t_test([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    assert abs(r.t - 3 / (math.sqrt(2.5) / math.sqrt(5))) < 1e-12
    assert abs(r.t - 4.2426) < 1e-4
    assert abs(r.t - T_12345) < 1e-12
    assert abs(r.p - P_12345) < 1e-10
    assert abs(r.p - 0.0132) < 1e-3
    assert r.dof == 4


def test_t_test_zero_mean():
    r = paired_t_test([1, -1, 1, -1], [0, 0, 0, 0])
    assert r.t == 0.0 and abs(r.p - 1.0) < 1e-12


def test_t_test_degenerate():
    r = paired_t_test([0.3, 0.5], [0.3, 0.5])
    assert r.degenerate and math.isnan(r.p)
    with pytest.raises(UsageError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(UsageError):
        paired_t_test([1.0, 2.0], [2.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=2, max_size=30))
def test_t_test_antisymmetric(pairs):
    a, b = zip(*pairs)
    r1, r2 = paired_t_test(a, b), paired_t_test(b, a)
    if r1.degenerate:
        assert r2.degenerate
        return
    assert r1.t == pytest.approx(-r2.t, rel=1e-12, abs=1e-12)
    assert r1.p == pytest.approx(r2.p, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("a,b,x", [(2.0, 0.5, 0.3), (0.5, 0.5, 0.5), (10.0, 0.5, 0.9), (1.0, 1.0, 0.25), (3.5, 0.5, 0.999)])
def test_incomplete_beta_against_scipy(a, b, x):
    from scipy.special import betainc

    assert abs(incomplete_beta(a, b, x) - betainc(a, b, x)) < 1e-12


def test_incomplete_beta_closed_forms():
    assert incomplete_beta(1.0, 1.0, 0.37) == pytest.approx(0.37, abs=1e-14)
    assert incomplete_beta(2.0, 3.0, 0.0) == 0.0 and incomplete_beta(2.0, 3.0, 1.0) == 1.0
    # I_x(a, 1) = x^a
    assert incomplete_beta(3.0, 1.0, 0.6) == pytest.approx(0.6 ** 3, abs=1e-14)
