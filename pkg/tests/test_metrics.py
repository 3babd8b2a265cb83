import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incdet.core import Box, ClassPartition, Detection
from incdet.metrics import (
    BaseNovelAll,
    average_precision,
    coco_map,
    evaluate_detections,
    interpolated_ap,
    report_base_novel_all,
    voc_map,
)
from oracles import brute_force_ap


@st.composite
def int_box(draw):
    x1 = draw(st.integers(0, 20))
    y1 = draw(st.integers(0, 20))
    return (x1, y1, x1 + draw(st.integers(2, 12)), y1 + draw(st.integers(2, 12)))


@st.composite
def ap_case(draw):
    n_img = draw(st.integers(1, 2))
    gts = draw(st.lists(st.tuples(st.integers(0, n_img - 1), int_box()), max_size=3))
    dets = draw(
        st.lists(
            st.tuples(st.integers(0, n_img - 1), st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9, 0.95]), int_box()),
            max_size=5,
        )
    )
    return dets, gts


def to_maps(dets, gts):
    dm, gm = {}, {}
    for img, s, b in dets:
        dm.setdefault(img, []).append(Detection(Box(*b), 0, s))
    for img, b in gts:
        gm.setdefault(img, []).append(Detection(Box(*b), 0))
    return dm, gm


@settings(max_examples=400, deadline=None)
@given(ap_case(), st.sampled_from([0.3, 0.5, 0.7]))
def test_ap_equals_brute_force(case, thr):
    dets, gts = case
    dm, gm = to_maps(dets, gts)
    got = average_precision(dm, gm, 0, thr)
    want = brute_force_ap(dets, gts, thr)
    if want is None:
        assert got is None
    else:
        assert got == pytest.approx(want, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(ap_case())
def test_coco101_equals_brute_force(case):
    dets, gts = case
    dm, gm = to_maps(dets, gts)
    got = average_precision(dm, gm, 0, 0.5, method="coco101")
    want = brute_force_ap(dets, gts, 0.5, method="coco101")
    assert (got is None) == (want is None)
    if want is not None:
        assert got == pytest.approx(want, abs=1e-9)


def test_examples():
    g = [Detection(Box(0, 0, 10, 10), 0), Detection(Box(20, 20, 30, 30), 0)]
    assert average_precision([Detection(d.box, 0, 0.9) for d in g], g, 0) == 1.0
    assert average_precision([], g, 0) == 0.0
    assert average_precision([Detection(Box(0, 0, 1, 1), 0, 0.5)], [], 0) is None
    # two gts, three detections: a hit, a duplicate of it, a miss elsewhere
    dets = [
        Detection(Box(0, 0, 10, 10), 0, 0.9),
        Detection(Box(0, 0, 10, 11), 0, 0.8),
        Detection(Box(20, 20, 30, 30), 0, 0.7),
    ]
    want = brute_force_ap([(0, d.score, d.box.as_list()) for d in dets], [(0, b.box.as_list()) for b in g])
    assert average_precision(dets, g, 0) == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3), abs=1e-12)
    with pytest.raises(ValueError):
        average_precision(dets, g, 0, iou_thr=1.0)


def test_interpolation_flag():
    r = np.array([0.5, 0.5, 1.0])
    p = np.array([1.0, 0.5, 2 / 3])
    assert interpolated_ap(r, p) == pytest.approx(0.5 + 0.5 * 2 / 3)
    with pytest.raises(ValueError):
        interpolated_ap(r, p, "eleven")


def random_fixture(seed=0, n_img=10, classes=(0, 1, 2)):
    rng = np.random.default_rng(seed)
    dets, gts = {}, {}
    for i in range(n_img):
        gts[i] = []
        dets[i] = []
        for _ in range(rng.integers(1, 4)):
            c = int(rng.choice(classes))
            x, y = rng.uniform(0, 40, 2)
            w, h = rng.uniform(5, 20, 2)
            gts[i].append(Detection(Box(x, y, x + w, y + h), c))
            if rng.random() < 0.8:
                j = rng.uniform(-2, 2, 4)
                dets[i].append(Detection(Box(x + j[0], y + j[1], x + w + j[2], y + h + j[3]), c, float(rng.random())))
        for _ in range(rng.integers(0, 2)):
            x, y = rng.uniform(0, 40, 2)
            dets[i].append(Detection(Box(x, y, x + 8, y + 8), int(rng.choice(classes)), float(rng.random())))
    return dets, gts


def test_voc_map_fixture_matches_oracle():
    dets, gts = random_fixture()
    per_class, m = voc_map(dets, gts, [0, 1, 2])
    for c in (0, 1, 2):
        flat_d = [(i, d.score, d.box.as_list()) for i, ds in dets.items() for d in ds if d.class_id == c]
        flat_g = [(i, g.box.as_list()) for i, gs in gts.items() for g in gs if g.class_id == c]
        if len(flat_d) <= 7:  # keep the enumeration small
            assert per_class[c] == pytest.approx(brute_force_ap(flat_d, flat_g), abs=1e-9)
    assert m == pytest.approx(np.mean([v for v in per_class.values() if v is not None]))


def test_order_free_and_monotone_rescaling():
    dets, gts = random_fixture(1)
    _, m = voc_map(dets, gts, [0, 1, 2])
    shuffled = {}
    for i, ds in reversed(list(dets.items())):
        ds = list(ds)
        random.Random(i).shuffle(ds)
        shuffled[i] = ds
    assert voc_map(shuffled, gts, [0, 1, 2])[1] == m
    squashed = {i: [Detection(d.box, d.class_id, d.score**3) for d in ds] for i, ds in dets.items()}
    assert voc_map(squashed, gts, [0, 1, 2])[1] == pytest.approx(m, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(ap_case(), int_box())
def test_false_positive_never_helps(case, fp_box):
    dets, gts = case
    if not gts:
        return
    dm, gm = to_maps(dets, gts)
    base = average_precision(dm, gm, 0)
    # an extra detection in an image with no ground truth is always a false positive
    dm[99] = [Detection(Box(*fp_box), 0, 0.6)]
    assert average_precision(dm, gm, 0) <= base + 1e-12


@settings(max_examples=100, deadline=None)
@given(ap_case())
def test_top_true_positive_never_hurts(case):
    dets, gts = case
    if not gts:
        return
    dm, gm = to_maps(dets, gts)
    base = average_precision(dm, gm, 0)
    img, b = gts[0]
    dm2 = {k: list(v) for k, v in dm.items()}
    gm2 = {k: list(v) for k, v in gm.items()}
    # a new object found first and exactly
    new = Box(b[0] + 40, b[1] + 40, b[2] + 40, b[3] + 40)
    gm2.setdefault(img, []).append(Detection(new, 0))
    dm2.setdefault(img, []).append(Detection(new, 0, 1.0))
    assert average_precision(dm2, gm2, 0) >= base - 1e-12


def test_classes_absent_from_gt_count_against_own_class_only():
    g = {0: [Detection(Box(0, 0, 10, 10), 0)]}
    d = {0: [Detection(Box(0, 0, 10, 10), 0, 0.9), Detection(Box(0, 0, 10, 10), 5, 0.99)]}
    per_class, m = voc_map(d, g, [0, 5])
    assert per_class == {0: 1.0, 5: None} and m == 1.0


def test_coco_perfect_and_ordering():
    g = {0: [Detection(Box(0, 0, 10, 10), 0), Detection(Box(0, 0, 50, 50), 1)]}
    d = {0: [Detection(x.box, x.class_id, 0.9) for x in g[0]]}
    r = coco_map(d, g, [0, 1])
    assert r["AP"] == r["AP50"] == r["AP75"] == r["APS"] == r["APM"] == 1.0
    assert r["APL"] is None
    dets, gts = random_fixture(2)
    r = coco_map(dets, gts, [0, 1, 2])
    assert r["AP"] <= r["AP50"] + 1e-12
    assert r["AP75"] <= r["AP50"] + 1e-12


def test_coco_fixture_matches_oracle():
    dets, gts = random_fixture(3, n_img=4, classes=(0,))
    flat_d = [(i, d.score, d.box.as_list()) for i, ds in dets.items() for d in ds]
    flat_g = [(i, g.box.as_list()) for i, gs in gts.items() for g in gs]
    want = np.mean([brute_force_ap(flat_d, flat_g, t, "coco101") for t in np.round(np.arange(0.5, 0.951, 0.05), 2)])
    assert coco_map(dets, gts, [0])["AP"] == pytest.approx(want, abs=1e-9)


class TestBaseNovelAll:
    P = ClassPartition((0, 1), ((2,),))

    def test_render(self):
        assert report_base_novel_all({0: 0.5, 1: 0.5, 2: 0.5}, self.P).render() == "50.0 | 50.0 | 50.0"
        assert report_base_novel_all({0: 1.0, 1: 0.0, 2: 0.5}, self.P).render() == "50.0 | 50.0 | 50.0"
        assert BaseNovelAll(None, 0.25, 0.25).render() == "- | 25.0 | 25.0"

    def test_all_is_union_mean(self):
        p = ClassPartition((0, 1, 2), ((3,),))
        r = report_base_novel_all({0: 1.0, 1: 1.0, 2: 1.0, 3: 0.0}, p)
        assert r.all == 0.75
        assert r.all != (r.base + r.novel) / 2

    def test_evaluate_detections_report(self):
        g = {0: [Detection(Box(0, 0, 10, 10), c) for c in (0, 1, 2)]}
        d = {0: [Detection(x.box, x.class_id, 0.9) for x in g[0]]}
        rep = evaluate_detections(d, g, self.P)
        assert rep["base_novel_all"]["text"] == "100.0 | 100.0 | 100.0"
        assert rep["per_class_ap"] == {"0": 1.0, "1": 1.0, "2": 1.0}
        assert "coco" in evaluate_detections(d, g, self.P, "coco")
        with pytest.raises(ValueError):
            evaluate_detections(d, g, self.P, "kitti")
