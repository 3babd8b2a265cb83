import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from incdet.core import Box, ClassPartition
from incdet.distill import (
    DistillHyper,
    EmptyRoIError,
    NumericalError,
    build_roi_mask,
    heatmap,
    image_distill_loss,
    instance_distill_loss,
    kl_teacher_student,
    rcnn_distill_loss,
    remodel_probs,
    remodel_regressions,
    select_shared_rois,
    total_loss,
)
from incdet.sampler import PseudoEntry, PseudoGroundTruth
from micro import micro_problem
from oracles import gradient_check

P21 = ClassPartition((0, 1), ((2,),))
t = torch.tensor


def simplex(draw, k):
    w = draw(arrays(np.float64, k, elements=st.floats(0.0, 1.0)))
    w = w + 1e-3
    return w / w.sum()


@st.composite
def partition_and_probs(draw):
    b = draw(st.integers(1, 5))
    n = draw(st.integers(1, 5))
    part = ClassPartition(tuple(range(b)), (tuple(range(b, b + n)),))
    return part, simplex(draw, b + n + 1)


class TestRemodel:
    def test_examples(self):
        q = t([0.1, 0.3, 0.2, 0.4], dtype=torch.float64)
        assert torch.allclose(remodel_probs(q, P21, "base"), t([0.5, 0.3, 0.2], dtype=torch.float64), atol=1e-15)
        assert torch.allclose(remodel_probs(q, P21, "novel"), t([0.6, 0.4], dtype=torch.float64), atol=1e-15)
        one_hot = t([0.0, 1.0, 0.0, 0.0])
        assert remodel_probs(one_hot, P21, "base").tolist() == [0.0, 1.0, 0.0]
        assert remodel_probs(one_hot, P21, "novel").tolist() == [1.0, 0.0]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            remodel_probs(t([0.5, 0.5]), P21, "base")
        with pytest.raises(ValueError):
            remodel_probs(t([0.1, 0.3, 0.2, 0.4]), P21, "sideways")
        with pytest.raises(ValueError):
            remodel_regressions(torch.zeros(2, 4), P21, "base")

    @settings(max_examples=200, deadline=None)
    @given(partition_and_probs())
    def test_mass_and_fold(self, pq):
        part, q = pq
        b = len(part.base_ids)
        qt = torch.as_tensor(q)
        base = remodel_probs(qt, part, "base").numpy()
        novel = remodel_probs(qt, part, "novel").numpy()
        assert abs(base.sum() - q.sum()) < 1e-9 and abs(novel.sum() - q.sum()) < 1e-9
        assert np.array_equal(base[1:], q[1 : b + 1])
        assert np.array_equal(novel[1:], q[b + 1 :])
        assert base[0] == pytest.approx(q[0] + q[b + 1 :].sum(), abs=1e-12)
        assert novel[0] == pytest.approx(q[0] + q[1 : b + 1].sum(), abs=1e-12)

    def test_regressions(self):
        r = torch.arange(12.0).view(3, 4)
        assert torch.equal(remodel_regressions(r, P21, "base"), r[:2])
        assert torch.equal(remodel_regressions(r, P21, "novel"), r[2:])
        both = torch.cat([remodel_regressions(r, P21, "base"), remodel_regressions(r, P21, "novel")])
        assert torch.equal(both, r)


class TestRCNNLoss:
    def test_closed_form_kl(self):
        v = kl_teacher_student(t([0.5, 0.5], dtype=torch.float64), t([0.25, 0.75], dtype=torch.float64))
        assert float(v) == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-9)
        assert float(v) == pytest.approx(0.143841, abs=1e-6)

    def test_single_roi_kl_lambda_zero(self):
        # student novel view (bg .25, c3 .75): probs (bg .05, c1 .1, c2 .1, c3 .75)
        sp = t([[0.05, 0.1, 0.1, 0.75]], dtype=torch.float64)
        sr = torch.zeros(1, 3, 4, dtype=torch.float64)
        loss = rcnn_distill_loss(
            sp, sr, np.array([False]), torch.zeros(0, 3), torch.zeros(0, 2, 4),
            t([[0.5, 0.5]], dtype=torch.float64), torch.ones(1, 1, 4, dtype=torch.float64), P21, lam=0.0,
        )
        assert float(loss) == pytest.approx(0.143841036, abs=1e-9)

    def test_smooth_l1_quadratic_branch(self):
        sp = t([[0.2, 0.5, 0.3, 0.0]], dtype=torch.float64)
        teacher_p = remodel_probs(sp, P21, "base")
        sr = torch.zeros(1, 3, 4, dtype=torch.float64)
        tr = torch.zeros(1, 2, 4, dtype=torch.float64)
        tr[0, 0, 1] = 0.5  # teacher argmax foreground row is c1
        loss = rcnn_distill_loss(sp, sr, np.array([True]), teacher_p, tr, torch.zeros(0, 2), torch.zeros(0, 1, 4), P21, 1.0)
        assert float(loss) == pytest.approx(0.125, abs=1e-12)

    def test_zero_at_teacher_equal(self):
        rng = np.random.default_rng(0)
        sp = torch.as_tensor(rng.dirichlet(np.ones(4), size=5))
        sr = torch.as_tensor(rng.normal(size=(5, 3, 4)))
        is_base = np.array([True, False, True, False, False])
        bp = remodel_probs(sp[is_base], P21, "base")
        np_ = remodel_probs(sp[~is_base], P21, "novel")
        br = remodel_regressions(sr[is_base], P21, "base")
        nr = remodel_regressions(sr[~is_base], P21, "novel")
        assert float(rcnn_distill_loss(sp, sr, is_base, bp, br, np_, nr, P21, 1.0)) == 0.0

    def test_empty_roi_set(self):
        with pytest.raises(EmptyRoIError):
            rcnn_distill_loss(torch.zeros(0, 4), torch.zeros(0, 3, 4), np.zeros(0, bool), None, None, None, None, P21)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 10_000))
    def test_kl_nonnegative_and_zero_iff_equal(self, k, seed):
        rng = np.random.default_rng(seed)
        p = torch.as_tensor(rng.dirichlet(np.ones(k)))
        q = torch.as_tensor(rng.dirichlet(np.ones(k)))
        assert float(kl_teacher_student(p, q)) >= -1e-15
        assert abs(float(kl_teacher_student(p, p))) < 1e-12
        if float(torch.abs(p - q).max()) > 1e-3:
            assert float(kl_teacher_student(p, q)) > 0

    def test_floor_keeps_kl_finite(self):
        v = kl_teacher_student(t([0.5, 0.5], dtype=torch.float64), t([1.0, 0.0], dtype=torch.float64))
        assert math.isfinite(float(v))


class TestImageLoss:
    def test_hand_case(self):
        one = np.ones((1, 1), dtype=np.uint8)
        v = image_distill_loss(t([[[1.0]]]), t([[[0.0]]]), t([[[3.0]]]), one, one)
        assert float(v) == 2.5

    def test_zero_masks_and_equal_features(self):
        f = torch.randn(3, 4, 4)
        zero = np.zeros((4, 4), np.uint8)
        assert float(image_distill_loss(f, f + 1, f - 2, zero, zero)) == 0.0
        ones = np.ones((4, 4), np.uint8)
        assert float(image_distill_loss(f, f, f, ones, ones)) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_masked_out_cells_do_not_matter(self, seed):
        rng = np.random.default_rng(seed)
        fs, fb, fn = (torch.as_tensor(rng.normal(size=(3, 5, 5))) for _ in range(3))
        mb = (rng.random((5, 5)) < 0.4).astype(np.uint8)
        mn = (rng.random((5, 5)) < 0.4).astype(np.uint8)
        ref = float(image_distill_loss(fs, fb, fn, mb, mn))
        off = torch.as_tensor(((mb == 0) & (mn == 0)).astype(np.float64))
        noise = torch.as_tensor(rng.normal(scale=100.0, size=(3, 5, 5))) * off
        assert abs(float(image_distill_loss(fs + noise, fb - noise, fn + 2 * noise, mb, mn)) - ref) <= 1e-12

    def test_normalisation_by_mask_area(self):
        fs = torch.zeros(2, 2, 2, dtype=torch.float64)
        fb = torch.ones(2, 2, 2, dtype=torch.float64)
        mb = np.array([[1, 1], [0, 0]], np.uint8)
        zero = np.zeros((2, 2), np.uint8)
        # 2 channels x 2 cells of squared error 1, over 2N = 4
        assert float(image_distill_loss(fs, fb, fb, mb, zero)) == 1.0

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            image_distill_loss(torch.zeros(1, 2, 2), torch.zeros(1, 2, 3), torch.zeros(1, 2, 2), np.ones((2, 2)), np.ones((2, 2)))
        with pytest.raises(ValueError):
            image_distill_loss(torch.zeros(1, 2, 2), torch.zeros(1, 2, 2), torch.zeros(1, 2, 2), np.ones((3, 2)), np.ones((2, 2)))


class TestMask:
    def _pgt(self, *boxes, source="base"):
        return PseudoGroundTruth(0, [PseudoEntry(Box(*b), 0, 0.9, source, 3) for b in boxes])

    def test_cases(self):
        assert build_roi_mask(self._pgt(), (4, 4), 8, "base").sum() == 0
        assert build_roi_mask(self._pgt((0, 0, 32, 32)), (4, 4), 8, "base").sum() == 16
        m = build_roi_mask(self._pgt((0, 0, 16, 16)), (4, 4), 8, "base")
        assert np.argwhere(m).tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]
        assert build_roi_mask(self._pgt((0, 0, 16, 16), source="novel"), (4, 4), 8, "base").sum() == 0
        assert set(np.unique(m)) <= {0, 1}


class TestHeatmap:
    def test_closed_forms(self):
        assert torch.equal(heatmap(torch.zeros(3, 4, 4)), torch.full((4, 4), 0.5))
        a = torch.full((1, 4, 4), 2.0)
        assert torch.allclose(heatmap(torch.cat([a, -a])), torch.full((4, 4), 0.5))
        assert torch.allclose(heatmap(torch.ones(7, 2, 2, dtype=torch.float64)), torch.full((2, 2), 0.7310585786300049, dtype=torch.float64))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_range_and_channel_permutation(self, seed):
        rng = np.random.default_rng(seed)
        f = torch.as_tensor(rng.normal(scale=3.0, size=(6, 4, 4)))
        h = heatmap(f)
        assert ((h > 0) & (h < 1)).all()
        perm = torch.as_tensor(rng.permutation(6))
        assert torch.allclose(heatmap(f[perm]), h, atol=1e-15)


class TestInstanceLoss:
    def _feat(self, value):
        # single channel single cell whose heatmap equals ``value``
        return torch.tensor([[[[math.log(value / (1 - value))]]]], dtype=torch.float64)

    def test_single_cell(self):
        fb, fn = self._feat(0.2), self._feat(0.6)
        assert float(instance_distill_loss(fb, fn, self._feat(0.6))) == pytest.approx(0.0, abs=1e-15)
        assert float(instance_distill_loss(fb, fn, self._feat(0.5))) == pytest.approx(0.01, abs=1e-12)
        z = torch.zeros(3, 4, 2, 2)
        assert float(instance_distill_loss(z, z, z)) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_teacher_swap_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        fb, fn, fs = (torch.as_tensor(rng.normal(size=(3, 4, 2, 2))) for _ in range(3))
        assert float(instance_distill_loss(fb, fn, fs)) == float(instance_distill_loss(fn, fb, fs))

    def test_empty(self):
        with pytest.raises(EmptyRoIError):
            instance_distill_loss(torch.zeros(0, 2, 2, 2), torch.zeros(0, 2, 2, 2), torch.zeros(0, 2, 2, 2))


class TestSharedRoIs:
    def test_disjoint_regions(self):
        bp = np.array([[0, 0, 10, 10], [20, 0, 30, 10], [40, 0, 50, 10.0]])
        npp = np.array([[0, 30, 10, 40], [20, 30, 30, 40], [40, 30, 50, 40.0]])
        s = select_shared_rois(bp, [0.9, 0.8, 0.7], [True] * 3, npp, [0.95, 0.6, 0.5], [True] * 3, k_per_teacher=2)
        assert len(s) == 4
        assert s.is_base.sum() == 2 and (~s.is_base).sum() == 2

    def test_background_teacher_contributes_nothing(self):
        bp = np.array([[0, 0, 10, 10.0]])
        npp = np.array([[20, 20, 30, 30.0]])
        s = select_shared_rois(bp, [0.9], [False], npp, [0.5], [True])
        assert s.origin.tolist() == ["novel"]
        with pytest.raises(EmptyRoIError):
            select_shared_rois(bp, [0.9], [False], npp, [0.5], [False])

    def test_dedup_keeps_higher_objectness(self):
        box = np.array([[0, 0, 10, 10.0]])
        s = select_shared_rois(box, [0.6], [True], box, [0.9], [True])
        assert s.origin.tolist() == ["novel"] and s.objectness.tolist() == [0.9]
        # IoU exactly 0.95 is kept (only strictly greater is a duplicate)
        near = np.array([[0, 0, 9.5, 10.0]])
        s = select_shared_rois(box, [0.6], [True], near, [0.9], [True])
        assert len(s) == 2


class TestTotal:
    def test_examples(self):
        one = torch.ones(())
        assert float(total_loss((one, one), (one, one, one), DistillHyper())) == 5.0
        h0 = DistillHyper(alpha1=0, alpha2=0, alpha3=0)
        assert float(total_loss((one, 2 * one), (one * 7, one * 7, one * 7), h0)) == 3.0

    def test_nan_names_term(self):
        one = torch.ones(())
        with pytest.raises(NumericalError, match="L_im_dist"):
            total_loss((one, one), (one, torch.tensor(float("nan")), one), DistillHyper())

    def test_hyper_validation(self):
        with pytest.raises(ValueError):
            DistillHyper(alpha1=-1.0)
        with pytest.raises(ValueError):
            DistillHyper(lam=float("inf"))

    @pytest.mark.parametrize("seed", [0, 1])
    def test_gradient_matches_finite_differences(self, seed):
        student, loss_fn = micro_problem(seed)
        worst, checked, _ = gradient_check(student, loss_fn, n_params=20, h=1e-3, seed=seed)
        assert len(checked) == 20
        assert worst < 1e-4
