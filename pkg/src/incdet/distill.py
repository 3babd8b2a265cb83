"""Dual-teacher distillation: shared RoIs, output remodeling and the three distillation losses.

Student outputs are laid out as ``[background, base classes..., novel classes...]``
following the two-sided :class:`~incdet.core.ClassPartition` of the current
step. Loss functions take torch tensors and stay differentiable in the
student's inputs; teacher tensors are treated as constants.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels
from .core import ClassPartition

PROB_FLOOR = 1e-12


class NumericalError(FloatingPointError):
    """A loss term became NaN or infinite."""


class EmptyRoIError(ValueError):
    pass


@dataclass
class DistillHyper:
    lam: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be finite and non-negative, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillHyper":
        return cls(**d)


@dataclass
class SharedRoISet:
    rois: np.ndarray  # R x 4
    origin: np.ndarray  # R, "base" | "novel"
    objectness: np.ndarray  # R

    def __len__(self) -> int:
        return self.rois.shape[0]

    @property
    def is_base(self) -> np.ndarray:
        return self.origin == "base"


def select_shared_rois(
    base_props: np.ndarray,
    base_obj: np.ndarray,
    base_fg: np.ndarray,
    novel_props: np.ndarray,
    novel_obj: np.ndarray,
    novel_fg: np.ndarray,
    k_per_teacher: int = 16,
    dedup_iou: float = 0.95,
) -> SharedRoISet:
    """Union of each teacher's top-``k`` foreground proposals, de-duplicated.

    ``*_fg`` flags proposals whose argmax head class is foreground for that
    teacher. Among pairs overlapping with IoU ``> dedup_iou`` the one with
    higher objectness is kept (base wins exact ties).
    """
    picked = []
    for name, props, obj, fg in (
        ("base", base_props, base_obj, base_fg),
        ("novel", novel_props, novel_obj, novel_fg),
    ):
        props = np.asarray(props, dtype=np.float64).reshape(-1, 4)
        obj = np.asarray(obj, dtype=np.float64)
        idx = np.flatnonzero(np.asarray(fg, dtype=bool))
        idx = idx[np.argsort(-obj[idx], kind="stable")][:k_per_teacher]
        picked.extend((-obj[i], 0 if name == "base" else 1, name, props[i]) for i in idx)
    if not picked:
        raise EmptyRoIError("neither teacher has a foreground proposal")
    picked.sort(key=lambda p: (p[0], p[1]))
    boxes = np.array([p[3] for p in picked])
    # IoU > dedup_iou suppresses, so hand the kernel the next representable threshold
    keep = kernels.nms_ordered(boxes, np.nextafter(dedup_iou, 1.0))
    keep = np.sort(keep)
    return SharedRoISet(
        boxes[keep],
        np.array([picked[i][2] for i in keep]),
        np.array([-picked[i][0] for i in keep]),
    )


def _slots(partition: ClassPartition, view: str):
    b, n = len(partition.base_ids), len(partition.novel_ids)
    base = list(range(1, b + 1))
    novel = list(range(b + 1, b + n + 1))
    if view == "base":
        return base, novel, b + n + 1
    if view == "novel":
        return novel, base, b + n + 1
    raise ValueError(f"view must be 'base' or 'novel', got {view!r}")


def remodel_probs(student_probs, partition: ClassPartition, view: str) -> torch.Tensor:
    """Fold the classes outside ``view`` into that view's background slot.

    Input ``(..., b+n+1)`` becomes ``(..., b+1)`` for the base view or
    ``(..., n+1)`` for the novel view; background stays in slot 0.
    """
    q = torch.as_tensor(student_probs)
    keep, fold, total = _slots(partition, view)
    if q.shape[-1] != total:
        raise ValueError(f"expected {total} class slots, got {q.shape[-1]}")
    bg = q[..., [0] + fold].sum(-1, keepdim=True)
    return torch.cat([bg, q[..., keep]], dim=-1)


def remodel_regressions(student_regs, partition: ClassPartition, view: str) -> torch.Tensor:
    """Rows ``(..., b+n, 4)`` of the view's foreground classes, order preserved."""
    r = torch.as_tensor(student_regs)
    keep, _, total = _slots(partition, view)
    if r.shape[-2] != total - 1:
        raise ValueError(f"expected {total - 1} regression rows, got {r.shape[-2]}")
    return r[..., [k - 1 for k in keep], :]


def kl_teacher_student(q_teacher: torch.Tensor, q_student: torch.Tensor) -> torch.Tensor:
    """Row-wise ``KL(teacher || student)`` with a floor inside the student log."""
    log_s = torch.log(torch.clamp(q_student, min=PROB_FLOOR))
    return (torch.xlogy(q_teacher, q_teacher) - q_teacher * log_s).sum(-1)


def rcnn_distill_loss(
    student_probs: torch.Tensor,
    student_regs: torch.Tensor,
    is_base: np.ndarray,
    base_probs: torch.Tensor,
    base_regs: torch.Tensor,
    novel_probs: torch.Tensor,
    novel_regs: torch.Tensor,
    partition: ClassPartition,
    lam: float = 1.0,
) -> torch.Tensor:
    """KL on remodeled probabilities plus ``lam`` times smooth-L1 on remodeled deltas.

    Student tensors cover every shared RoI (``R x (b+n+1)``, ``R x (b+n) x 4``);
    teacher tensors cover only their own-origin RoIs, in the same order. The
    smooth-L1 term uses each RoI's teacher argmax foreground row, summed over
    the four deltas. The result is the mean over all shared RoIs.
    """
    is_base = torch.as_tensor(np.asarray(is_base, dtype=bool))
    n_roi = is_base.numel()
    if n_roi == 0:
        raise EmptyRoIError("no shared RoIs")
    total = student_probs.new_zeros(())
    for view, mask, q_t, r_t in (("base", is_base, base_probs, base_regs), ("novel", ~is_base, novel_probs, novel_regs)):
        if not bool(mask.any()):
            continue
        q_s = remodel_probs(student_probs[mask], partition, view)
        r_s = remodel_regressions(student_regs[mask], partition, view)
        q_t = torch.as_tensor(q_t, dtype=q_s.dtype)
        r_t = torch.as_tensor(r_t, dtype=r_s.dtype)
        if q_t.shape != q_s.shape:
            raise ValueError(f"{view} teacher probabilities {tuple(q_t.shape)} do not match {tuple(q_s.shape)}")
        rows = q_t[:, 1:].argmax(dim=1)
        ar = torch.arange(rows.numel())
        reg = F.smooth_l1_loss(r_s[ar, rows], r_t[ar, rows], beta=1.0, reduction="none").sum(-1)
        total = total + (kl_teacher_student(q_t, q_s) + lam * reg).sum()
    return total / n_roi


def build_roi_mask(pseudo_gt, fm_shape: tuple[int, int], stride: int, source: str) -> np.ndarray:
    """Binary ``H x W`` grid marking cells whose footprint meets a pseudo box of ``source``."""
    boxes = np.array([b.as_list() for b in pseudo_gt.boxes(source)], dtype=np.float64).reshape(-1, 4)
    return kernels.footprint_mask(boxes, fm_shape[0], fm_shape[1], stride)


def _masked_sq(f_a: torch.Tensor, f_b: torch.Tensor, mask) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(mask), dtype=f_a.dtype)
    n = float(m.sum())
    if n == 0:
        return f_a.new_zeros(())
    # masked-out cells are dropped, not multiplied by zero, so non-finite values there cannot leak
    sel = m.bool()
    diff = f_a[:, sel] - f_b[:, sel]
    return (diff * diff).sum() / (2.0 * n)


def image_distill_loss(f_stud, f_base, f_novel, mask_base, mask_novel) -> torch.Tensor:
    """Feature imitation restricted to the RoI masks, normalised by mask area per teacher.

    A teacher whose mask is empty contributes exactly 0.
    """
    f_stud = torch.as_tensor(f_stud)
    f_base = torch.as_tensor(f_base, dtype=f_stud.dtype)
    f_novel = torch.as_tensor(f_novel, dtype=f_stud.dtype)
    if f_stud.shape != f_base.shape or f_stud.shape != f_novel.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_stud.shape)}, {tuple(f_base.shape)}, {tuple(f_novel.shape)}")
    hw = tuple(f_stud.shape[-2:])
    for m in (mask_base, mask_novel):
        if tuple(np.shape(m)) != hw:
            raise ValueError(f"mask shape {np.shape(m)} does not match feature grid {hw}")
    return _masked_sq(f_stud, f_base, mask_base) + _masked_sq(f_stud, f_novel, mask_novel)


def heatmap(roi_feature) -> torch.Tensor:
    """Sigmoid of the channel mean: ``(..., C, P, P) -> (..., P, P)``."""
    f = torch.as_tensor(roi_feature)
    return torch.sigmoid(f.mean(dim=-3))


def instance_distill_loss(f_base, f_novel, f_stud) -> torch.Tensor:
    """MSE between the student heatmaps and the element-wise max of the teachers' heatmaps.

    Inputs are per-RoI features ``R x C x P x P`` on the same shared RoIs.
    """
    f_stud = torch.as_tensor(f_stud)
    if f_stud.shape[0] == 0:
        raise EmptyRoIError("no shared RoIs")
    target = torch.maximum(heatmap(torch.as_tensor(f_base, dtype=f_stud.dtype)), heatmap(torch.as_tensor(f_novel, dtype=f_stud.dtype)))
    return ((target - heatmap(f_stud)) ** 2).mean()


def total_loss(supervised: Sequence, distill: Sequence, hyper: DistillHyper) -> torch.Tensor:
    """``L_RCNN + L_RPN + alpha1 * L_rcnn_dist + alpha2 * L_im_dist + alpha3 * L_in_dist``."""
    names = ("L_RCNN", "L_RPN", "L_rcnn_dist", "L_im_dist", "L_in_dist")
    terms = list(supervised) + list(distill)
    if len(terms) != 5:
        raise ValueError("expected two supervised and three distillation terms")
    for name, t in zip(names, terms):
        v = float(t.detach()) if isinstance(t, torch.Tensor) else float(t)
        if not math.isfinite(v):
            raise NumericalError(f"{name} is {v}")
    weights = (1.0, 1.0, hyper.alpha1, hyper.alpha2, hyper.alpha3)
    out = 0.0
    for w, t in zip(weights, terms):
        if w:
            out = out + w * t
    return out if isinstance(out, torch.Tensor) else torch.tensor(float(out))
