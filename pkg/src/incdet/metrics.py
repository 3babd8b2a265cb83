"""Detection metrics: VOC-style mAP@0.5, COCO-style AP over IoU 0.50:0.95, base | novel | all."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .core import ClassPartition, Detection, boxes_to_array

COCO_IOUS = np.round(np.arange(0.5, 0.951, 0.05), 2)
SIZE_BUCKETS = {"all": (0.0, np.inf), "small": (0.0, 32.0**2), "medium": (32.0**2, 96.0**2), "large": (96.0**2, np.inf)}


def _per_image(x) -> Mapping:
    return x if isinstance(x, Mapping) else {0: list(x)}


def interpolated_ap(recall: np.ndarray, precision: np.ndarray, method: str = "continuous") -> float:
    """Area under the monotone precision envelope.

    ``continuous`` integrates over every recall step (all-points VOC);
    ``coco101`` samples the envelope at 101 evenly spaced recall levels.
    """
    if method == "coco101":
        env = np.maximum.accumulate(precision[::-1])[::-1] if precision.size else precision
        levels = np.linspace(0.0, 1.0, 101)
        idx = np.searchsorted(recall, levels, side="left")
        return float(np.mean([env[i] if i < env.size else 0.0 for i in idx]))
    if method != "continuous":
        raise ValueError(f"unknown interpolation {method!r}")
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def _match_class(dets, gts, class_id, iou_thr, area_range=(0.0, np.inf)):
    """Score-ordered TP/FP flags (ignored detections removed) and the count of counted gts."""
    lo, hi = area_range
    entries = []
    n_gt = 0
    gt_boxes = {}
    gt_ignore = {}
    for image_id in set(dets) | set(gts):
        g = [d for d in gts.get(image_id, []) if d.class_id == class_id]
        arr = boxes_to_array(d.box for d in g)
        area = (arr[:, 2] - arr[:, 0]) * (arr[:, 3] - arr[:, 1])
        ign = (area < lo) | (area >= hi)
        gt_boxes[image_id], gt_ignore[image_id] = arr, ign
        n_gt += int((~ign).sum())
        for d in dets.get(image_id, []):
            if d.class_id == class_id:
                entries.append((d.sort_key(), image_id, d))
    entries.sort(key=lambda e: (e[0], str(e[1])))
    by_image: dict = {}
    for pos, (_, image_id, d) in enumerate(entries):
        by_image.setdefault(image_id, []).append(pos)
    status = np.zeros(len(entries), dtype=np.int8)  # 1 tp, 0 fp, -1 ignored
    for image_id, positions in by_image.items():
        boxes = boxes_to_array(entries[p][2].box for p in positions)
        g, ign = gt_boxes[image_id], gt_ignore[image_id]
        ious = kernels.pairwise_iou(boxes, g)
        first = kernels.greedy_match(ious[:, ~ign], iou_thr)
        rest = np.flatnonzero(first < 0)
        second = kernels.greedy_match(ious[np.ix_(rest, np.flatnonzero(ign))], iou_thr) if rest.size else rest
        for k, p in enumerate(positions):
            status[p] = 1 if first[k] >= 0 else 0
        for k, r in enumerate(rest):
            if second[k] >= 0:
                status[positions[r]] = -1
            else:
                area = boxes[r, 2:] - boxes[r, :2]
                if not lo <= area[0] * area[1] < hi:
                    status[positions[r]] = -1
    scores = np.array([e[2].score for e in entries])
    keep = status >= 0
    return status[keep] == 1, scores[keep], n_gt


def average_precision(
    dets,
    gts,
    class_id: int,
    iou_thr: float = 0.5,
    method: str = "continuous",
    area_range=(0.0, np.inf),
) -> float | None:
    """AP of one class. ``dets``/``gts`` map image id to detections (a plain list means one image).

    Returns ``None`` when the class has no ground truth, so callers can leave
    it out of means.
    """
    if not 0.0 < iou_thr < 1.0:
        raise ValueError("iou_thr must lie in (0, 1)")
    tp, _, n_gt = _match_class(_per_image(dets), _per_image(gts), class_id, iou_thr, area_range)
    if n_gt == 0:
        return None
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    return interpolated_ap(ctp / n_gt, ctp / (ctp + cfp), method)


def voc_map(dets, gts, class_ids: Sequence[int], iou_thr: float = 0.5, method: str = "continuous"):
    """Per-class AP at one IoU threshold and their mean over classes with ground truth."""
    dets, gts = _per_image(dets), _per_image(gts)
    per_class = {c: average_precision(dets, gts, c, iou_thr, method) for c in class_ids}
    present = [v for v in per_class.values() if v is not None]
    return per_class, (float(np.mean(present)) if present else None)


def coco_map(dets, gts, class_ids: Sequence[int]) -> dict[str, float | None]:
    """AP, AP50, AP75, APS, APM, APL with 101-point interpolation; absent buckets are ``None``."""
    dets, gts = _per_image(dets), _per_image(gts)

    def mean_ap(thresholds, bucket):
        per_class = []
        for c in class_ids:
            vals = [average_precision(dets, gts, c, t, "coco101", SIZE_BUCKETS[bucket]) for t in thresholds]
            if vals and vals[0] is not None:
                per_class.append(np.mean(vals))
        return float(np.mean(per_class)) if per_class else None

    return {
        "AP": mean_ap(COCO_IOUS, "all"),
        "AP50": mean_ap([0.5], "all"),
        "AP75": mean_ap([0.75], "all"),
        "APS": mean_ap(COCO_IOUS, "small"),
        "APM": mean_ap(COCO_IOUS, "medium"),
        "APL": mean_ap(COCO_IOUS, "large"),
    }


@dataclass(frozen=True)
class BaseNovelAll:
    base: float | None
    novel: float | None
    all: float | None

    def render(self) -> str:
        return " | ".join("-" if v is None else f"{100 * v:.1f}" for v in (self.base, self.novel, self.all))

    def to_dict(self) -> dict:
        return {"base": self.base, "novel": self.novel, "all": self.all, "text": self.render()}


def report_base_novel_all(per_class_ap: Mapping[int, float | None], partition: ClassPartition) -> BaseNovelAll:
    """Unweighted means over base, novel and all classes (``None`` when a set has no AP)."""

    def mean(ids):
        vals = [per_class_ap[c] for c in ids if per_class_ap.get(c) is not None]
        return float(np.mean(vals)) if vals else None

    return BaseNovelAll(mean(partition.base_ids), mean(partition.novel_ids), mean(partition.all_ids))


def evaluate_detections(dets, gts, partition: ClassPartition, style: str = "voc") -> dict:
    """Report dict: per-class AP, aggregates, settings and the ``base | novel | all`` string."""
    ids = partition.all_ids
    per_class, m = voc_map(dets, gts, ids, 0.5)
    report = {
        "style": style,
        "iou": 0.5,
        "interpolation": "continuous",
        "per_class_ap": {str(c): v for c, v in per_class.items()},
        "mAP": m,
        "base_novel_all": report_base_novel_all(per_class, partition).to_dict(),
    }
    if style == "coco":
        report["coco"] = coco_map(dets, gts, ids)
    elif style != "voc":
        raise ValueError(f"unknown style {style!r}")
    return report
