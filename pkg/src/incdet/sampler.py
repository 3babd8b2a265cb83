"""Blind sampling of unlabelled wild images with two frozen teachers.

Per image and per teacher: detections scoring above the teacher's threshold
form the references; a reference survives when enough of the three views
(identity, one random scale, horizontal flip) agree on it after mapping the
view's detections back; survivors become pseudo ground truth with a
score-weighted voted box. The threshold is applied before the consistency
check.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import (
    Box,
    Detection,
    ImageTransform,
    invert_transform,
    iou,
    transform_image,
)
from .detector import Detector, detect


class SamplingError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    alpha_base: float = 0.8
    alpha_novel: float = 0.8
    scales: tuple[float, ...] = (0.75, 1.25)
    consistency_iou: float = 0.7
    min_consistent_views: int = 3
    voting_iou: float = 0.7
    nms_iou: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        for name in ("alpha_base", "alpha_novel", "consistency_iou", "voting_iou", "nms_iou"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be non-empty and positive")
        if not 2 <= self.min_consistent_views <= 3:
            raise ValueError("min_consistent_views must be 2 or 3")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**d)


@dataclass(frozen=True)
class PseudoEntry:
    box: Box
    class_id: int
    score: float
    source: str  # "base" | "novel"
    n_consistent_views: int

    def to_dict(self) -> dict:
        return {
            "bbox": self.box.as_list(),
            "class_id": self.class_id,
            "score": self.score,
            "source": self.source,
            "n_consistent_views": self.n_consistent_views,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PseudoEntry":
        return cls(Box(*d["bbox"]), int(d["class_id"]), float(d["score"]), d["source"], int(d["n_consistent_views"]))


@dataclass
class PseudoGroundTruth:
    image_id: int
    entries: list[PseudoEntry] = field(default_factory=list)

    def boxes(self, source: str | None = None) -> list[Box]:
        return [e.box for e in self.entries if source is None or e.source == source]

    def as_detections(self) -> list[Detection]:
        return [Detection(e.box, e.class_id, 1.0) for e in self.entries]


@dataclass
class ConsistentDetection:
    detection: Detection
    view_matches: list[Detection | None]  # best same-class match per view, in view order
    voters: list[Detection]

    @property
    def n_consistent_views(self) -> int:
        return sum(m is not None for m in self.view_matches)


def threshold_select(dets: Iterable[Detection], alpha: float) -> list[Detection]:
    """Detections scoring strictly above ``alpha``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return [d for d in dets if d.score > alpha]


def box_voting(group: Sequence[Detection]) -> Box:
    """Score-weighted coordinate mean of the member boxes."""
    if not group:
        raise ValueError("cannot vote over an empty group")
    w = np.array([d.score for d in group], dtype=np.float64)
    coords = np.array([d.box.as_list() for d in group], dtype=np.float64)
    if w.sum() <= 0:
        w = np.ones_like(w)
    w = w / w.sum()  # normalising first keeps identical voters exact
    return Box(*map(float, (w[:, None] * coords).sum(axis=0)))


def image_views(image: np.ndarray, scale: float) -> list[ImageTransform]:
    width = image.shape[-1]
    return [ImageTransform.identity(), ImageTransform.scale(scale), ImageTransform.hflip(width)]


def _view_detections(model: Detector, image: np.ndarray, views, alpha: float, nms_iou: float):
    h, w = image.shape[-2:]
    out = []
    for t in views:
        view = transform_image(t, image)
        raw = detect(view, model, alpha, nms_iou) if isinstance(model, Detector) else model(view)
        dets = threshold_select(raw, alpha)
        back = []
        for d in dets:
            b = invert_transform(t, d.box)
            # undo float drift of the inverse map at the image border
            b = Box(max(b.x1, 0.0), max(b.y1, 0.0), min(b.x2, float(w)), min(b.y2, float(h)))
            back.append(Detection(b, d.class_id, d.score))
        out.append(back)
    return out


def consistency_check(
    model: Detector,
    image: np.ndarray,
    cfg: SamplerConfig,
    alpha: float,
    image_seed: int | Sequence[int] = 0,
) -> list[ConsistentDetection]:
    """References (identity-view detections above ``alpha``) confirmed by enough views.

    ``model`` is a :class:`Detector` or any callable mapping an image to a
    list of detections.
    """
    rng = np.random.default_rng(image_seed)
    scale = float(cfg.scales[int(rng.integers(len(cfg.scales)))])
    views = _view_detections(model, image, image_views(image, scale), alpha, cfg.nms_iou)
    survivors = []
    for ref in views[0]:
        matches: list[Detection | None] = []
        voters: list[Detection] = []
        for view in views:
            best, best_iou = None, cfg.consistency_iou
            for d in view:
                if d.class_id != ref.class_id:
                    continue
                ov = iou(d.box, ref.box)
                if ov >= best_iou and (best is None or ov > best_iou):
                    best, best_iou = d, ov
                if ov >= cfg.voting_iou:
                    voters.append(d)
            matches.append(best)
        if sum(m is not None for m in matches) >= cfg.min_consistent_views:
            survivors.append(ConsistentDetection(ref, matches, voters or [ref]))
    return survivors


@dataclass
class SampleResult:
    selected: list[int]
    pseudo: dict[int, PseudoGroundTruth]
    config: SamplerConfig
    n_wild: int
    teacher_classes: dict[str, list[int]]

    def count(self, source: str | None = None) -> int:
        return sum(1 for p in self.pseudo.values() for e in p.entries if source is None or e.source == source)

    def manifest(self) -> dict:
        return {
            "selected": self.selected,
            "entries": {str(i): [e.to_dict() for e in self.pseudo[i].entries] for i in self.selected},
            "config": self.config.to_dict(),
            "n_wild": self.n_wild,
            "teacher_classes": self.teacher_classes,
        }

    def manifest_bytes(self) -> bytes:
        return json.dumps(self.manifest(), sort_keys=True, indent=1).encode("utf-8")

    @classmethod
    def from_manifest(cls, doc: dict) -> "SampleResult":
        pseudo = {
            int(k): PseudoGroundTruth(int(k), [PseudoEntry.from_dict(e) for e in v]) for k, v in doc["entries"].items()
        }
        return cls(
            [int(i) for i in doc["selected"]],
            pseudo,
            SamplerConfig.from_dict(doc["config"]),
            int(doc["n_wild"]),
            {k: list(v) for k, v in doc["teacher_classes"].items()},
        )


def sample_image(m_base: Detector, m_novel: Detector, image_id: int, image: np.ndarray, cfg: SamplerConfig):
    """Pseudo ground truth for one image (possibly with no entries)."""
    pgt = PseudoGroundTruth(int(image_id))
    for source, model, alpha in (("base", m_base, cfg.alpha_base), ("novel", m_novel, cfg.alpha_novel)):
        seed = [int(cfg.seed), int(image_id), 0 if source == "base" else 1]
        for c in consistency_check(model, image, cfg, alpha, seed):
            pgt.entries.append(
                PseudoEntry(box_voting(c.voters), c.detection.class_id, c.detection.score, source, c.n_consistent_views)
            )
    return pgt


def blind_sample(
    m_base: Detector,
    m_novel: Detector,
    wild: Iterable[tuple[int, np.ndarray]],
    cfg: SamplerConfig,
    allow_empty: bool = False,
) -> SampleResult:
    """Select wild images on which either teacher makes confident, view-consistent detections.

    ``wild`` yields ``(image_id, image)`` pairs. Only entries of the
    teacher(s) that passed are recorded.
    """
    if set(m_base.class_ids) & set(m_novel.class_ids):
        raise ValueError("teacher class lists overlap")
    pseudo: dict[int, PseudoGroundTruth] = {}
    n = 0
    for image_id, image in wild:
        n += 1
        pgt = sample_image(m_base, m_novel, image_id, image, cfg)
        if pgt.entries:
            pseudo[int(image_id)] = pgt
    if n == 0:
        raise SamplingError("wild image set is empty")
    if not pseudo and not allow_empty:
        raise SamplingError(f"blind sampling selected none of {n} wild images")
    selected = sorted(pseudo)
    return SampleResult(
        selected,
        {i: pseudo[i] for i in selected},
        cfg,
        n,
        {"base": list(m_base.class_ids), "novel": list(m_novel.class_ids)},
    )


def dataset_images(ds):
    """``(image_id, pixels)`` pairs of a :class:`~incdet.data.Dataset`."""
    for im in ds.images:
        yield im.image_id, ds.load_image(im)
