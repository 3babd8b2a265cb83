"""Boxes, detections, class partitions and invertible image transforms."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels


@dataclass(frozen=True, order=True)
class Box:
    """Axis-aligned box in pixel coordinates, corner convention."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {coords}")

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "Box":
        return cls(float(x), float(y), float(x + w), float(y + h))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def inside(self, width: float, height: float, tol: float = 1e-9) -> bool:
        return self.x1 >= -tol and self.y1 >= -tol and self.x2 <= width + tol and self.y2 <= height + tol


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    def sort_key(self):
        # descending score, then lower class id, then box coordinates
        return (-self.score, self.class_id, self.box.x1, self.box.y1, self.box.x2, self.box.y2)


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.as_list() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Per-class greedy non-maximum suppression.

    Within each class, a detection is dropped when it overlaps an already
    kept, higher-priority detection with IoU ``>= iou_threshold``. The result
    is ordered by descending score (ties: class id, then box coordinates).
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    ordered = sorted(dets, key=Detection.sort_key)
    by_class: dict[int, list[Detection]] = {}
    for d in ordered:
        by_class.setdefault(d.class_id, []).append(d)
    kept: list[Detection] = []
    for group in by_class.values():
        keep = kernels.nms_ordered(boxes_to_array(d.box for d in group), iou_threshold)
        kept.extend(group[i] for i in keep)
    kept.sort(key=Detection.sort_key)
    return kept


# --------------------------------------------------------------------------
# transforms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageTransform:
    """Geometric image transform that can be mapped onto boxes and undone."""

    kind: str = "identity"
    scale_factor: float = 1.0
    image_width: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "scale", "hflip"):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "scale" and not self.scale_factor > 0:
            raise ValueError("scale_factor must be > 0")
        if self.kind == "hflip" and not self.image_width > 0:
            raise ValueError("hflip needs a positive image_width")

    @classmethod
    def identity(cls) -> "ImageTransform":
        return cls("identity")

    @classmethod
    def scale(cls, factor: float) -> "ImageTransform":
        return cls("scale", scale_factor=float(factor))

    @classmethod
    def hflip(cls, width: float) -> "ImageTransform":
        return cls("hflip", image_width=float(width))


def apply_transform(t: ImageTransform, box: Box) -> Box:
    if t.kind == "scale":
        s = t.scale_factor
        return Box(box.x1 * s, box.y1 * s, box.x2 * s, box.y2 * s)
    if t.kind == "hflip":
        w = t.image_width
        return Box(w - box.x2, box.y1, w - box.x1, box.y2)
    return box


def invert_transform(t: ImageTransform, box: Box) -> Box:
    if t.kind == "scale":
        s = t.scale_factor
        return Box(box.x1 / s, box.y1 / s, box.x2 / s, box.y2 / s)
    # a reflection is its own inverse
    return apply_transform(t, box)


def transform_image(t: ImageTransform, image: np.ndarray) -> np.ndarray:
    """Apply ``t`` to a ``3 x H x W`` image array.

    Scaling resamples with bilinear interpolation so that the pixel grid of
    the output is exactly ``scale_factor`` times the input's.
    """
    if t.kind == "identity":
        return image
    if t.kind == "hflip":
        if image.shape[-1] != int(round(t.image_width)):
            raise ValueError("image width does not match transform")
        return np.ascontiguousarray(image[..., ::-1])
    import torch
    import torch.nn.functional as F

    h, w = image.shape[-2:]
    size = (max(int(round(h * t.scale_factor)), 1), max(int(round(w * t.scale_factor)), 1))
    x = torch.from_numpy(np.ascontiguousarray(image))[None]
    out = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return out[0].numpy()


# --------------------------------------------------------------------------
# class partitions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassPartition:
    """Disjoint base classes and ordered groups of novel classes.

    Every model puts its background in slot 0 and its foreground classes in
    slots ``1..K`` in the order given here; a student over base and novel
    classes lists base ids first, then each novel group in turn.
    """

    base_ids: tuple[int, ...]
    novel_groups: tuple[tuple[int, ...], ...]
    background_slot: int = field(default=0)

    def __post_init__(self):
        object.__setattr__(self, "base_ids", tuple(int(c) for c in self.base_ids))
        object.__setattr__(self, "novel_groups", tuple(tuple(int(c) for c in g) for g in self.novel_groups))
        seen: set[int] = set()
        for side in self.sides:
            if not side:
                raise ValueError("partition sides must be non-empty")
            for c in side:
                if c in seen:
                    raise ValueError(f"class id {c} appears more than once in the partition")
                seen.add(c)
        if self.background_slot != 0:
            raise ValueError("only background slot 0 is supported")

    @property
    def sides(self) -> tuple[tuple[int, ...], ...]:
        return (self.base_ids,) + self.novel_groups

    @property
    def all_ids(self) -> tuple[int, ...]:
        return tuple(c for side in self.sides for c in side)

    @property
    def novel_ids(self) -> tuple[int, ...]:
        return tuple(c for g in self.novel_groups for c in g)

    @property
    def n_steps(self) -> int:
        return len(self.novel_groups)

    def side_of(self, class_id: int) -> int | None:
        for k, side in enumerate(self.sides):
            if class_id in side:
                return k
        return None

    def step(self, k: int) -> "ClassPartition":
        """Two-sided view of incremental step ``k`` (0-based).

        Everything learned so far is the base side, group ``k`` the novel one.
        """
        if not 0 <= k < self.n_steps:
            raise IndexError(f"step {k} out of range for {self.n_steps} increments")
        old = self.base_ids + tuple(c for g in self.novel_groups[:k] for c in g)
        return ClassPartition(old, (self.novel_groups[k],))

    def to_dict(self) -> dict:
        return {"base": list(self.base_ids), "novel_groups": [list(g) for g in self.novel_groups]}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassPartition":
        return cls(tuple(d["base"]), tuple(tuple(g) for g in d["novel_groups"]))

    def describe(self) -> str:
        return "+".join(str(len(s)) for s in self.sides)

    @classmethod
    def parse(cls, text: str, categories: dict[int, str] | None = None) -> "ClassPartition":
        """Parse ``"0,1,2+3"``, ``"0-9+10-14+15-19"`` or category names.

        Sides are separated by ``+``; within a side, items are ids, inclusive
        id ranges ``a-b`` or category names resolved through ``categories``.
        """
        sides = [parse_class_ids(chunk, categories) for chunk in text.split("+")]
        if len(sides) < 2:
            raise ValueError(f"partition {text!r} needs at least one '+'")
        return cls(sides[0], tuple(sides[1:]))


def parse_class_ids(text: str, categories: dict[int, str] | None = None) -> tuple[int, ...]:
    """Comma-separated ids, inclusive ranges ``a-b`` or category names."""
    by_name = {v: k for k, v in (categories or {}).items()}
    ids: list[int] = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        m = re.fullmatch(r"(\d+)-(\d+)", item)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise ValueError(f"empty id range {item!r}")
            ids.extend(range(lo, hi + 1))
        elif item.isdigit():
            ids.append(int(item))
        elif item in by_name:
            ids.append(by_name[item])
        else:
            raise ValueError(f"unknown class {item!r} in {text!r}")
    return tuple(ids)
