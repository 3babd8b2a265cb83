"""Datasets: synthetic shapes, JSON annotation ingestion, incremental splits, co-occurrence audit.

Annotation file schema (UTF-8 JSON, COCO-like names, corner boxes)::

    {
      "info": {...},                                   # optional, free-form
      "categories": [{"id": 0, "name": "red_circle"}, ...],
      "images": [
        {"id": 0, "width": 64, "height": 64,
         "file_name": "img/0000.png"}                  # PNG relative to the JSON file
        | {"id": 1, "width": 64, "height": 64,
           "recipe": {"generator": "shapes", ...}}     # synthetic, re-rendered on load
      ],
      "annotations": [
        {"id": 0, "image_id": 0, "category_id": 0, "bbox": [x1, y1, x2, y2]}
      ]
    }
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .core import Box, ClassPartition, Detection


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


COLORS = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
}
SHAPES = tuple(kernels.SHAPE_CODES)
DEFAULT_CATEGORIES = (
    "red_circle",
    "green_square",
    "blue_triangle",
    "yellow_diamond",
    "blue_square",
    "red_triangle",
    "green_circle",
    "yellow_square",
)


@dataclass
class AnnotatedImage:
    image_id: int
    width: int
    height: int
    gt: list[Detection]
    file_name: str | None = None
    recipe: dict | None = None

    def __post_init__(self):
        for d in self.gt:
            if not d.box.inside(self.width, self.height):
                raise DataError(f"image {self.image_id}: box {d.box.as_list()} outside {self.width}x{self.height}")

    @property
    def class_ids(self) -> set[int]:
        return {d.class_id for d in self.gt}


@dataclass
class Dataset:
    images: list[AnnotatedImage]
    categories: dict[int, str]
    root: Path | None = None
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def by_id(self) -> dict[int, AnnotatedImage]:
        return {im.image_id: im for im in self.images}

    def load_image(self, im: AnnotatedImage) -> np.ndarray:
        """Pixels of ``im`` as a float32 ``3 x H x W`` array in ``[0, 1]``."""
        if im.recipe is not None:
            return render_recipe(im.recipe, im.width, im.height)
        if im.file_name is None:
            raise DataError(f"image {im.image_id} has neither a file nor a recipe")
        from PIL import Image

        path = Path(im.file_name)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        return np.ascontiguousarray(arr.transpose(2, 0, 1))

    def subset(self, images: Iterable[AnnotatedImage], **info) -> "Dataset":
        return Dataset(list(images), dict(self.categories), self.root, {**self.info, **info})

    def object_counts(self) -> Counter:
        return Counter(d.class_id for im in self.images for d in im.gt)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.images == other.images and self.categories == other.categories


# --------------------------------------------------------------------------
# synthetic shapes
# --------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    canvas: int = 64
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    objects_per_image: tuple[int, int] = (1, 3)
    half_size: tuple[float, float] = (5.0, 12.0)
    allow_cooccurrence: bool = True
    sides: tuple[tuple[int, ...], ...] | None = None
    category_subset: tuple[int, ...] | None = None
    noise: float = 0.04
    color_jitter: float = 0.08
    seed: int = 0

    def __post_init__(self):
        self.categories = tuple(self.categories)
        self.objects_per_image = tuple(int(v) for v in self.objects_per_image)
        self.half_size = tuple(float(v) for v in self.half_size)
        if self.sides is not None:
            self.sides = tuple(tuple(int(c) for c in s) for s in self.sides)
        if self.category_subset is not None:
            self.category_subset = tuple(int(c) for c in self.category_subset)
        if len(set(self.categories)) != len(self.categories):
            raise DataError("categories must be unique")
        for name in self.categories:
            color, _, shape = name.partition("_")
            if color not in COLORS or shape not in SHAPES:
                raise DataError(f"category {name!r} is not <color>_<shape> with known parts")
        lo, hi = self.objects_per_image
        if lo < 1 or hi < lo:
            raise DataError("objects_per_image must satisfy 1 <= min <= max")
        if not 0 < self.half_size[0] <= self.half_size[1] or 2 * self.half_size[1] + 2 > self.canvas:
            raise DataError("half_size range does not fit on the canvas")

    def to_dict(self) -> dict:
        return {
            "canvas": self.canvas,
            "categories": list(self.categories),
            "objects_per_image": list(self.objects_per_image),
            "half_size": list(self.half_size),
            "allow_cooccurrence": self.allow_cooccurrence,
            "sides": None if self.sides is None else [list(s) for s in self.sides],
            "category_subset": None if self.category_subset is None else list(self.category_subset),
            "noise": self.noise,
            "color_jitter": self.color_jitter,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        return cls(**d)


def render_recipe(recipe: dict, width: int, height: int) -> np.ndarray:
    if recipe.get("generator") != "shapes":
        raise DataError(f"unknown recipe generator {recipe.get('generator')!r}")
    rng = np.random.default_rng(recipe["seed"])
    img = np.empty((3, height, width), dtype=np.float32)
    img[:] = np.asarray(recipe["background"], dtype=np.float32)[:, None, None]
    for obj in recipe["objects"]:
        m = kernels.shape_mask(obj["shape"], obj["cx"], obj["cy"], obj["s"], height, width)
        color = np.asarray(obj["color"], dtype=np.float32)
        img[:, m] = color[:, None]
    img += rng.normal(0.0, recipe["noise"], size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _place(rng, cfg: SyntheticConfig, placed: list[tuple[float, float, float]]):
    lo, hi = cfg.half_size
    for _ in range(100):
        s = float(rng.uniform(lo, hi))
        cx = float(rng.uniform(s + 1, cfg.canvas - s - 1))
        cy = float(rng.uniform(s + 1, cfg.canvas - s - 1))
        # keep footprints apart so every rendered object stays fully visible
        if all(abs(cx - px) > s + ps + 2 or abs(cy - py) > s + ps + 2 for px, py, ps in placed):
            return cx, cy, s
    return None


def _synth_image(cfg: SyntheticConfig, pool_by_side: list[list[int]], index: int):
    rng = np.random.default_rng([cfg.seed, index])
    side = pool_by_side[index % len(pool_by_side)] if len(pool_by_side) > 1 else pool_by_side[0]
    n_obj = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    background = rng.uniform(0.0, 0.35) + rng.uniform(-0.05, 0.05, size=3)
    placed: list[tuple[float, float, float]] = []
    objects, gt = [], []
    for _ in range(n_obj):
        pos = _place(rng, cfg, placed)
        if pos is None:
            break
        cx, cy, s = pos
        cid = int(side[int(rng.integers(len(side)))])
        color_name, _, shape = cfg.categories[cid].partition("_")
        color = np.clip(np.asarray(COLORS[color_name]) + rng.uniform(-1, 1, 3) * cfg.color_jitter, 0, 1)
        m = kernels.shape_mask(shape, cx, cy, s, cfg.canvas, cfg.canvas)
        ys, xs = np.nonzero(m)
        if ys.size == 0:
            continue
        placed.append((cx, cy, s))
        objects.append({"shape": shape, "cx": cx, "cy": cy, "s": s, "color": [float(c) for c in color]})
        box = Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
        gt.append(Detection(box, cid, 1.0))
    recipe = {
        "generator": "shapes",
        "seed": [int(cfg.seed), int(index), 1],
        "noise": float(cfg.noise),
        "background": [float(np.clip(b, 0, 1)) for b in background],
        "objects": objects,
    }
    return AnnotatedImage(index, cfg.canvas, cfg.canvas, gt, recipe=recipe)


def generate_synthetic(cfg: SyntheticConfig, n_images: int) -> Dataset:
    """Deterministic synthetic shapes dataset.

    With ``allow_cooccurrence=False`` each image draws all of its objects
    from one of ``cfg.sides`` (sides are visited round-robin), so no image
    mixes categories of two sides.
    """
    if n_images < 1:
        raise DataError("n_images must be >= 1")
    all_ids = list(range(len(cfg.categories)))
    pool = list(cfg.category_subset) if cfg.category_subset is not None else all_ids
    if any(c not in all_ids for c in pool):
        raise DataError("category_subset references unknown categories")
    if cfg.allow_cooccurrence:
        sides = [pool]
    else:
        if not cfg.sides:
            raise DataError("non-co-occurrence requested but no partition sides declared")
        sides = [list(s) for s in cfg.sides]
        flat = [c for s in sides for c in s]
        if len(set(flat)) != len(flat) or any(c not in all_ids for c in flat) or any(not s for s in sides):
            raise DataError("partition sides must be non-empty, disjoint and use known categories")
    images = [_synth_image(cfg, sides, i) for i in range(n_images)]
    categories = {i: name for i, name in enumerate(cfg.categories)}
    return Dataset(images, categories, info={"synthetic": cfg.to_dict()})


# --------------------------------------------------------------------------
# JSON ingestion
# --------------------------------------------------------------------------


def load_annotations(path) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    return dataset_from_dict(doc, root=path.parent)


def dataset_from_dict(doc: dict, root: Path | None = None) -> Dataset:
    for key in ("categories", "images", "annotations"):
        if key not in doc:
            raise DataError(f"missing top-level field {key!r}")
    try:
        categories = {int(c["id"]): str(c["name"]) for c in doc["categories"]}
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed category entry ({exc})") from exc
    if len(categories) != len(doc["categories"]):
        raise DataError("duplicate category ids")
    metas = {}
    for im in doc["images"]:
        try:
            iid = int(im["id"])
            metas[iid] = (int(im["width"]), int(im["height"]), im.get("file_name"), im.get("recipe"))
        except (KeyError, TypeError) as exc:
            raise DataError(f"image entry {im!r} missing field {exc}") from exc
    if len(metas) != len(doc["images"]):
        raise DataError("duplicate image ids")
    gts: dict[int, list[Detection]] = {iid: [] for iid in metas}
    for ann in doc["annotations"]:
        try:
            aid, iid, cid, bbox = ann["id"], int(ann["image_id"]), int(ann["category_id"]), ann["bbox"]
        except (KeyError, TypeError) as exc:
            raise DataError(f"annotation {ann!r} missing field {exc}") from exc
        if iid not in metas:
            raise DataError(f"annotation {aid} references unknown image {iid}")
        if cid not in categories:
            raise DataError(f"annotation {aid} (image {iid}) has unknown category {cid}")
        try:
            box = Box(*(float(v) for v in bbox))
        except (ValueError, TypeError) as exc:
            raise DataError(f"annotation {aid} (image {iid}): invalid bbox {bbox} ({exc})") from exc
        w, h = metas[iid][:2]
        if not box.inside(w, h):
            raise DataError(f"annotation {aid} (image {iid}): bbox {bbox} outside {w}x{h}")
        gts[iid].append(Detection(box, cid, 1.0))
    images = [AnnotatedImage(iid, w, h, gts[iid], fn, rc) for iid, (w, h, fn, rc) in metas.items()]
    return Dataset(images, categories, root, dict(doc.get("info", {})))


def dataset_to_dict(ds: Dataset) -> dict:
    images, annotations = [], []
    for im in ds.images:
        entry = {"id": im.image_id, "width": im.width, "height": im.height}
        if im.file_name is not None:
            entry["file_name"] = im.file_name
        if im.recipe is not None:
            entry["recipe"] = im.recipe
        images.append(entry)
        for d in im.gt:
            annotations.append(
                {"id": len(annotations), "image_id": im.image_id, "category_id": d.class_id, "bbox": d.box.as_list()}
            )
    return {
        "info": ds.info,
        "categories": [{"id": k, "name": v} for k, v in sorted(ds.categories.items())],
        "images": images,
        "annotations": annotations,
    }


def export_annotations(ds: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(dataset_to_dict(ds)), encoding="utf-8")


# --------------------------------------------------------------------------
# incremental splits
# --------------------------------------------------------------------------


def side_names(partition: ClassPartition) -> list[str]:
    if partition.n_steps == 1:
        return ["base", "novel"]
    return ["base"] + [f"novel_{k + 1}" for k in range(partition.n_steps)]


def build_incremental_splits(
    ds: Dataset, partition: ClassPartition, strict: bool = True
) -> tuple[Dataset, list[Dataset]]:
    """Split ``ds`` into the base split and one split per novel group.

    An image joins every side it has labels for, keeping only that side's
    labels. With ``strict`` an image labelled with two or more sides is
    dropped entirely. Images without partition labels are dropped.
    """
    unknown = set(partition.all_ids) - set(ds.categories)
    if unknown:
        raise DataError(f"partition ids {sorted(unknown)} not in dataset categories")
    sides = [set(s) for s in partition.sides]
    buckets: list[list[AnnotatedImage]] = [[] for _ in sides]
    for im in ds.images:
        present = [k for k, s in enumerate(sides) if im.class_ids & s]
        if strict and len(present) > 1:
            continue
        for k in present:
            buckets[k].append(replace(im, gt=[d for d in im.gt if d.class_id in sides[k]]))
    names = side_names(partition)
    out = []
    for name, bucket in zip(names, buckets):
        if not bucket:
            raise DataError(f"split {name!r} is empty")
        out.append(ds.subset(bucket, split=name, strict=strict, partition=partition.to_dict()))
    return out[0], out[1:]


def split_manifest(partition: ClassPartition, strict: bool, splits: Sequence[Dataset], seed: int | None = None) -> dict:
    return {
        "partition": partition.to_dict(),
        "strict": strict,
        "seed": seed,
        "splits": {s.info["split"]: [im.image_id for im in s.images] for s in splits},
    }


@dataclass
class AuditTable:
    """Object counts per class inside each side's (non-strict) split images."""

    partition: ClassPartition
    categories: dict[int, str]
    counts: dict[str, dict[int, int]]  # split name -> class id -> objects in that split's images

    NOTE = "object counts over all images of each non-strict split (objects, not images)"

    def cross_counts(self, split: str) -> dict[int, int]:
        """Counts of classes belonging to other sides than ``split``."""
        k = side_names(self.partition).index(split)
        own = set(self.partition.sides[k])
        return {c: n for c, n in self.counts[split].items() if c not in own}

    @property
    def is_clean(self) -> bool:
        return all(n == 0 for name in self.counts for n in self.cross_counts(name).values())

    def count(self, split: str, class_name: str) -> int:
        by_name = {v: k for k, v in self.categories.items()}
        return self.counts[split][by_name[class_name]]

    def to_dict(self) -> dict:
        return {
            "note": self.NOTE,
            "partition": self.partition.to_dict(),
            "counts": {s: {self.categories[c]: n for c, n in row.items()} for s, row in self.counts.items()},
        }

    def render(self) -> str:
        ids = list(self.partition.all_ids)
        names = [self.categories[c] for c in ids]
        width = max(8, *(len(n) for n in names))
        lines = [f"# {self.NOTE}", f"# setting {self.partition.describe()}"]
        lines.append(f"{'split':<10} {'row':<14} " + " ".join(f"{n:>{width}}" for n in names))
        sides = [set(s) for s in self.partition.sides]
        for k, split in enumerate(side_names(self.partition)):
            for j, label in enumerate(side_names(self.partition)):
                cells = []
                for c in ids:
                    cells.append(f"{self.counts[split][c]:>{width}}" if c in sides[j] else f"{'-':>{width}}")
                lines.append(f"{split:<10} {label + ' classes':<14} " + " ".join(cells))
        return "\n".join(lines)


def audit_cooccurrence(ds: Dataset, partition: ClassPartition) -> AuditTable:
    """Count every partition-class object found inside each side's split.

    Splits are built non-strictly: a side's split holds every image with at
    least one object of that side.
    """
    sides = [set(s) for s in partition.sides]
    ids = partition.all_ids
    counts = {}
    for name, side in zip(side_names(partition), sides):
        row = dict.fromkeys(ids, 0)
        for im in ds.images:
            if im.class_ids & side:
                for d in im.gt:
                    if d.class_id in row:
                        row[d.class_id] += 1
        counts[name] = row
    return AuditTable(partition, dict(ds.categories), counts)
