"""A small two-stage detector exposing every intermediate distillation needs.

Architecture: a stack of 3x3 convolution blocks down to one feature map,
an RPN with square anchors on that map, exact-area average RoI pooling to a
``P x P`` grid, and a two-layer head emitting softmax class probabilities
(background in slot 0) and per-class box deltas.

All functions work on single images (batch size 1). Images are numpy arrays
of shape ``3 x H x W`` with values in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .core import Box, Detection, nms

BBOX_CLIP = math.log(1000.0 / 16)
HEAD_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
RPN_WEIGHTS = (1.0, 1.0, 1.0, 1.0)


@dataclass
class DetectorConfig:
    class_ids: tuple[int, ...]
    channels: tuple[int, ...] = (16, 32, 32)
    strides: tuple[int, ...] = (1, 2, 2)
    rpn_channels: int = 32
    anchor_sizes: tuple[float, ...] = (10.0, 15.0, 22.0)
    pool_size: int = 4
    hidden: int = 128
    padding_mode: str = "zeros"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.class_ids = tuple(int(c) for c in self.class_ids)
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        self.anchor_sizes = tuple(float(a) for a in self.anchor_sizes)
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ValueError("channels and strides must be non-empty and of equal length")
        if len(set(self.class_ids)) != len(self.class_ids) or not self.class_ids:
            raise ValueError("class_ids must be unique and non-empty")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**d)


@dataclass
class FeatureMap:
    values: torch.Tensor  # C x H x W
    stride: int
    image_size: tuple[int, int]  # (height, width) in pixels

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)


@dataclass(frozen=True)
class Proposal:
    box: Box
    objectness: float


@dataclass
class RoIOutput:
    probs: np.ndarray  # K+1, background first
    regressions: np.ndarray  # K x 4 deltas
    roi_feature: np.ndarray  # C x P x P


class Detector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        layers = []
        c_in = 3
        for c_out, s in zip(config.channels, config.strides):
            layers.append(nn.Conv2d(c_in, c_out, 3, stride=s, padding=1, padding_mode=config.padding_mode))
            c_in = c_out
        self.blocks = nn.ModuleList(layers)
        a = len(config.anchor_sizes)
        self.rpn_conv = nn.Conv2d(c_in, config.rpn_channels, 3, padding=1, padding_mode=config.padding_mode)
        self.rpn_obj = nn.Conv2d(config.rpn_channels, a, 1)
        self.rpn_delta = nn.Conv2d(config.rpn_channels, 4 * a, 1)
        p = config.pool_size
        self.fc = nn.Linear(c_in * p * p, config.hidden)
        self.cls = nn.Linear(config.hidden, config.num_classes + 1)
        self.reg = nn.Linear(config.hidden, 4 * config.num_classes)
        self.to(config.torch_dtype)
        self.reset_parameters(config.seed)
        self._anchor_cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def class_ids(self) -> tuple[int, ...]:
        return self.config.class_ids

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def dtype(self):
        return self.config.torch_dtype

    def reset_parameters(self, seed: int) -> None:
        """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` from a seeded generator."""
        gen = torch.Generator().manual_seed(int(seed))
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                fan_in = module.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                with torch.no_grad():
                    for t in (module.weight, module.bias):
                        t.copy_(torch.rand(t.shape, generator=gen, dtype=torch.float64).mul_(2 * bound).sub_(bound))

    # -- flat parameter vector ------------------------------------------------

    def flat_params(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.parameters()).detach().clone()

    def set_flat_params(self, theta) -> None:
        theta = torch.as_tensor(theta, dtype=self.dtype)
        n = sum(p.numel() for p in self.parameters())
        if theta.numel() != n:
            raise ValueError(f"expected {n} parameters, got {theta.numel()}")
        nn.utils.vector_to_parameters(theta, self.parameters())

    # -- pieces ------------------------------------------------------------------

    def image_tensor(self, image) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(image), dtype=self.dtype)
        if x.ndim != 3 or x.shape[0] != 3:
            raise ValueError(f"expected a 3 x H x W image, got shape {tuple(x.shape)}")
        return x[None]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.blocks:
            x = F.relu(conv(x))
        return x

    def rpn_raw(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Objectness logits ``(H*W*A,)`` and deltas ``(H*W*A, 4)``, ordered (row, col, anchor)."""
        h = F.relu(self.rpn_conv(feat))
        a = len(self.config.anchor_sizes)
        logits = self.rpn_obj(h)[0].permute(1, 2, 0).reshape(-1)
        deltas = self.rpn_delta(h)[0].reshape(a, 4, *h.shape[-2:]).permute(2, 3, 0, 1).reshape(-1, 4)
        return logits, deltas

    def pool(self, feat: torch.Tensor, rois: np.ndarray) -> torch.Tensor:
        """Exact-area average pooling of ``rois`` (pixels) to ``R x C x P x P``."""
        _, _, hgt, wid = feat.shape
        s = self.config.stride
        p = self.config.pool_size
        ox = torch.as_tensor(kernels.bin_overlaps(rois[:, 0] / s, rois[:, 2] / s, p, wid), dtype=feat.dtype)
        oy = torch.as_tensor(kernels.bin_overlaps(rois[:, 1] / s, rois[:, 3] / s, p, hgt), dtype=feat.dtype)
        return torch.einsum("rqh,chw,rpw->rcqp", oy, feat[0], ox)

    def head(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Class logits ``R x (K+1)`` and deltas ``R x K x 4``."""
        h = F.relu(self.fc(pooled.flatten(1)))
        return self.cls(h), self.reg(h).view(-1, self.num_classes, 4)

    def anchors(self, height: int, width: int) -> np.ndarray:
        key = (height, width)
        if key not in self._anchor_cache:
            s = self.config.stride
            sizes = np.asarray(self.config.anchor_sizes)
            cy, cx = np.meshgrid((np.arange(height) + 0.5) * s, (np.arange(width) + 0.5) * s, indexing="ij")
            half = sizes[None, None, :] / 2
            a = np.stack(
                [cx[..., None] - half, cy[..., None] - half, cx[..., None] + half, cy[..., None] + half], axis=-1
            )
            self._anchor_cache[key] = a.reshape(-1, 4)
        return self._anchor_cache[key]


# --------------------------------------------------------------------------
# box coding
# --------------------------------------------------------------------------


def encode_boxes(ref: np.ndarray, target: np.ndarray, weights=HEAD_WEIGHTS) -> np.ndarray:
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    tw = target[:, 2] - target[:, 0]
    th = target[:, 3] - target[:, 1]
    tx = target[:, 0] + 0.5 * tw
    ty = target[:, 1] + 0.5 * th
    return np.stack(
        [wx * (tx - rx) / rw, wy * (ty - ry) / rh, ww * np.log(tw / rw), wh * np.log(th / rh)], axis=1
    )


def decode_boxes(ref: np.ndarray, deltas: np.ndarray, weights=HEAD_WEIGHTS) -> np.ndarray:
    wx, wy, ww, wh = weights
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = np.minimum(deltas[:, 2] / ww, BBOX_CLIP)
    dh = np.minimum(deltas[:, 3] / wh, BBOX_CLIP)
    cx = dx * rw + rx
    cy = dy * rh + ry
    w = np.exp(dw) * rw
    h = np.exp(dh) * rh
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, height: float, width: float) -> np.ndarray:
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, height)
    return out


# --------------------------------------------------------------------------
# public forward operations
# --------------------------------------------------------------------------


def backbone_forward(image, det: Detector) -> FeatureMap:
    x = det.image_tensor(image)
    with torch.no_grad():
        feat = det.features(x)
    return FeatureMap(feat[0], det.config.stride, tuple(x.shape[-2:]))


def _proposal_arrays(det: Detector, feat: torch.Tensor, image_size, n_candidates: int, min_size: float = 1.0):
    """Top proposals as ``(boxes R x 4, objectness R)`` numpy arrays, objectness-sorted."""
    with torch.no_grad():
        logits, deltas = det.rpn_raw(feat)
    hgt, wid = image_size
    anchors = det.anchors(feat.shape[-2], feat.shape[-1])
    boxes = clip_boxes(decode_boxes(anchors, deltas.double().numpy(), RPN_WEIGHTS), hgt, wid)
    obj = torch.sigmoid(logits.double()).numpy()
    ok = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)
    idx = np.flatnonzero(ok)
    # stable sort keeps anchor order on ties
    idx = idx[np.argsort(-obj[idx], kind="stable")][:n_candidates]
    return boxes[idx], obj[idx]


def rpn_forward(fm: FeatureMap, det: Detector, n_candidates: int = 256) -> list[Proposal]:
    boxes, obj = _proposal_arrays(det, fm.values[None], fm.image_size, n_candidates)
    return [Proposal(Box(*map(float, b)), float(o)) for b, o in zip(boxes, obj)]


def _check_rois(rois: np.ndarray, image_size, tol: float = 1e-6) -> None:
    hgt, wid = image_size
    bad = (
        (rois[:, 0] < -tol)
        | (rois[:, 1] < -tol)
        | (rois[:, 2] > wid + tol)
        | (rois[:, 3] > hgt + tol)
        | (rois[:, 2] <= rois[:, 0])
        | (rois[:, 3] <= rois[:, 1])
    )
    if bad.any():
        raise ValueError(f"RoI {rois[np.flatnonzero(bad)[0]].tolist()} is not a valid box inside {wid}x{hgt}")


def roi_head(fm: FeatureMap, rois, det: Detector) -> list[RoIOutput]:
    arr = rois if isinstance(rois, np.ndarray) else np.array([b.as_list() for b in rois], dtype=np.float64)
    arr = arr.reshape(-1, 4)
    _check_rois(arr, fm.image_size)
    with torch.no_grad():
        pooled = det.pool(fm.values[None], arr)
        logits, deltas = det.head(pooled)
    probs = torch.softmax(logits.double(), dim=1).numpy()
    deltas = deltas.double().numpy()
    pooled = pooled.double().numpy()
    return [RoIOutput(probs[i], deltas[i], pooled[i]) for i in range(arr.shape[0])]


def detect(
    image,
    det: Detector,
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
    n_candidates: int = 256,
    max_detections: int = 100,
) -> list[Detection]:
    """Full pipeline: backbone, RPN, RoI head, per-class decode and NMS.

    Each RoI yields at most one detection, for its most probable foreground
    class, with the box decoded from that class's regression row.
    """
    if not 0.0 < nms_iou < 1.0:
        raise ValueError("nms_iou must lie in (0, 1)")
    if not 0.0 < score_threshold <= 1.0:
        raise ValueError("score_threshold must lie in (0, 1]")
    x = det.image_tensor(image)
    hgt, wid = x.shape[-2:]
    with torch.no_grad():
        feat = det.features(x)
        rois, _ = _proposal_arrays(det, feat, (hgt, wid), n_candidates)
        if rois.shape[0] == 0:
            return []
        logits, deltas = det.head(det.pool(feat, rois))
    probs = torch.softmax(logits.double(), dim=1).numpy()
    deltas = deltas.double().numpy()
    cls = probs[:, 1:].argmax(axis=1)
    score = probs[np.arange(len(cls)), cls + 1]
    keep = np.flatnonzero(score >= score_threshold)
    if keep.size == 0:
        return []
    boxes = clip_boxes(decode_boxes(rois[keep], deltas[keep, cls[keep]]), hgt, wid)
    dets = []
    for k, b in zip(keep, boxes):
        if b[2] - b[0] < 1e-3 or b[3] - b[1] < 1e-3:
            continue
        dets.append(Detection(Box(*map(float, b)), det.class_ids[cls[k]], float(score[k])))
    return nms(dets, nms_iou)[:max_detections]


# --------------------------------------------------------------------------
# supervised Faster R-CNN losses
# --------------------------------------------------------------------------


@dataclass
class SamplingConfig:
    rpn_batch: int = 64
    rpn_pos_fraction: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_batch: int = 64
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    n_candidates: int = 256


@dataclass
class LossTargets:
    """Frozen sampling decisions for one image; the loss is smooth in θ given these."""

    anchor_idx: np.ndarray
    anchor_labels: np.ndarray
    anchor_deltas: np.ndarray  # rows for positive anchors, in anchor_idx order
    rois: np.ndarray
    roi_labels: np.ndarray  # slot index, 0 = background
    roi_deltas: np.ndarray  # rows for foreground RoIs
    extra: dict = field(default_factory=dict)


def _sample(rng: np.random.Generator, idx: np.ndarray, n: int) -> np.ndarray:
    if idx.size <= n:
        return idx
    return np.sort(rng.choice(idx, size=n, replace=False))


def sample_targets(
    det: Detector,
    feat: torch.Tensor,
    image_size,
    gts: list[Detection],
    rng: np.random.Generator,
    proposals: np.ndarray | None = None,
    cfg: SamplingConfig | None = None,
) -> LossTargets:
    cfg = cfg or SamplingConfig()
    slot = {c: i + 1 for i, c in enumerate(det.class_ids)}
    for g in gts:
        if g.class_id not in slot:
            raise ValueError(f"ground-truth class {g.class_id} unknown to detector {det.class_ids}")
    gt_boxes = np.array([g.box.as_list() for g in gts], dtype=np.float64).reshape(-1, 4)
    gt_slots = np.array([slot[g.class_id] for g in gts], dtype=np.int64)

    anchors = det.anchors(feat.shape[-2], feat.shape[-1])
    labels = np.zeros(len(anchors), dtype=np.int64)
    matched = np.zeros(len(anchors), dtype=np.int64)
    if len(gts):
        ov = kernels.pairwise_iou(anchors, gt_boxes)
        matched = ov.argmax(axis=1)
        best = ov.max(axis=1)
        labels[:] = -1
        labels[best < cfg.rpn_neg_iou] = 0
        labels[best >= cfg.rpn_pos_iou] = 1
        gt_best = ov.max(axis=0)
        for g in range(len(gts)):
            hits = np.flatnonzero(ov[:, g] == gt_best[g])
            labels[hits] = 1
            matched[hits] = g
    pos = _sample(rng, np.flatnonzero(labels == 1), int(cfg.rpn_batch * cfg.rpn_pos_fraction))
    neg = _sample(rng, np.flatnonzero(labels == 0), cfg.rpn_batch - pos.size)
    anchor_idx = np.concatenate([pos, neg])
    anchor_labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    anchor_deltas = (
        encode_boxes(anchors[pos], gt_boxes[matched[pos]], RPN_WEIGHTS) if pos.size else np.zeros((0, 4))
    )

    if proposals is None:
        proposals, _ = _proposal_arrays(det, feat.detach(), image_size, cfg.n_candidates)
    rois = np.concatenate([proposals.reshape(-1, 4), gt_boxes])
    if len(gts):
        ov = kernels.pairwise_iou(rois, gt_boxes)
        best = ov.max(axis=1)
        arg = ov.argmax(axis=1)
    else:
        best = np.zeros(len(rois))
        arg = np.zeros(len(rois), dtype=np.int64)
    fg = _sample(rng, np.flatnonzero(best >= cfg.roi_fg_iou), int(cfg.roi_batch * cfg.roi_fg_fraction))
    bg = _sample(rng, np.flatnonzero(best < cfg.roi_fg_iou), cfg.roi_batch - fg.size)
    keep = np.concatenate([fg, bg])
    roi_labels = np.concatenate([gt_slots[arg[fg]] if len(gts) else np.zeros(0, np.int64), np.zeros(bg.size, np.int64)])
    roi_deltas = encode_boxes(rois[fg], gt_boxes[arg[fg]]) if fg.size else np.zeros((0, 4))
    return LossTargets(anchor_idx, anchor_labels, anchor_deltas, rois[keep], roi_labels, roi_deltas)


def losses_from_targets(det: Detector, feat: torch.Tensor, t: LossTargets) -> tuple[torch.Tensor, torch.Tensor]:
    """``(L_RCNN, L_RPN)`` for frozen targets; differentiable w.r.t. the detector parameters."""
    dt = feat.dtype
    logits, deltas = det.rpn_raw(feat)
    n_anchor = max(t.anchor_idx.size, 1)
    idx = torch.as_tensor(t.anchor_idx, dtype=torch.long)
    rpn_cls = F.binary_cross_entropy_with_logits(
        logits[idx], torch.as_tensor(t.anchor_labels, dtype=dt), reduction="sum"
    ) / n_anchor
    n_pos = t.anchor_deltas.shape[0]
    rpn_reg = F.smooth_l1_loss(
        deltas[idx[:n_pos]], torch.as_tensor(t.anchor_deltas, dtype=dt), beta=1.0, reduction="sum"
    ) / n_anchor
    l_rpn = rpn_cls + rpn_reg

    if t.rois.shape[0] == 0:
        return feat.sum() * 0.0, l_rpn
    cls_logits, reg = det.head(det.pool(feat, t.rois))
    labels = torch.as_tensor(t.roi_labels, dtype=torch.long)
    n_roi = t.rois.shape[0]
    rcnn_cls = F.cross_entropy(cls_logits, labels, reduction="sum") / n_roi
    n_fg = t.roi_deltas.shape[0]
    if n_fg:
        rows = reg[torch.arange(n_fg), labels[:n_fg] - 1]
        rcnn_reg = F.smooth_l1_loss(rows, torch.as_tensor(t.roi_deltas, dtype=dt), beta=1.0, reduction="sum") / n_roi
    else:
        rcnn_reg = cls_logits.sum() * 0.0
    return rcnn_cls + rcnn_reg, l_rpn


def supervised_loss(
    det: Detector,
    image,
    gts: list[Detection],
    rng: np.random.Generator | int = 0,
    proposals: np.ndarray | None = None,
    cfg: SamplingConfig | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Standard two-stage training losses ``(L_RCNN, L_RPN)`` for one image."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    x = det.image_tensor(image)
    feat = det.features(x)
    t = sample_targets(det, feat, tuple(x.shape[-2:]), gts, rng, proposals, cfg)
    return losses_from_targets(det, feat, t)


def clone_detector(det: Detector) -> Detector:
    out = Detector(DetectorConfig.from_dict(det.config.to_dict()))
    out.load_state_dict(det.state_dict())
    return out


def expand_detector(det: Detector, new_class_ids, seed: int = 0) -> Detector:
    """Copy of ``det`` whose head also covers ``new_class_ids``.

    Old class slots keep their weights; the new classifier and regression
    rows are freshly initialised from ``seed``.
    """
    new_class_ids = tuple(int(c) for c in new_class_ids)
    if set(new_class_ids) & set(det.class_ids):
        raise ValueError("new classes overlap the detector's classes")
    cfg = DetectorConfig.from_dict({**det.config.to_dict(), "class_ids": det.class_ids + new_class_ids, "seed": seed})
    out = Detector(cfg)
    k = det.num_classes
    state = out.state_dict()
    for name, value in det.state_dict().items():
        if name in ("cls.weight", "cls.bias"):
            state[name][: k + 1] = value
        elif name in ("reg.weight", "reg.bias"):
            state[name][: 4 * k] = value
        else:
            state[name] = value.clone()
    out.load_state_dict(state)
    return out

