"""Numeric inner loops.

Every kernel exists twice: a numba ``_nb`` version and a vectorised numpy
``_np`` version with identical semantics. The public name dispatches on
``incdet._accel.USE_NUMBA``. Boxes are float64 ``(N, 4)`` arrays in corner
convention ``(x1, y1, x2, y2)``.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

SHAPE_CODES = {"circle": 0, "square": 1, "triangle": 2, "diamond": 3}


# --------------------------------------------------------------------------
# pairwise IoU
# --------------------------------------------------------------------------


@njit(cache=True)
def _pairwise_iou_nb(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            if iw <= 0.0:
                continue
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if ih <= 0.0:
                continue
            inter = iw * ih
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            out[i, j] = inter / (area_a + area_b - inter)
    return out


def _pairwise_iou_np(a, b):
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


def pairwise_iou(a, b):
    """IoU matrix between two box arrays."""
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    if USE_NUMBA:
        return _pairwise_iou_nb(a, b)
    return _pairwise_iou_np(a, b)


# --------------------------------------------------------------------------
# greedy NMS over pre-ordered boxes
# --------------------------------------------------------------------------


@njit(cache=True)
def _nms_ordered_nb(boxes, thr):
    n = boxes.shape[0]
    suppressed = np.zeros(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    k = 0
    for i in range(n):
        if suppressed[i]:
            continue
        keep[k] = i
        k += 1
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for j in range(i + 1, n):
            if suppressed[j]:
                continue
            iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            area_j = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            if inter / (area_i + area_j - inter) >= thr:
                suppressed[j] = True
    return keep[:k]


def _nms_ordered_np(boxes, thr):
    order = np.arange(boxes.shape[0])
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        ov = _pairwise_iou_np(boxes[i : i + 1], boxes[rest])[0]
        order = rest[ov < thr]
    return np.asarray(keep, dtype=np.int64)


def nms_ordered(boxes, thr):
    """Greedy suppression of boxes given in priority order.

    Returns indices of the kept rows. A box is suppressed when its IoU with
    an already kept box is ``>= thr``.
    """
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    if USE_NUMBA:
        return _nms_ordered_nb(boxes, float(thr))
    return _nms_ordered_np(boxes, float(thr))


# --------------------------------------------------------------------------
# box footprint rasterisation onto a feature grid
# --------------------------------------------------------------------------


@njit(cache=True)
def _footprint_mask_nb(boxes, height, width, stride):
    mask = np.zeros((height, width), dtype=np.uint8)
    for b in range(boxes.shape[0]):
        for i in range(height):
            y0 = i * stride
            if min(boxes[b, 3], y0 + stride) - max(boxes[b, 1], y0) <= 0.0:
                continue
            for j in range(width):
                x0 = j * stride
                if min(boxes[b, 2], x0 + stride) - max(boxes[b, 0], x0) > 0.0:
                    mask[i, j] = 1
    return mask


def _footprint_mask_np(boxes, height, width, stride):
    ys = np.arange(height, dtype=np.float64) * stride
    xs = np.arange(width, dtype=np.float64) * stride
    oy = np.minimum(boxes[:, None, 3], ys[None] + stride) - np.maximum(boxes[:, None, 1], ys[None])
    ox = np.minimum(boxes[:, None, 2], xs[None] + stride) - np.maximum(boxes[:, None, 0], xs[None])
    hit = (oy[:, :, None] > 0.0) & (ox[:, None, :] > 0.0)
    return hit.any(axis=0).astype(np.uint8) if boxes.shape[0] else np.zeros((height, width), np.uint8)


def footprint_mask(boxes, height, width, stride):
    """Binary grid: cell ``(i, j)`` is 1 iff its pixel footprint overlaps any box with positive area."""
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    if USE_NUMBA:
        return _footprint_mask_nb(boxes, int(height), int(width), float(stride))
    return _footprint_mask_np(boxes, int(height), int(width), float(stride))


# --------------------------------------------------------------------------
# exact-area pooling weights
# --------------------------------------------------------------------------


@njit(cache=True)
def _bin_overlaps_nb(lo, hi, n_bins, n_cells):
    r = lo.shape[0]
    out = np.zeros((r, n_bins, n_cells))
    for k in range(r):
        step = (hi[k] - lo[k]) / n_bins
        for p in range(n_bins):
            a = lo[k] + p * step
            b = a + step
            first = max(int(np.floor(a)), 0)
            last = min(int(np.ceil(b)), n_cells)
            for c in range(first, last):
                ov = min(b, c + 1.0) - max(a, float(c))
                if ov > 0.0:
                    out[k, p, c] = ov / step
    return out


def _bin_overlaps_np(lo, hi, n_bins, n_cells):
    step = (hi - lo) / n_bins
    a = lo[:, None] + step[:, None] * np.arange(n_bins)[None]
    b = a + step[:, None]
    cells = np.arange(n_cells, dtype=np.float64)
    ov = np.minimum(b[..., None], cells + 1.0) - np.maximum(a[..., None], cells)
    return np.clip(ov, 0.0, None) / step[:, None, None]


def bin_overlaps(lo, hi, n_bins, n_cells):
    """Fraction of each pooling bin covered by each grid cell, along one axis.

    ``lo``/``hi`` are interval ends in cell units. Each of the ``n_bins``
    equal bins of ``[lo, hi]`` yields a row of weights over ``n_cells`` cells
    that sums to 1 when the interval lies inside the grid.
    """
    lo = np.ascontiguousarray(lo, dtype=np.float64).ravel()
    hi = np.ascontiguousarray(hi, dtype=np.float64).ravel()
    if USE_NUMBA:
        return _bin_overlaps_nb(lo, hi, int(n_bins), int(n_cells))
    return _bin_overlaps_np(lo, hi, int(n_bins), int(n_cells))


# --------------------------------------------------------------------------
# detection-to-ground-truth matching
# --------------------------------------------------------------------------


@njit(cache=True)
def _greedy_match_nb(ious, thr):
    n_det, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=np.bool_)
    matched = np.full(n_det, -1, dtype=np.int64)
    for d in range(n_det):
        best = -1
        best_iou = thr
        for g in range(n_gt):
            if taken[g]:
                continue
            if ious[d, g] >= best_iou and (best < 0 or ious[d, g] > best_iou):
                best = g
                best_iou = ious[d, g]
        if best >= 0:
            taken[best] = True
            matched[d] = best
    return matched


def _greedy_match_np(ious, thr):
    n_det, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=bool)
    matched = np.full(n_det, -1, dtype=np.int64)
    for d in range(n_det):
        cand = np.where(taken, -1.0, ious[d])
        g = int(np.argmax(cand)) if n_gt else -1
        if g >= 0 and cand[g] >= thr:
            taken[g] = True
            matched[d] = g
    return matched


def greedy_match(ious, thr):
    """Match score-ordered detections (rows) to ground truths (columns).

    Each detection takes the still-unmatched ground truth of highest IoU
    (lowest column index on ties) provided that IoU is ``>= thr``. Returns
    the matched column per row, ``-1`` for unmatched rows.
    """
    ious = np.ascontiguousarray(ious, dtype=np.float64)
    if ious.ndim != 2:
        raise ValueError("ious must be 2-D")
    if USE_NUMBA:
        return _greedy_match_nb(ious, float(thr))
    return _greedy_match_np(ious, float(thr))


# --------------------------------------------------------------------------
# shape rasterisation
# --------------------------------------------------------------------------


@njit(cache=True)
def _shape_mask_nb(code, cx, cy, s, height, width):
    mask = np.zeros((height, width), dtype=np.bool_)
    y_lo = max(int(np.floor(cy - s)) - 1, 0)
    y_hi = min(int(np.ceil(cy + s)) + 1, height)
    x_lo = max(int(np.floor(cx - s)) - 1, 0)
    x_hi = min(int(np.ceil(cx + s)) + 1, width)
    for y in range(y_lo, y_hi):
        dy = y + 0.5 - cy
        for x in range(x_lo, x_hi):
            dx = x + 0.5 - cx
            if code == 0:
                inside = dx * dx + dy * dy <= s * s
            elif code == 1:
                inside = abs(dx) <= s and abs(dy) <= s
            elif code == 2:
                inside = -s <= dy <= s and abs(dx) <= 0.5 * (dy + s)
            else:
                inside = abs(dx) + abs(dy) <= s
            mask[y, x] = inside
    return mask


def _shape_mask_np(code, cx, cy, s, height, width):
    dy = (np.arange(height) + 0.5 - cy)[:, None]
    dx = (np.arange(width) + 0.5 - cx)[None, :]
    if code == 0:
        return dx * dx + dy * dy <= s * s
    if code == 1:
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if code == 2:
        return (dy >= -s) & (dy <= s) & (np.abs(dx) <= 0.5 * (dy + s))
    return np.abs(dx) + np.abs(dy) <= s


def shape_mask(shape, cx, cy, half_size, height, width):
    """Boolean raster of a filled shape, sampled at pixel centres."""
    code = SHAPE_CODES[shape]
    if USE_NUMBA:
        return _shape_mask_nb(code, float(cx), float(cy), float(half_size), int(height), int(width))
    return _shape_mask_np(code, float(cx), float(cy), float(half_size), int(height), int(width))
