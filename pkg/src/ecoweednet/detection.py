"""Box geometry, DFL decoding, target assignment, losses and NMS.

Boxes are normalized ``(cx, cy, w, h)`` at the API surface and pixel
``(x1, y1, x2, y2)`` inside the loss. Box sides are regressed as
distributions over ``R`` integer bins (distances from the cell centre in
stride units) and decoded by their expectation.

Assignment is a fixed centre-in-box rule on one pyramid level per ground
truth: a box whose longer side is at most ``BAND_FACTOR * stride`` pixels
goes to the finest such level (stride 8, 16, else 32). Every cell of that
level whose centre lies strictly inside the box is positive; if none does,
the cell containing the box centre is used. A cell claimed by several
boxes keeps the one with the smallest area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from .errors import TargetError
from .tensor import Tensor

STRIDES = (8, 16, 32)
BAND_FACTOR = 4
LOSS_WEIGHTS = {"box": 7.5, "cls": 0.5, "dfl": 1.5}
_EPS = 1e-7


@dataclass(frozen=True)
class DetectionBox:
    class_id: int
    confidence: float
    box: tuple[float, float, float, float]  # cx, cy, w, h (normalized)

    def __post_init__(self):
        cx, cy, w, h = self.box
        if w < 0 or h < 0:
            raise ValueError(f"negative box size {self.box}")
        if not all(math.isfinite(v) for v in self.box):
            raise ValueError(f"non-finite box {self.box}")

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        return cxcywh_to_xyxy(self.box)


def cxcywh_to_xyxy(box):
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def xyxy_to_cxcywh(box):
    x1, y1, x2, y2 = box
    return ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def iou(a, b, fmt: str = "xyxy") -> float:
    """Intersection over union of two boxes; 0 for disjoint or zero-area boxes."""
    if isinstance(a, DetectionBox):
        a, fmt_a = a.xyxy, "xyxy"
    else:
        fmt_a = fmt
    if isinstance(b, DetectionBox):
        b, fmt_b = b.xyxy, "xyxy"
    else:
        fmt_b = fmt
    if fmt_a == "cxcywh":
        a = cxcywh_to_xyxy(a)
    if fmt_b == "cxcywh":
        b = cxcywh_to_xyxy(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(N, 4)`` and ``(M, 4)`` xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


# ---------------------------------------------------------------------------
# Distribution focal loss


def dfl_decode(logits) -> np.ndarray:
    """Expected bin index of ``softmax(logits)`` along the last axis."""
    x = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    p = np.exp(x)
    p /= p.sum(axis=-1, keepdims=True)
    return p @ np.arange(x.shape[-1], dtype=np.float64)


def _bracket(target: np.ndarray, bins: int):
    left = np.minimum(np.floor(target), bins - 2).astype(np.int64)
    w_left = (left + 1) - target
    return left, w_left, 1.0 - w_left


def dfl_loss(logits, target) -> Tensor:
    """Interpolated cross-entropy against the two integer bins around ``target``.

    ``logits`` is ``(..., R)``; ``target`` matches the leading shape and
    lies in ``[0, R-1]``. Returns the mean over all targets.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    bins = logits.shape[-1]
    if bins < 2:
        raise ValueError("DFL needs at least two bins")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape[:-1]:
        raise ValueError(f"target shape {target.shape} != logits shape {logits.shape[:-1]}")
    if np.any(target < 0) or np.any(target > bins - 1):
        raise ValueError(f"DFL target outside [0, {bins - 1}]")
    flat = ops.reshape(logits, (-1, bins))
    t = target.reshape(-1)
    left, wl, wr = _bracket(t, bins)
    logp = ops.log_softmax(flat, axis=-1)
    rows = np.arange(t.size)
    picked_l = logp[rows, left]
    picked_r = logp[rows, left + 1]
    per = -(picked_l * wl.astype(logp.dtype) + picked_r * wr.astype(logp.dtype))
    return ops.mean(per)


# ---------------------------------------------------------------------------
# Targets


@dataclass
class Targets:
    """Per-cell training targets for a batch.

    ``anchors`` are cell centres in pixels, ``cell_stride`` the stride of
    each cell; cells are ordered level by level, row-major within a level.
    """

    image_size: int
    anchors: np.ndarray          # (L, 2)
    cell_stride: np.ndarray      # (L,)
    level_slices: list[slice]
    cls_target: np.ndarray       # (N, L, nc)
    pos_batch: np.ndarray        # (P,)
    pos_cell: np.ndarray         # (P,)
    pos_box: np.ndarray          # (P, 4) pixel xyxy
    pos_class: np.ndarray        # (P,)
    assigned_level: list[list[int]] = field(default_factory=list)

    @property
    def num_pos(self) -> int:
        return int(self.pos_batch.size)


def make_anchors(image_size: int, strides: Sequence[int] = STRIDES):
    anchors, cell_stride, slices = [], [], []
    start = 0
    for s in strides:
        g = image_size // s
        ys, xs = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
        pts = np.stack([(xs.reshape(-1) + 0.5) * s, (ys.reshape(-1) + 0.5) * s], axis=1)
        anchors.append(pts)
        cell_stride.append(np.full(g * g, s, dtype=np.float64))
        slices.append(slice(start, start + g * g))
        start += g * g
    return np.concatenate(anchors).astype(np.float64), np.concatenate(cell_stride), slices


def validate_boxes(labels: np.ndarray, num_classes: int | None = None) -> list[str]:
    """Diagnostics for label rows ``(class, cx, cy, w, h)`` outside the unit frame."""
    problems = []
    for i, row in enumerate(np.asarray(labels, dtype=np.float64).reshape(-1, 5)):
        cls, cx, cy, w, h = row
        if not np.all(np.isfinite(row)):
            problems.append(f"box {i}: non-finite values {row.tolist()}")
            continue
        if num_classes is not None and not (0 <= cls < num_classes and cls == int(cls)):
            problems.append(f"box {i}: class {cls:g} outside [0, {num_classes})")
        for name, v in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
            if not 0.0 <= v <= 1.0:
                problems.append(f"box {i}: {name}={v:g} outside [0, 1]")
        if cx - w / 2 < -1e-6 or cx + w / 2 > 1 + 1e-6 or cy - h / 2 < -1e-6 or cy + h / 2 > 1 + 1e-6:
            problems.append(f"box {i}: extends outside the image")
    return problems


def level_for(side_px: float, strides: Sequence[int] = STRIDES) -> int:
    for i, s in enumerate(strides[:-1]):
        if side_px <= BAND_FACTOR * s:
            return i
    return len(strides) - 1


def assign_targets(
    gts: Sequence[np.ndarray],
    image_size: int,
    num_classes: int,
    strides: Sequence[int] = STRIDES,
) -> Targets:
    """Build per-cell targets for a batch of label arrays ``(K, 5)``."""
    anchors, cell_stride, slices = make_anchors(image_size, strides)
    n, L = len(gts), anchors.shape[0]
    cls_target = np.zeros((n, L, num_classes), dtype=np.float64)
    pb, pc, pbox, pcls = [], [], [], []
    levels_used = []
    for b, labels in enumerate(gts):
        labels = np.asarray(labels, dtype=np.float64).reshape(-1, 5)
        problems = validate_boxes(labels, num_classes)
        if problems:
            raise TargetError(f"image {b}: {len(problems)} invalid box(es)", problems)
        owner = {}  # cell -> (area, box index)
        img_levels = []
        for k, (cls, cx, cy, w, h) in enumerate(labels):
            x1, y1, x2, y2 = (np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]) * image_size)
            lvl = level_for(max(w, h) * image_size, strides)
            img_levels.append(lvl)
            sl = slices[lvl]
            pts = anchors[sl]
            inside = (pts[:, 0] > x1) & (pts[:, 0] < x2) & (pts[:, 1] > y1) & (pts[:, 1] < y2)
            cells = np.nonzero(inside)[0] + sl.start
            if cells.size == 0:
                s = strides[lvl]
                g = image_size // s
                col = min(int(cx * image_size // s), g - 1)
                row = min(int(cy * image_size // s), g - 1)
                cells = np.array([sl.start + row * g + col])
            area = w * h
            for cell in cells.tolist():
                if cell not in owner or area < owner[cell][0]:
                    owner[cell] = (area, k)
        levels_used.append(img_levels)
        for cell in sorted(owner):
            k = owner[cell][1]
            cls, cx, cy, w, h = labels[k]
            cls_target[b, cell, int(cls)] = 1.0
            pb.append(b)
            pc.append(cell)
            pbox.append(np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]) * image_size)
            pcls.append(int(cls))
    return Targets(
        image_size=image_size,
        anchors=anchors,
        cell_stride=cell_stride,
        level_slices=slices,
        cls_target=cls_target,
        pos_batch=np.asarray(pb, dtype=np.int64),
        pos_cell=np.asarray(pc, dtype=np.int64),
        pos_box=np.asarray(pbox, dtype=np.float64).reshape(-1, 4),
        pos_class=np.asarray(pcls, dtype=np.int64),
        assigned_level=levels_used,
    )


# ---------------------------------------------------------------------------
# Losses


@dataclass
class LossBreakdown:
    box: float
    cls: float
    dfl: float
    weights: dict = field(default_factory=lambda: dict(LOSS_WEIGHTS))

    @property
    def total(self) -> float:
        w = self.weights
        return w["box"] * self.box + w["cls"] * self.cls + w["dfl"] * self.dfl


def flatten_predictions(preds: Sequence[Tensor]) -> Tensor:
    """Concatenate per-level ``(N, C, H, W)`` maps into ``(N, L, C)``."""
    n, c = preds[0].shape[:2]
    flat = [ops.reshape(p, (n, c, p.shape[2] * p.shape[3])) for p in preds]
    return ops.transpose(ops.concat(flat, axis=2), (0, 2, 1))


def ciou(pred: Tensor, target: np.ndarray) -> Tensor:
    """Complete IoU between predicted (tracked) and target xyxy boxes, ``(P,)``.

    The aspect-ratio trade-off weight is differentiated too, so the
    gradient is exact for the value returned.
    """
    t = np.asarray(target, dtype=pred.dtype)
    x1, y1, x2, y2 = pred[:, 0], pred[:, 1], pred[:, 2], pred[:, 3]
    tx1, ty1, tx2, ty2 = t[:, 0], t[:, 1], t[:, 2], t[:, 3]
    w1, h1 = x2 - x1, y2 - y1
    w2, h2 = tx2 - tx1, ty2 - ty1
    iw = ops.clamp_min(ops.minimum(x2, tx2) - ops.maximum(x1, tx1), 0.0)
    ih = ops.clamp_min(ops.minimum(y2, ty2) - ops.maximum(y1, ty1), 0.0)
    inter = iw * ih
    union = w1 * h1 + w2 * h2 - inter + _EPS
    iou_t = inter / union
    cw = ops.maximum(x2, tx2) - ops.minimum(x1, tx1)
    ch = ops.maximum(y2, ty2) - ops.minimum(y1, ty1)
    c2 = cw * cw + ch * ch + _EPS
    dx = (tx1 + tx2) - x1 - x2
    dy = (ty1 + ty2) - y1 - y2
    rho2 = (dx * dx + dy * dy) * 0.25
    dv = ops.arctan(ops.div(w1, h1 + _EPS)) - np.arctan(w2 / (h2 + _EPS))
    v = dv * dv * (4.0 / math.pi ** 2)
    alpha = v / (v - iou_t + (1.0 + _EPS))
    return iou_t - (rho2 / c2 + v * alpha)


def decode_distances(box_logits: Tensor, reg_max: int) -> Tensor:
    """``(P, 4R)`` logits to ``(P, 4)`` expected distances (tracked)."""
    p = box_logits.shape[0]
    probs = ops.softmax(ops.reshape(box_logits, (p, 4, reg_max)), axis=-1)
    bins = np.arange(reg_max, dtype=box_logits.dtype)
    return ops.sum(probs * bins, axis=-1)


def detection_loss(
    preds: Sequence[Tensor],
    targets: Targets,
    num_classes: int,
    reg_max: int,
    weights: dict | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Weighted box (1 - CIoU), class (BCE) and DFL losses.

    Class BCE is summed over all cells and classes; every term is divided
    by the number of positive cells (at least 1).
    """
    weights = dict(LOSS_WEIGHTS if weights is None else weights)
    flat = flatten_predictions(preds)
    n_pos = max(targets.num_pos, 1)
    cls_logits = flat[:, :, 4 * reg_max:]
    cls_loss = ops.sum(ops.bce_with_logits(cls_logits, targets.cls_target)) * (1.0 / n_pos)
    if targets.num_pos == 0:
        zero = cls_loss * 0.0
        box_loss, dfl_l = zero, zero
    else:
        box_logits = flat[targets.pos_batch, targets.pos_cell, : 4 * reg_max]
        anchors = targets.anchors[targets.pos_cell].astype(flat.dtype)
        strides = targets.cell_stride[targets.pos_cell].astype(flat.dtype)[:, None]
        dist = decode_distances(box_logits, reg_max) * strides
        lt = anchors - dist[:, 0:2]
        rb = anchors + dist[:, 2:4]
        pred_xyxy = ops.concat([lt, rb], axis=1)
        box_loss = ops.sum(1.0 - ciou(pred_xyxy, targets.pos_box)) * (1.0 / n_pos)
        tgt = targets.pos_box
        a = targets.anchors[targets.pos_cell]
        s = targets.cell_stride[targets.pos_cell][:, None]
        ltrb = np.concatenate([a - tgt[:, :2], tgt[:, 2:] - a], axis=1) / s
        ltrb = np.clip(ltrb, 0.0, reg_max - 1 - 0.01)
        side_logits = ops.reshape(box_logits, (targets.num_pos, 4, reg_max))
        # mean over boxes of the mean over their four sides
        dfl_l = dfl_loss(side_logits, ltrb)
    total = box_loss * weights["box"] + cls_loss * weights["cls"] + dfl_l * weights["dfl"]
    breakdown = LossBreakdown(box_loss.item(), cls_loss.item(), dfl_l.item(), weights)
    return total, breakdown


# ---------------------------------------------------------------------------
# Suppression and decoding


def nms_arrays(
    boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_threshold: float
) -> np.ndarray:
    """Greedy per-class NMS on xyxy arrays.

    Returns kept indices sorted by (confidence desc, class asc, centre-x asc).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    if scores.size == 0:
        return np.zeros(0, dtype=np.int64)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    order = np.lexsort((cx, classes, -scores))
    keep = []
    suppressed = np.zeros(scores.size, dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        rest = rest[(classes[rest] == classes[i]) & ~suppressed[rest]]
        if rest.size:
            ov = box_iou(boxes[i:i + 1], boxes[rest])[0]
            suppressed[rest[ov > iou_threshold]] = True
    return np.asarray(keep, dtype=np.int64)


def nms(boxes: Sequence[DetectionBox], iou_threshold: float = 0.7, confidence_threshold: float = 0.0) -> list[DetectionBox]:
    """Greedy, per-class, deterministic non-maximum suppression."""
    if not 0.0 <= iou_threshold <= 1.0 or not 0.0 <= confidence_threshold <= 1.0:
        raise ValueError("thresholds must lie in [0, 1]")
    cand = [b for b in boxes if b.confidence >= confidence_threshold]
    if not cand:
        return []
    xyxy = np.array([b.xyxy for b in cand])
    keep = nms_arrays(xyxy, np.array([b.confidence for b in cand]), np.array([b.class_id for b in cand]), iou_threshold)
    return [cand[i] for i in keep]


def decode_predictions(
    preds: Sequence[Tensor | np.ndarray],
    image_size: int,
    num_classes: int,
    reg_max: int,
    conf_threshold: float = 0.25,
    iou_threshold: float = 0.7,
    max_det: int = 100,
    pre_nms: int = 300,
) -> list[list[DetectionBox]]:
    """Raw head outputs to per-image NMS-filtered detections."""
    arrays = [np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in preds]
    n, c = arrays[0].shape[:2]
    flat = np.concatenate([a.reshape(n, c, -1) for a in arrays], axis=2).transpose(0, 2, 1)
    anchors, cell_stride, _ = make_anchors(image_size, STRIDES[: len(arrays)])
    dist = dfl_decode(flat[:, :, : 4 * reg_max].reshape(n, -1, 4, reg_max)) * cell_stride[None, :, None]
    xyxy = np.concatenate([anchors[None] - dist[..., :2], anchors[None] + dist[..., 2:]], axis=-1)
    xyxy = np.clip(xyxy / image_size, 0.0, 1.0)
    scores = ops._sigmoid_np(flat[:, :, 4 * reg_max:])
    out = []
    for b in range(n):
        cells, cls = np.nonzero(scores[b] > conf_threshold)
        sc = scores[b][cells, cls]
        if sc.size > pre_nms:
            top = np.lexsort((cells, -sc))[:pre_nms]
            cells, cls, sc = cells[top], cls[top], sc[top]
        boxes = xyxy[b][cells]
        keep = nms_arrays(boxes, sc, cls, iou_threshold)[:max_det]
        out.append([
            DetectionBox(int(cls[i]), float(sc[i]), tuple(float(v) for v in xyxy_to_cxcywh(boxes[i])))
            for i in keep
        ])
    return out
