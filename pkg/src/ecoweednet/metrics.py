"""Detection metrics: matching, all-point AP, mAP ranges, confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detection import DetectionBox, box_iou, cxcywh_to_xyxy

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
INTERPOLATION = "all-point"


@dataclass
class MatchResult:
    tp: np.ndarray            # (D,) bool, in the order of the sorted detections
    confidences: np.ndarray   # (D,)
    classes: np.ndarray       # (D,)
    matched_gt: np.ndarray    # (D,) gt index or -1
    n_unmatched_gt: int

    @property
    def n_tp(self) -> int:
        return int(self.tp.sum())

    @property
    def n_fp(self) -> int:
        return int((~self.tp).sum())


def _gt_arrays(gts) -> tuple[np.ndarray, np.ndarray]:
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
    boxes = np.array([cxcywh_to_xyxy(r[1:]) for r in g]).reshape(-1, 4)
    return g[:, 0].astype(np.int64), boxes


def sort_detections(dets: Sequence[DetectionBox]) -> list[DetectionBox]:
    """Stable sort by confidence descending."""
    return sorted(dets, key=lambda d: -d.confidence)


def match_detections(dets: Sequence[DetectionBox], gts, iou_threshold: float) -> MatchResult:
    """Greedy same-class matching of detections to ground truth.

    Detections are visited in descending confidence; each takes the
    unmatched same-class GT with the highest IoU, provided it reaches
    ``iou_threshold``.
    """
    dets = sort_detections(dets)
    gcls, gbox = _gt_arrays(gts)
    d = len(dets)
    tp = np.zeros(d, dtype=bool)
    matched = np.full(d, -1, dtype=np.int64)
    taken = np.zeros(gcls.size, dtype=bool)
    if d and gcls.size:
        ious = box_iou(np.array([b.xyxy for b in dets]), gbox)
        for i, det in enumerate(dets):
            ok = (gcls == det.class_id) & ~taken & (ious[i] >= iou_threshold)
            if ok.any():
                j = int(np.argmax(np.where(ok, ious[i], -1.0)))
                taken[j] = True
                tp[i] = True
                matched[i] = j
    return MatchResult(
        tp=tp,
        confidences=np.array([b.confidence for b in dets], dtype=np.float64),
        classes=np.array([b.class_id for b in dets], dtype=np.int64),
        matched_gt=matched,
        n_unmatched_gt=int((~taken).sum()),
    )


def average_precision(tp, confidences, n_gt: int) -> float:
    """Area under the monotone precision envelope (all-point interpolation).

    Returns ``nan`` when there is nothing to score (no GT and no detections).
    """
    tp = np.asarray(tp, dtype=bool)
    conf = np.asarray(confidences, dtype=np.float64)
    if n_gt == 0:
        return float("nan") if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    order = np.argsort(-conf, kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


@dataclass
class ClassStats:
    ap: np.ndarray        # (C, T)
    precision: np.ndarray  # (C,) at the first threshold
    recall: np.ndarray
    n_gt: np.ndarray


def class_statistics(
    dets_per_image: Sequence[Sequence[DetectionBox]],
    gts_per_image: Sequence,
    num_classes: int,
    thresholds: Sequence[float] = IOU_THRESHOLDS,
    pr_conf: float = 0.0,
) -> ClassStats:
    """Per-class AP at every IoU threshold; P and R at the first threshold
    counting only detections with confidence >= ``pr_conf``."""
    n_gt = np.zeros(num_classes, dtype=np.int64)
    for g in gts_per_image:
        for c in np.asarray(g, dtype=np.float64).reshape(-1, 5)[:, 0].astype(np.int64):
            n_gt[c] += 1
    ap = np.full((num_classes, len(thresholds)), np.nan)
    precision = np.zeros(num_classes)
    recall = np.zeros(num_classes)
    for t, thr in enumerate(thresholds):
        flags = [[] for _ in range(num_classes)]
        confs = [[] for _ in range(num_classes)]
        for dets, gts in zip(dets_per_image, gts_per_image):
            m = match_detections(dets, gts, thr)
            for f, c, k in zip(m.tp, m.confidences, m.classes):
                flags[k].append(f)
                confs[k].append(c)
        for k in range(num_classes):
            ap[k, t] = average_precision(flags[k], confs[k], int(n_gt[k]))
            if t == 0:
                sel = np.asarray(confs[k]) >= pr_conf
                kept = np.asarray(flags[k], dtype=bool)[sel] if flags[k] else np.zeros(0, dtype=bool)
                n_tp = int(kept.sum())
                precision[k] = n_tp / kept.size if kept.size else 0.0
                recall[k] = n_tp / n_gt[k] if n_gt[k] else 0.0
    return ClassStats(ap, precision, recall, n_gt)


def map_range(
    dets_per_image: Sequence[Sequence[DetectionBox]],
    gts_per_image: Sequence,
    num_classes: int,
) -> tuple[float, float]:
    """``(mAP@0.5, mAP@0.5:0.95)``; classes without GT or detections are skipped."""
    stats = class_statistics(dets_per_image, gts_per_image, num_classes)
    return _mean_ap(stats.ap[:, 0]), _mean_ap(stats.ap.mean(axis=1))


def _mean_ap(values: np.ndarray) -> float:
    v = values[~np.isnan(values)]
    return float(v.mean()) if v.size else 0.0


def confusion_matrix(
    dets_per_image: Sequence[Sequence[DetectionBox]],
    gts_per_image: Sequence,
    num_classes: int,
    iou_threshold: float = 0.5,
    conf_threshold: float = 0.25,
) -> np.ndarray:
    """``(C+1, C+1)`` counts indexed ``[predicted, true]``; index ``C`` is background.

    Matching is same-class, so a wrong-class overlap books one
    ``(pred, background)`` and one ``(background, true)`` entry.
    """
    bg = num_classes
    mat = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    for dets, gts in zip(dets_per_image, gts_per_image):
        kept = [d for d in dets if d.confidence >= conf_threshold]
        m = match_detections(kept, gts, iou_threshold)
        gcls, _ = _gt_arrays(gts)
        hit = np.zeros(gcls.size, dtype=bool)
        for c, j in zip(m.classes, m.matched_gt):
            if j >= 0:
                mat[c, gcls[j]] += 1
                hit[j] = True
            else:
                mat[c, bg] += 1
        for g in gcls[~hit]:
            mat[bg, g] += 1
    return mat


@dataclass
class EvalReport:
    class_names: list[str]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    ap50: np.ndarray
    ap5095: np.ndarray
    n_gt: np.ndarray
    map50: float
    map5095: float
    confusion: np.ndarray
    settings: dict = field(default_factory=dict)

    def to_text(self) -> str:
        head = f"{'class':<14}{'n_gt':>6}{'P':>8}{'R':>8}{'F1':>8}{'AP50':>8}{'AP50-95':>9}"
        lines = [f"# interpolation={INTERPOLATION} iou_thresholds=0.50:0.05:0.95", head, "-" * len(head)]

        def fmt(v):
            return f"{v:8.4f}" if np.isfinite(v) else f"{'-':>8}"

        for k, name in enumerate(self.class_names):
            lines.append(
                f"{name:<14}{int(self.n_gt[k]):>6}{fmt(self.precision[k])}{fmt(self.recall[k])}"
                f"{fmt(self.f1[k])}{fmt(self.ap50[k])} {fmt(self.ap5095[k])}"
            )
        lines.append("-" * len(head))
        lines.append(
            f"{'all':<14}{int(self.n_gt.sum()):>6}{fmt(float(np.mean(self.precision)))}"
            f"{fmt(float(np.mean(self.recall)))}{fmt(float(np.mean(self.f1)))}"
            f"{fmt(self.map50)} {fmt(self.map5095)}"
        )
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        rows = [f"{k}={v}" for k, v in sorted(self.settings.items())]
        rows.append(f"map50={self.map50:.6f}")
        rows.append(f"map50_95={self.map5095:.6f}")
        for k, name in enumerate(self.class_names):
            for key, arr in (("p", self.precision), ("r", self.recall), ("f1", self.f1),
                             ("ap50", self.ap50), ("ap50_95", self.ap5095)):
                rows.append(f"class.{name}.{key}={arr[k]:.6f}")
        flat = " ".join(str(int(v)) for v in self.confusion.reshape(-1))
        rows.append(f"confusion={flat}")
        return "\n".join(rows) + "\n"

    def write(self, out_dir: str | Path, heatmap: bool = True) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / "report.txt", out_dir / "report.kv"]
        paths[0].write_text(self.to_text(), encoding="utf-8")
        paths[1].write_text(self.to_kv(), encoding="utf-8")
        if heatmap:
            paths.append(plot_confusion(self.confusion, self.class_names, out_dir / "confusion.png"))
        return paths


def evaluate(
    dets_per_image: Sequence[Sequence[DetectionBox]],
    gts_per_image: Sequence,
    class_names: Sequence[str],
    iou_threshold: float = 0.5,
    conf_threshold: float = 0.25,
) -> EvalReport:
    nc = len(class_names)
    stats = class_statistics(dets_per_image, gts_per_image, nc, pr_conf=conf_threshold)
    p, r = stats.precision, stats.recall
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(p + r > 0, 2 * p * r / np.where(p + r > 0, p + r, 1), 0.0)
    ap50 = stats.ap[:, 0]
    ap5095 = stats.ap.mean(axis=1)
    return EvalReport(
        class_names=list(class_names),
        precision=p,
        recall=r,
        f1=f1,
        ap50=ap50,
        ap5095=ap5095,
        n_gt=stats.n_gt,
        map50=_mean_ap(ap50),
        map5095=_mean_ap(ap5095),
        confusion=confusion_matrix(dets_per_image, gts_per_image, nc, iou_threshold, conf_threshold),
        settings={"iou_thr": iou_threshold, "conf_thr": conf_threshold, "interpolation": INTERPOLATION},
    )


def plot_confusion(matrix: np.ndarray, class_names: Sequence[str], path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = list(class_names) + ["background"]
    fig, ax = plt.subplots(figsize=(1 + 0.6 * len(labels), 1 + 0.5 * len(labels)))
    ax.imshow(matrix, cmap="Blues")
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("true")
    ax.set_ylabel("predicted")
    for (i, j), v in np.ndenumerate(matrix):
        ax.text(j, i, str(int(v)), ha="center", va="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
