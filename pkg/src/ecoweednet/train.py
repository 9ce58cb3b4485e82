"""Adam training loop, batched prediction and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Sample, hflip
from .detection import LOSS_WEIGHTS, DetectionBox, assign_targets, decode_predictions, detection_loss
from .graph import GraphConfig, Model, build_graph
from .metrics import EvalReport, evaluate
from .rng import stream
from .tensor import GradTape, Tensor

EVAL_CONF = 0.001  # low threshold so AP sees the whole ranking


class Adam:
    def __init__(self, params, lr: float = 2e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay and p.ndim > 1:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 2e-3
    final_lr_ratio: float = 0.05
    weight_decay: float = 5e-4
    flip_prob: float = 0.5
    max_grad_norm: float = 10.0


@dataclass
class EpochMetrics:
    epoch: int
    box_loss: float
    cls_loss: float
    dfl_loss: float
    total_loss: float
    precision: float = float("nan")
    recall: float = float("nan")
    map50: float = float("nan")
    map50_95: float = float("nan")

    def to_line(self) -> str:
        return " ".join(
            f"{k}={v}" if isinstance(v, int) else f"{k}={v:.6f}" for k, v in vars(self).items()
        )

    @classmethod
    def from_line(cls, line: str) -> "EpochMetrics":
        kv = dict(item.split("=", 1) for item in line.split())
        return cls(**{k: int(v) if k == "epoch" else float(v) for k, v in kv.items()})


@dataclass
class TrainResult:
    model: Model
    history: list[EpochMetrics] = field(default_factory=list)


def stack_batch(samples: Sequence[Sample], dtype) -> tuple[np.ndarray, list[np.ndarray]]:
    return np.stack([s.image for s in samples]).astype(dtype), [s.labels for s in samples]


def predict(
    model: Model,
    images: np.ndarray | Sequence[np.ndarray],
    conf_threshold: float = 0.25,
    iou_threshold: float = 0.7,
    batch_size: int = 32,
) -> list[list[DetectionBox]]:
    """Inference-mode detections for a stack of ``(3, H, W)`` images."""
    was_training = model.training
    model.eval()
    images = np.asarray(images)
    out = []
    dtype = model.parameters()[0].dtype
    for i in range(0, len(images), batch_size):
        x = Tensor(images[i:i + batch_size].astype(dtype))
        preds = model(x)
        out.extend(decode_predictions(
            preds, images.shape[-1], model.num_classes, model.reg_max, conf_threshold, iou_threshold,
        ))
    model.train(was_training)
    return out


def evaluate_model(
    model: Model,
    samples: Sequence[Sample],
    class_names: Sequence[str] | None = None,
    iou_threshold: float = 0.7,
    conf_threshold: float = 0.25,
) -> EvalReport:
    """mAP over the full ranking; the confusion matrix uses ``conf_threshold``."""
    names = list(class_names) if class_names else [f"class{k}" for k in range(model.num_classes)]
    if not samples:
        return evaluate([], [], names, conf_threshold=conf_threshold)
    dets = predict(model, np.stack([s.image for s in samples]), EVAL_CONF, iou_threshold)
    report = evaluate(dets, [s.labels for s in samples], names, 0.5, conf_threshold)
    report.settings["nms_iou_thr"] = iou_threshold
    return report


def train(
    config: GraphConfig,
    samples: Sequence[Sample],
    seed: int = 0,
    settings: TrainSettings | None = None,
    val_samples: Sequence[Sample] | None = None,
    metrics_path: str | Path | None = None,
    model: Model | None = None,
    on_epoch: Callable[[EpochMetrics, Model], None] | None = None,
) -> TrainResult:
    """Train ``config`` from scratch on ``samples``.

    Each epoch appends one ``key=value`` line to ``metrics_path``. Validation
    metrics are computed on ``val_samples`` (or skipped when empty).
    """
    st = settings or TrainSettings()
    model = model or build_graph(config, seed=seed)
    model.train()
    params = model.parameters()
    opt = Adam(params, lr=st.lr, weight_decay=st.weight_decay)
    shuffle_rng = stream(seed, "shuffle")
    aug_rng = stream(seed, "augment")
    dtype = params[0].dtype
    n = len(samples)
    steps_per_epoch = max(1, math.ceil(n / st.batch_size))
    total_steps = steps_per_epoch * st.epochs
    result = TrainResult(model)
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
    step = 0
    for epoch in range(1, st.epochs + 1):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(4)
        for b in range(steps_per_epoch):
            idx = order[b * st.batch_size:(b + 1) * st.batch_size]
            if idx.size == 0:
                continue
            flips = aug_rng.random(idx.size) < st.flip_prob
            batch = [hflip(samples[i]) if f else samples[i] for i, f in zip(idx, flips)]
            x, labels = stack_batch(batch, dtype)
            targets = assign_targets(labels, config.resolution, config.num_classes)
            progress = step / max(1, total_steps - 1)
            opt.lr = st.lr * (st.final_lr_ratio + (1 - st.final_lr_ratio) * 0.5 * (1 + math.cos(math.pi * progress)))
            with GradTape() as tape:
                preds = model(Tensor(x))
                loss, parts = detection_loss(preds, targets, config.num_classes, config.reg_max)
            grads = tape.gradient(loss, params)
            clip_grad_norm(grads, st.max_grad_norm)
            opt.step(grads)
            sums += np.array([parts.box, parts.cls, parts.dfl, parts.total]) * idx.size
            step += 1
        box, cls, dfl, tot = sums / max(n, 1)
        em = EpochMetrics(epoch, float(box), float(cls), float(dfl), float(tot))
        if val_samples:
            rep = evaluate_model(model, val_samples)
            em.precision = float(np.mean(rep.precision))
            em.recall = float(np.mean(rep.recall))
            em.map50 = rep.map50
            em.map50_95 = rep.map5095
            model.train()
        result.history.append(em)
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(em.to_line() + "\n")
        if on_epoch is not None:
            on_epoch(em, model)
    model.eval()
    return result


__all__ = [
    "Adam", "TrainSettings", "EpochMetrics", "TrainResult", "train", "predict",
    "evaluate_model", "LOSS_WEIGHTS",
]
