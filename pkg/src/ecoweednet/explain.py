"""GradCAM++ saliency for detector feature maps.

The class score is the largest logit of the requested class over all
prediction cells. With ``g = dS/dA`` at the target layer, the standard
GradCAM++ channel weights are

    alpha = g^2 / (2 g^2 + sum_ij(A) g^3),   w_k = sum_ij alpha * relu(g)

(the exponential-score closed form), and the map is
``relu(sum_k w_k A_k)`` normalized to ``[0, 1]`` and bilinearly resized
to the input.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detection import flatten_predictions
from .errors import UnsupportedLayerError
from .graph import Model
from .tensor import GradTape, Tensor

DEFAULT_LAYER = 16  # P3 neck output in the reference topology


@dataclass
class SaliencyMap:
    heat: np.ndarray   # (H, W) in [0, 1]
    layer_id: int
    class_id: int
    score: float
    cell: int = -1     # prediction cell that produced the score


def default_layer(model: Model) -> int:
    """The first input of the detect node (the finest-scale neck output)."""
    return sorted(model.config.nodes[-1].inputs)[0]


def _check_layer(model: Model, layer_id: int) -> None:
    n = len(model.config.nodes)
    if not 0 <= layer_id < n:
        raise UnsupportedLayerError(f"layer {layer_id} does not exist (graph has {n} nodes)")
    if model.config.nodes[layer_id].kind == "detect":
        raise UnsupportedLayerError(f"layer {layer_id} is the detect head, not a spatial feature map")


def gradcam_weights(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """GradCAM++ channel weights for ``(C, H, W)`` activations and gradients."""
    g2 = grads * grads
    g3 = g2 * grads
    denom = 2.0 * g2 + acts.sum(axis=(1, 2), keepdims=True) * g3
    safe = np.where(denom != 0.0, denom, 1.0)
    alpha = np.where(denom != 0.0, g2 / safe, 0.0)
    return (alpha * np.maximum(grads, 0.0)).sum(axis=(1, 2))


def resize_bilinear(heat: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    from PIL import Image

    h, w = size
    img = Image.fromarray(np.ascontiguousarray(heat, dtype=np.float32))
    return np.asarray(img.resize((w, h), Image.BILINEAR), dtype=np.float64)


def gradcam_pp(model: Model, image: np.ndarray, class_id: int, layer_id: int | None = None) -> SaliencyMap:
    """Saliency of ``class_id`` for one ``(3, H, W)`` image at ``layer_id``."""
    layer_id = default_layer(model) if layer_id is None else int(layer_id)
    _check_layer(model, layer_id)
    if not 0 <= class_id < model.num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {model.num_classes})")
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    was_training = model.training
    model.eval()
    dtype = model.parameters()[0].dtype
    try:
        with GradTape() as tape:
            outputs, preds = model.run(Tensor(image[None].astype(dtype)))
            flat = flatten_predictions(preds)
            col = 4 * model.reg_max + class_id
            cell = int(np.argmax(flat.data[0, :, col]))
            score = flat[0, cell, col]
        act = outputs[layer_id]
        (grad,) = tape.gradient(score, [act])
    finally:
        model.train(was_training)
    a = act.data[0].astype(np.float64)
    g = np.asarray(grad[0], dtype=np.float64)
    w = gradcam_weights(a, g)
    cam = np.maximum(np.tensordot(w, a, axes=1), 0.0)
    heat = _normalize(cam)
    if heat.max() > 0:
        heat = _normalize(np.clip(resize_bilinear(heat, image.shape[1:]), 0.0, None))
    else:
        heat = np.zeros(image.shape[1:])
    return SaliencyMap(heat=heat, layer_id=layer_id, class_id=class_id, score=float(score.item()), cell=cell)


def _normalize(x: np.ndarray) -> np.ndarray:
    m = float(x.max()) if x.size else 0.0
    return x / m if m > 0 else np.zeros_like(x)


def peak(sal: SaliencyMap) -> tuple[int, int]:
    """``(row, col)`` of the hottest pixel."""
    return tuple(int(v) for v in np.unravel_index(np.argmax(sal.heat), sal.heat.shape))


def colorize(heat: np.ndarray, cmap: str = "jet") -> np.ndarray:
    import matplotlib

    return np.asarray(matplotlib.colormaps[cmap](np.clip(heat, 0, 1))[..., :3])


def write_saliency(sal: SaliencyMap, image: np.ndarray, out_dir: str | Path, stem: str = "saliency", alpha: float = 0.5) -> tuple[Path, Path]:
    """Write ``<stem>_heatmap.png`` and a blended ``<stem>_overlay.png``."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rgb = colorize(sal.heat)
    base = np.asarray(image, dtype=np.float64).transpose(1, 2, 0)
    blend = (1 - alpha) * base + alpha * rgb
    paths = out_dir / f"{stem}_heatmap.png", out_dir / f"{stem}_overlay.png"
    for path, arr in zip(paths, (rgb, blend)):
        Image.fromarray(np.clip(arr * 255 + 0.5, 0, 255).astype(np.uint8)).save(path)
    return paths
