"""Datasets, the synthetic corpus, splits and checkpoint files."""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CheckpointError
from .rng import stream

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class Sample:
    """A ``(3, H, W)`` image in ``[0, 1]`` with ``(K, 5)`` labels ``class cx cy w h``."""

    image: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1, 5)

    @property
    def num_boxes(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class Diagnostic:
    file: str
    line: int | None
    message: str

    def __str__(self) -> str:
        where = self.file if self.line is None else f"{self.file}:{self.line}"
        return f"{where}: {self.message}"


# ---------------------------------------------------------------------------
# YOLO text labels


def read_class_list(classes: str | Path | Sequence[str]) -> list[str]:
    if isinstance(classes, (str, Path)):
        lines = Path(classes).read_text(encoding="utf-8").splitlines()
        return [ln.strip() for ln in lines if ln.strip()]
    return list(classes)


def parse_label_text(text: str, num_classes: int, file: str = "<labels>") -> tuple[np.ndarray, list[Diagnostic]]:
    """Parse ``class cx cy w h`` lines, collecting bad lines as diagnostics."""
    rows, diags = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            diags.append(Diagnostic(file, lineno, f"expected 5 fields, got {len(parts)}"))
            continue
        try:
            cls = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError:
            diags.append(Diagnostic(file, lineno, f"unparseable values {line!r}"))
            continue
        if not 0 <= cls < num_classes:
            diags.append(Diagnostic(file, lineno, f"class {cls} outside [0, {num_classes})"))
            continue
        vals = np.array([cx, cy, w, h])
        if not np.all(np.isfinite(vals)) or np.any(vals < 0) or np.any(vals > 1):
            diags.append(Diagnostic(file, lineno, f"coordinate out of range in {line!r}"))
            continue
        rows.append([cls, cx, cy, w, h])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 5), diags


def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path: str | Path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[0] in (1, 3):
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(arr.squeeze()).save(path)


def load_dataset(
    images_dir: str | Path,
    labels_dir: str | Path,
    class_list: str | Path | Sequence[str],
) -> tuple[list[Sample], list[Diagnostic]]:
    """Load images and YOLO label files, sorted by file name.

    A missing label file yields an empty label set and a warning; bad lines
    are skipped and reported.
    """
    names = read_class_list(class_list)
    images_dir, labels_dir = Path(images_dir), Path(labels_dir)
    samples, diags = [], []
    for img_path in sorted(p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        label_path = labels_dir / (img_path.stem + ".txt")
        if label_path.exists():
            labels, d = parse_label_text(label_path.read_text(encoding="utf-8"), len(names), str(label_path))
            diags.extend(d)
        else:
            msg = f"no label file for {img_path.name}; treating as background"
            warnings.warn(msg, stacklevel=2)
            diags.append(Diagnostic(str(label_path), None, msg))
            labels = np.zeros((0, 5))
        samples.append(Sample(load_image(img_path), labels, img_path.stem))
    return samples, diags


def write_dataset(samples: Sequence[Sample], root: str | Path, class_names: Sequence[str]) -> None:
    """Write samples as ``images/*.png`` + ``labels/*.txt`` + ``classes.txt``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("\n".join(class_names) + "\n", encoding="utf-8")
    for i, s in enumerate(samples):
        stem = s.name or f"{i:05d}"
        save_image(root / "images" / f"{stem}.png", s.image)
        lines = [f"{int(r[0])} {r[1]:.6f} {r[2]:.6f} {r[3]:.6f} {r[4]:.6f}" for r in s.labels]
        (root / "labels" / f"{stem}.txt").write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# Synthetic corpus

# (shape, rgb, texture) per class; shapes and palettes chosen to stay apart
# even under the background noise.
_CLASS_STYLES = [
    ("ellipse", (0.20, 0.75, 0.20), "flat"),
    ("square", (0.95, 0.85, 0.15), "flat"),
    ("diamond", (0.15, 0.55, 0.90), "flat"),
    ("cross", (0.90, 0.30, 0.60), "flat"),
    ("ellipse", (0.95, 0.95, 0.95), "stripes"),
    ("square", (0.10, 0.35, 0.10), "dots"),
    ("diamond", (0.95, 0.55, 0.10), "stripes"),
    ("cross", (0.55, 0.95, 0.55), "dots"),
    ("ellipse", (0.60, 0.20, 0.85), "stripes"),
    ("square", (0.20, 0.85, 0.85), "stripes"),
    ("diamond", (0.85, 0.20, 0.20), "dots"),
    ("cross", (0.95, 0.95, 0.40), "stripes"),
]
MAX_SYNTH_CLASSES = len(_CLASS_STYLES)


def default_imbalance(n_classes: int) -> np.ndarray:
    """Harmonic class weights ``1, 1/2, ...``: a mild long tail."""
    w = 1.0 / np.arange(1, n_classes + 1)
    return w / w.sum()


def apportion(total: int, weights: Sequence[float]) -> np.ndarray:
    """Integer counts summing to ``total`` by largest remainder (ties to lower index)."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("imbalance weights must be non-negative with positive sum")
    quota = total * w / w.sum()
    counts = np.floor(quota).astype(np.int64)
    rest = total - counts.sum()
    order = np.lexsort((np.arange(w.size), -(quota - counts)))
    counts[order[:rest]] += 1
    return counts


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = np.array([0.42, 0.30, 0.20])[:, None, None]
    coarse = rng.normal(0.0, 1.0, (3, size // 8 + 1, size // 8 + 1))
    coarse = np.repeat(np.repeat(coarse, 8, axis=1), 8, axis=2)[:, :size, :size]
    fine = rng.normal(0.0, 1.0, (1, size, size))
    img = base + 0.05 * coarse + 0.04 * fine
    return np.clip(img, 0.0, 1.0)


def _shape_mask(shape: str, size: int, cx: float, cy: float, hw: float, hh: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    u, v = (xx - cx) / hw, (yy - cy) / hh
    if shape == "ellipse":
        return u * u + v * v <= 1.0
    if shape == "square":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if shape == "cross":
        return ((np.abs(u) <= 1.0) & (np.abs(v) <= 0.35)) | ((np.abs(u) <= 0.35) & (np.abs(v) <= 1.0))
    raise ValueError(shape)


def _texture(kind: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "stripes":
        return np.where((xx + yy) // 2 % 2 == 0, 1.0, 0.6)
    if kind == "dots":
        return np.where((xx % 3 == 0) & (yy % 3 == 0), 0.5, 1.0)
    return np.ones((size, size))


def render_blob(image: np.ndarray, cls: int, cx: float, cy: float, hw: float, hh: float) -> np.ndarray | None:
    """Paint a class-coded blob in place; return its tight pixel box ``x1 y1 x2 y2``."""
    shape, rgb, tex = _CLASS_STYLES[cls]
    size = image.shape[-1]
    mask = _shape_mask(shape, size, cx, cy, hw, hh)
    if not mask.any():
        return None
    color = np.asarray(rgb)[:, None, None] * _texture(tex, size)[None]
    image[:, mask] = color[:, mask]
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def synth_corpus(
    seed: int,
    n_images: int,
    image_size: int = 64,
    n_classes: int = 2,
    objects_per_image: tuple[int, int] = (1, 3),
    imbalance: Sequence[float] | None = None,
    size_range: tuple[float, float] = (0.14, 0.55),
) -> list[Sample]:
    """Textured soil-like backgrounds with class-coded blobs and exact boxes.

    The number of objects per image is drawn uniformly from
    ``objects_per_image``; the class of every object is then fixed by
    apportioning the total object count to ``imbalance`` exactly and
    shuffling. Boxes are tight around the rendered pixels.
    """
    if not 1 <= n_classes <= MAX_SYNTH_CLASSES:
        raise ValueError(f"n_classes must be in [1, {MAX_SYNTH_CLASSES}]")
    if n_images == 0:
        return []
    rng = stream(seed, "synth")
    lo, hi = objects_per_image
    per_image = rng.integers(lo, hi + 1, size=n_images)
    weights = default_imbalance(n_classes) if imbalance is None else np.asarray(imbalance, dtype=np.float64)
    if weights.size != n_classes:
        raise ValueError("imbalance profile needs one weight per class")
    counts = apportion(int(per_image.sum()), weights)
    classes = rng.permutation(np.repeat(np.arange(n_classes), counts))
    samples, k = [], 0
    for i in range(n_images):
        img = _background(rng, image_size)
        placed, labels = [], []
        for _ in range(per_image[i]):
            cls = int(classes[k])
            k += 1
            for _attempt in range(50):
                side = rng.uniform(*size_range) * image_size
                aspect = rng.uniform(0.7, 1.4)
                hw, hh = side / 2 * np.sqrt(aspect), side / 2 / np.sqrt(aspect)
                hw, hh = min(hw, image_size / 2 - 1), min(hh, image_size / 2 - 1)
                cx = rng.uniform(hw, image_size - hw)
                cy = rng.uniform(hh, image_size - hh)
                cand = np.array([cx - hw, cy - hh, cx + hw, cy + hh])
                if all(_overlap(cand, p) < 0.05 for p in placed):
                    break
            box = render_blob(img, cls, cx, cy, hw, hh)
            placed.append(cand)
            x1, y1, x2, y2 = box / image_size
            labels.append([cls, (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1])
        samples.append(Sample(img.astype(np.float32), np.asarray(labels), f"synth{i:05d}"))
    return samples


def _overlap(a: np.ndarray, b: np.ndarray) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih / min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))


def class_histogram(samples: Sequence[Sample], n_classes: int) -> np.ndarray:
    hist = np.zeros(n_classes, dtype=np.int64)
    for s in samples:
        for c in s.labels[:, 0].astype(np.int64):
            hist[c] += 1
    return hist


def hflip(sample: Sample) -> Sample:
    labels = sample.labels.copy()
    labels[:, 1] = 1.0 - labels[:, 1]
    return Sample(np.ascontiguousarray(sample.image[:, :, ::-1]), labels, sample.name)


# ---------------------------------------------------------------------------
# Splits


def kfold_split(samples: Sequence, k: int, seed: int) -> list[tuple[list, list]]:
    """``k`` (train, val) partitions; val folds are disjoint and cover the input."""
    n = len(samples)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    order = stream(seed, "split").permutation(n)
    folds = np.array_split(order, k)
    out = []
    for i in range(k):
        val = sorted(folds[i].tolist())
        train = sorted(np.concatenate([folds[j] for j in range(k) if j != i]).tolist())
        out.append(([samples[j] for j in train], [samples[j] for j in val]))
    return out


def fold_indices(n: int, k: int, seed: int) -> list[list[int]]:
    """Validation indices per fold (what :func:`kfold_split` uses)."""
    return [[i for i in val] for _, val in kfold_split(list(range(n)), k, seed)]


def subset(samples: Sequence, fraction: float, seed: int) -> list:
    """Uniform sample without replacement of ``round(fraction * n)`` items, in input order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    n = len(samples)
    m = min(n, max(1, int(round(fraction * n)))) if n else 0
    idx = np.sort(stream(seed, "subset").choice(n, size=m, replace=False)) if m else []
    return [samples[i] for i in idx]


def train_val_test_split(samples: Sequence, seed: int, fractions=(0.8, 0.1, 0.1)) -> tuple[list, list, list]:
    order = stream(seed, "split").permutation(len(samples))
    counts = apportion(len(samples), fractions)
    a, b = counts[0], counts[0] + counts[1]
    pick = lambda ids: [samples[i] for i in sorted(ids.tolist())]
    return pick(order[:a]), pick(order[a:b]), pick(order[b:])


# ---------------------------------------------------------------------------
# Checkpoints
#
# layout (little-endian):
#   b"EWCKPT\0\1"  u32 version
#   u32 len + utf-8 graph config   u32 len + utf-8 JSON metadata
#   u32 record count, then per record:
#     u16 len + utf-8 name, u8 dtype code, u8 ndim, ndim * u32 dims, payload

MAGIC = b"EWCKPT\x00\x01"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4")}


@dataclass
class Checkpoint:
    config_text: str
    weights: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def model_state(model) -> dict[str, np.ndarray]:
    """Learnable tensors and buffers by name (each name once)."""
    state = {}
    for name, p in model.named_parameters():
        state[name] = p.data
    for name, b in model.named_buffers():
        if name in state:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        state[name] = b
    return state


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    for text in (ckpt.config_text, json.dumps(ckpt.metadata, sort_keys=True)):
        raw = text.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    buf.write(struct.pack("<I", len(ckpt.weights)))
    for name in ckpt.weights:
        arr = np.ascontiguousarray(ckpt.weights[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", 1, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    texts = []
    for _ in range(2):
        (n,) = struct.unpack("<I", take(4))
        texts.append(bytes(take(n)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    weights = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(bytes(take(size)), dtype=dt).reshape(shape)
        if name in weights:
            raise CheckpointError(f"duplicate record {name!r}")
        weights[name] = arr
    if pos != len(view):
        raise CheckpointError("trailing bytes after last record")
    return Checkpoint(texts[0], weights, json.loads(texts[1]), version)


def save_checkpoint(path: str | Path, model, config_text: str, metadata: dict | None = None) -> Path:
    """Write a checkpoint atomically (temp file + rename)."""
    path = Path(path)
    data = encode_checkpoint(Checkpoint(config_text, model_state(model), dict(metadata or {})))
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def apply_state(model, weights: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into ``model``; names and shapes must match exactly."""
    state = model_state(model)
    missing = sorted(set(state) - set(weights))
    extra = sorted(set(weights) - set(state))
    if missing or extra:
        raise CheckpointError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, target in state.items():
        src = weights[name]
        if src.shape != target.shape:
            raise CheckpointError(f"shape mismatch for {name}: {src.shape} vs {target.shape}")
        target[...] = src


def load_model(path: str | Path):
    """Rebuild a model from a checkpoint's embedded config and weights."""
    from .graph import build_graph, parse_config

    ckpt = load_checkpoint(path)
    model = build_graph(parse_config(ckpt.config_text), seed=0)
    apply_state(model, ckpt.weights)
    model.eval()
    return model, ckpt
