"""Command-line entry point: ``ecoweed <command> [options]``.

Commands: summarize, ablate, train, eval, saliency, split. Every command
that writes files first writes ``manifest.json`` to its ``--out`` directory.

Exit codes: 0 success, 1 runtime failure (missing files, bad checkpoint),
2 malformed input (config syntax, bad arguments), 3 graph build errors.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .attention import DEFAULT_LAMBDA
from .blocks import DFL_BINS
from .data import (
    Sample, fold_indices, load_dataset, load_image, load_model, save_checkpoint, subset,
    synth_corpus, train_val_test_split,
)
from .detection import LOSS_WEIGHTS
from .errors import ConfigError, EcoWeedError, GraphBuildError
from .graph import (
    GFLOPS_CONVENTION, GraphConfig, ablation_grid, account, build_graph, load_config,
    parse_grid, format_grid, reference_config, reference_config_path,
)

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT, EXIT_BUILD = 0, 1, 2, 3


@dataclass
class RunManifest:
    command: str
    config: str | None
    seed: int
    out_dir: str | None
    arguments: dict = field(default_factory=dict)
    constants: dict = field(default_factory=lambda: {
        "simam_lambda": DEFAULT_LAMBDA,
        "loss_weights": dict(LOSS_WEIGHTS),
        "dfl_bins": DFL_BINS,
        "gflops_convention": GFLOPS_CONVENTION,
    })
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def resolve_config(spec: str | None, default: str = "ecoweednet-n") -> tuple[GraphConfig, str]:
    """A config from a file path or a bundled config name."""
    spec = spec or default
    path = Path(spec)
    if path.suffix == ".graph" or path.exists():
        if not path.exists():
            raise FileNotFoundError(f"config not found: {spec}")
        return load_config(path), str(path)
    return reference_config(spec), str(reference_config_path(spec))


def _ids(text: str | None) -> frozenset[int] | None:
    if text is None:
        return None
    text = text.strip()
    if text in ("", "-"):
        return frozenset()
    try:
        return frozenset(int(t) for t in text.split(","))
    except ValueError:
        raise ConfigError(f"bad index list {text!r}") from None


def _with_overrides(cfg: GraphConfig, args) -> GraphConfig:
    spab, simam = _ids(getattr(args, "spab", None)), _ids(getattr(args, "simam", None))
    if spab is None and simam is None:
        return cfg
    return cfg.with_attention(
        cfg.spab_indices if spab is None else spab,
        cfg.simam_indices if simam is None else simam,
    )


def _load_samples(args, cfg: GraphConfig | None = None) -> tuple[list[Sample], list[str]]:
    if getattr(args, "data", None):
        root = Path(args.data)
        classes = root / "classes.txt"
        if not classes.exists():
            raise FileNotFoundError(f"dataset has no classes.txt: {root}")
        samples, diags = load_dataset(root / "images", root / "labels", classes)
        for d in diags:
            print(f"warning: {d}", file=sys.stderr)
        names = classes.read_text(encoding="utf-8").split()
        return samples, names
    if getattr(args, "synthetic", None):
        nc = cfg.num_classes if cfg is not None else args.num_classes
        size = cfg.resolution if cfg is not None else 64
        return synth_corpus(args.seed, args.synthetic, size, nc), [f"class{k}" for k in range(nc)]
    raise FileNotFoundError("no dataset given (use --data DIR or --synthetic N)")


@contextlib.contextmanager
def _thread_limit():
    n = os.environ.get("ECOWEED_THREADS")
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=max(1, int(n))):
        yield


# ---------------------------------------------------------------------------
# commands


def cmd_summarize(args) -> int:
    cfg, path = resolve_config(args.config)
    cfg = _with_overrides(cfg, args)
    report = account(build_graph(cfg, seed=args.seed))
    text = f"# config {cfg.name} ({path})\n" + report.format_table() + "\n"
    if args.out:
        RunManifest("summarize", path, args.seed, args.out, _argdict(args)).write(args.out)
        (Path(args.out) / "summary.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, path = resolve_config(args.config)
    grid_path = Path(args.grid) if args.grid else Path(__file__).parent / "configs" / "ablation.grid"
    if not grid_path.exists():
        raise FileNotFoundError(f"grid file not found: {grid_path}")
    rows = parse_grid(grid_path.read_text(encoding="utf-8"))
    base = cfg.with_attention((), ())
    baseline = account(build_graph(base, seed=0))
    text = format_grid(ablation_grid(base, rows), baseline)
    if args.out:
        RunManifest("ablate", path, args.seed, args.out, _argdict(args)).write(args.out)
        (Path(args.out) / "grid.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainSettings, train

    cfg, path = resolve_config(args.config, default="toy")
    cfg = _with_overrides(cfg, args)
    out = Path(args.out)
    manifest = RunManifest("train", path, args.seed, str(out), _argdict(args))
    manifest.constants["interpolation"] = "all-point"
    manifest.write(out)
    samples, names = _load_samples(args, cfg)
    tr, val, _test = train_val_test_split(samples, args.seed)
    if args.subset_fraction < 1.0:
        tr = subset(tr, args.subset_fraction, args.seed)
    metrics_path = out / "metrics.txt"
    if metrics_path.exists():
        metrics_path.unlink()
    settings = TrainSettings(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr)
    result = train(cfg, tr, seed=args.seed, settings=settings, val_samples=val, metrics_path=metrics_path)
    meta = {"epochs": args.epochs, "seed": args.seed, "loss_weights": dict(LOSS_WEIGHTS),
            "train_images": len(tr), "class_names": names}
    save_checkpoint(out / "model.ckpt", result.model, cfg.to_text(), meta)
    last = result.history[-1] if result.history else None
    print(f"trained {len(tr)} images for {args.epochs} epochs -> {out / 'model.ckpt'}")
    if last is not None:
        print(last.to_line())
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate_model

    out = Path(args.out)
    RunManifest("eval", args.checkpoint, args.seed, str(out), _argdict(args)).write(out)
    model, ckpt = load_model(args.checkpoint)
    samples, names = _load_samples(args, model.config)
    if args.synthetic and not args.data:
        samples = train_val_test_split(samples, args.seed)[2] or samples
    names = ckpt.metadata.get("class_names", names)
    report = evaluate_model(model, samples, names, args.iou_thr, args.conf_thr)
    report.write(out)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_saliency(args) -> int:
    from .explain import gradcam_pp, write_saliency

    out = Path(args.out)
    RunManifest("saliency", args.checkpoint, args.seed, str(out), _argdict(args)).write(out)
    model, _ = load_model(args.checkpoint)
    if args.image:
        if not Path(args.image).exists():
            raise FileNotFoundError(f"image not found: {args.image}")
        image = load_image(args.image)
    else:
        image = synth_corpus(args.seed, 1, model.config.resolution, model.num_classes)[0].image
    sal = gradcam_pp(model, image, args.class_id, args.layer)
    paths = write_saliency(sal, image, out)
    np.save(out / "saliency.npy", sal.heat)
    print(f"layer={sal.layer_id} class={sal.class_id} score={sal.score:.4f}")
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_split(args) -> int:
    if args.out:
        RunManifest("split", None, args.seed, args.out, _argdict(args)).write(args.out)
    samples, _ = _load_samples(args)
    names = [s.name or f"{i:05d}" for i, s in enumerate(samples)]
    lines = []
    for i, val in enumerate(fold_indices(len(samples), args.kfolds, args.seed)):
        lines.append(f"fold={i} size={len(val)} val={','.join(names[j] for j in val)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        (Path(args.out) / "folds.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _argdict(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecoweed", description="Lightweight weed detector toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="graph file or bundled config name")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output directory")

    def attention(sp):
        sp.add_argument("--spab", help="override SPAB indices, e.g. 1,3 (- for none)")
        sp.add_argument("--simam", help="override SimAM indices, e.g. 8,11,15 (- for none)")

    def dataset(sp):
        sp.add_argument("--data", help="dataset dir with images/, labels/, classes.txt")
        sp.add_argument("--synthetic", type=int, metavar="N", help="use N synthetic images")

    sp = sub.add_parser("summarize", help="per-layer params and GFLOPs")
    common(sp)
    attention(sp)
    sp.set_defaults(func=cmd_summarize)

    sp = sub.add_parser("ablate", help="account an attention-placement grid")
    common(sp)
    sp.add_argument("--grid", help="grid file (default: bundled ablation grid)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    attention(sp)
    dataset(sp)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--lr", type=float, default=2e-3)
    sp.add_argument("--subset-fraction", type=float, default=1.0)
    sp.set_defaults(func=cmd_train, out="runs/train")

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp, config=False)
    dataset(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--iou-thr", type=float, default=0.7, help="NMS IoU threshold")
    sp.add_argument("--conf-thr", type=float, default=0.25, help="confusion-matrix confidence")
    sp.set_defaults(func=cmd_eval, out="runs/eval")

    sp = sub.add_parser("saliency", help="GradCAM++ heatmap for one image")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", help="image file (default: one synthetic image)")
    sp.add_argument("--class", dest="class_id", type=int, default=0)
    sp.add_argument("--layer", type=int, default=None)
    sp.set_defaults(func=cmd_saliency, out="runs/saliency")

    sp = sub.add_parser("split", help="k-fold listings")
    common(sp, config=False)
    dataset(sp)
    sp.add_argument("--kfolds", type=int, default=5)
    sp.add_argument("--num-classes", type=int, default=2, help="classes for --synthetic")
    sp.set_defaults(func=cmd_split)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except GraphBuildError as exc:
        print(f"graph error: {exc}", file=sys.stderr)
        return EXIT_BUILD
    except (EcoWeedError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
