"""Declarative detector graphs, attention insertion and cost accounting.

Graph file format (``ecoweed-graph`` version 1)::

    #! ecoweed-graph 1
    [header]
    resolution = 640
    num_classes = 12
    spab = 1,3
    simam = 8,11,15

    [nodes]
    0   conv    from=in  c=16  k=3  s=2
    1   conv    c=32  k=3  s=2
    ...
    23  detect  from=16,19,22

``from`` defaults to the previous node (``in`` is the image). Attention
indices name the base node whose output is refined; indices count nodes
from 0 in file order. When both attentions hit the same node, SPAB runs
first. Neither changes a node's index.

MACs cover convolutions and attention matrix products only; GFLOPs are
reported as ``2 * MACs / 1e9``.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attention import DEFAULT_LAMBDA, SimAM, SpabLayer
from .blocks import C2PSA, C3K2, DFL_BINS, SPPF, Concat, ConvBNAct, Detect, Upsample
from .errors import AttentionIndexError, ConfigError, GraphBuildError
from .module import Module
from .tensor import Tensor

FORMAT_TAG = "#! ecoweed-graph 1"
GFLOPS_CONVENTION = "GFLOPs = 2 * MACs / 1e9 (conv + attention matmuls; BN, activations, pooling, SimAM statistics excluded)"

KINDS = ("conv", "c3k2", "sppf", "c2psa", "spab", "simam", "upsample", "concat", "detect")
_NODE_KEYS = {"from", "c", "k", "s", "r", "e", "h"}
_HEADER_KEYS = {
    "name", "resolution", "num_classes", "reg_max", "spab", "simam", "simam_lambda", "simam_mode",
}


@dataclass
class LayerNode:
    """One architecture layer: block kind, widths and input references."""

    kind: str
    inputs: tuple[int, ...] = ()
    out_channels: int | None = None
    kernel: int = 1
    stride: int = 1
    repeat: int = 1
    expansion: float = 0.5
    heads: int | None = None
    line: int | None = None

    def to_text(self, idx: int, previous: int) -> str:
        parts = [f"{idx:<3d}", f"{self.kind:<8s}"]
        default_from = (previous,) if previous >= 0 else (-1,)
        if tuple(self.inputs) != default_from:
            parts.append("from=" + ",".join("in" if i < 0 else str(i) for i in self.inputs))
        if self.out_channels is not None and self.kind not in ("upsample", "concat", "detect", "simam"):
            parts.append(f"c={self.out_channels}")
        if self.kind == "conv":
            parts += [f"k={self.kernel}", f"s={self.stride}"]
        if self.kind == "upsample" and self.stride != 2:
            parts.append(f"s={self.stride}")
        if self.kind in ("c3k2", "c2psa"):
            parts.append(f"r={self.repeat}")
            if self.expansion != 0.5:
                parts.append(f"e={self.expansion:g}")
        if self.kind == "c2psa" and self.heads is not None:
            parts.append(f"h={self.heads}")
        if self.kind == "sppf" and self.kernel != 5:
            parts.append(f"k={self.kernel}")
        return "  ".join(parts)


@dataclass
class GraphConfig:
    nodes: list[LayerNode]
    spab_indices: frozenset[int] = frozenset()
    simam_indices: frozenset[int] = frozenset()
    resolution: int = 640
    num_classes: int = 12
    reg_max: int = DFL_BINS
    simam_lambda: float = DEFAULT_LAMBDA
    simam_mode: str = "leave-one-out"
    name: str = "graph"

    def with_attention(self, spab: Iterable[int] = (), simam: Iterable[int] = ()) -> "GraphConfig":
        return dataclasses.replace(
            self, spab_indices=frozenset(int(i) for i in spab), simam_indices=frozenset(int(i) for i in simam)
        )

    def to_text(self) -> str:
        def ids(s):
            return ",".join(str(i) for i in sorted(s)) if s else "-"

        lines = [
            FORMAT_TAG,
            "[header]",
            f"name = {self.name}",
            f"resolution = {self.resolution}",
            f"num_classes = {self.num_classes}",
            f"reg_max = {self.reg_max}",
            f"spab = {ids(self.spab_indices)}",
            f"simam = {ids(self.simam_indices)}",
            f"simam_lambda = {self.simam_lambda:g}",
            f"simam_mode = {self.simam_mode}",
            "",
            "[nodes]",
        ]
        for i, node in enumerate(self.nodes):
            lines.append(node.to_text(i, i - 1))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Parsing


def _parse_ids(text: str, line: int, col: int) -> frozenset[int]:
    text = text.strip()
    if text in ("", "-"):
        return frozenset()
    out = set()
    for part in text.split(","):
        try:
            out.add(int(part))
        except ValueError:
            raise ConfigError(f"bad index {part.strip()!r}", line, col) from None
    return frozenset(out)


def parse_config(text: str) -> GraphConfig:
    """Parse graph text; raises :class:`ConfigError` with a line/column."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_TAG:
        raise ConfigError(f"missing format tag {FORMAT_TAG!r}", 1, 1)
    header: dict[str, tuple[str, int, int]] = {}
    nodes: list[LayerNode] = []
    section = None
    for lineno, raw in enumerate(lines[1:], start=2):
        stripped = raw.split("#", 1)[0].rstrip()
        if not stripped.strip():
            continue
        indent = len(stripped) - len(stripped.lstrip())
        body = stripped.strip()
        if body.startswith("["):
            if body not in ("[header]", "[nodes]"):
                raise ConfigError(f"unknown section {body}", lineno, indent + 1)
            section = body[1:-1]
            continue
        if section == "header":
            if "=" not in body:
                raise ConfigError("expected 'key = value'", lineno, indent + 1)
            key, value = body.split("=", 1)
            key = key.strip()
            if key not in _HEADER_KEYS:
                raise ConfigError(f"unknown header key {key!r}", lineno, indent + 1)
            header[key] = (value.strip(), lineno, indent + raw[indent:].index("=") + 2)
        elif section == "nodes":
            nodes.append(_parse_node(raw, lineno, len(nodes)))
        else:
            raise ConfigError("content outside a section", lineno, indent + 1)
    if not nodes:
        raise ConfigError("no [nodes] section", len(lines), 1)

    cfg = GraphConfig(nodes=nodes)
    for key, (value, lineno, col) in header.items():
        try:
            if key in ("resolution", "num_classes", "reg_max"):
                setattr(cfg, key, int(value))
            elif key == "simam_lambda":
                cfg.simam_lambda = float(value)
            elif key in ("simam_mode", "name"):
                setattr(cfg, key, value)
            elif key == "spab":
                cfg.spab_indices = _parse_ids(value, lineno, col)
            elif key == "simam":
                cfg.simam_indices = _parse_ids(value, lineno, col)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key}: {value!r}", lineno, col) from None
    return cfg


def _parse_node(raw: str, lineno: int, position: int) -> LayerNode:
    tokens = []
    col = 0
    for part in raw.split("#", 1)[0].split():
        col = raw.index(part, col)
        tokens.append((part, col + 1))
        col += len(part)
    if len(tokens) < 2:
        raise ConfigError("node line needs an index and a kind", lineno, tokens[0][1] if tokens else 1)
    (idx_text, idx_col), (kind, kind_col) = tokens[0], tokens[1]
    try:
        idx = int(idx_text)
    except ValueError:
        raise ConfigError(f"node index {idx_text!r} is not an integer", lineno, idx_col) from None
    if idx != position:
        raise ConfigError(f"node index {idx} out of order (expected {position})", lineno, idx_col)
    if kind not in KINDS:
        raise ConfigError(f"unknown node kind {kind!r}", lineno, kind_col)
    node = LayerNode(kind=kind, inputs=(position - 1,), line=lineno)
    if kind == "sppf":
        node.kernel = 5
    if kind == "upsample":
        node.stride = 2
    for token, tcol in tokens[2:]:
        if "=" not in token:
            raise ConfigError(f"expected key=value, got {token!r}", lineno, tcol)
        key, value = token.split("=", 1)
        vcol = tcol + len(key) + 1
        if key not in _NODE_KEYS:
            raise ConfigError(f"unknown node field {key!r}", lineno, tcol)
        try:
            if key == "from":
                node.inputs = tuple(-1 if v == "in" else int(v) for v in value.split(","))
            elif key == "c":
                node.out_channels = int(value)
            elif key == "k":
                node.kernel = int(value)
            elif key == "s":
                node.stride = int(value)
            elif key == "r":
                node.repeat = int(value)
            elif key == "e":
                node.expansion = float(value)
            elif key == "h":
                node.heads = int(value)
        except ValueError:
            raise ConfigError(f"bad value {value!r} for {key}", lineno, vcol) from None
    return node


def load_config(path: str | Path) -> GraphConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def reference_config_path(name: str) -> Path:
    """Path of a bundled graph file (``ecoweednet-n``, ``toy``...)."""
    base = Path(__file__).parent / "configs"
    for candidate in (base / name, base / f"{name}.graph"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no bundled config named {name!r}")


def reference_config(name: str = "ecoweednet-n") -> GraphConfig:
    return load_config(reference_config_path(name))


# ---------------------------------------------------------------------------
# Validation and shape inference


@dataclass(frozen=True)
class NodeShape:
    channels: int
    stride: int


def infer_shapes(config: GraphConfig) -> list[NodeShape]:
    """Check DAG structure and channel arithmetic; return per-node (channels, stride)."""
    shapes: list[NodeShape] = []
    detect_nodes = [i for i, n in enumerate(config.nodes) if n.kind == "detect"]
    if len(detect_nodes) != 1 or detect_nodes[0] != len(config.nodes) - 1:
        raise GraphBuildError("graph must end with exactly one detect node")
    if config.resolution <= 0 or config.resolution % 32:
        raise GraphBuildError(f"resolution {config.resolution} must be a positive multiple of 32")
    if config.num_classes < 1:
        raise GraphBuildError("num_classes must be >= 1")
    for i, node in enumerate(config.nodes):
        where = f"node {i} ({node.kind}, line {node.line})" if node.line else f"node {i} ({node.kind})"
        for ref in node.inputs:
            if ref >= i or ref < -1:
                raise GraphBuildError(f"{where}: dangling reference to node {ref}")
        ins = [NodeShape(3, 1) if r == -1 else shapes[r] for r in node.inputs]
        if node.kind not in ("concat", "detect") and len(ins) != 1:
            raise GraphBuildError(f"{where}: expects exactly one input, got {len(ins)}")
        first = ins[0]
        kind = node.kind
        if kind == "conv":
            if node.out_channels is None or node.out_channels < 1:
                raise GraphBuildError(f"{where}: conv needs c=<out>")
            shapes.append(NodeShape(node.out_channels, first.stride * node.stride))
        elif kind in ("c3k2", "sppf"):
            if node.out_channels is None or node.out_channels < 1:
                raise GraphBuildError(f"{where}: needs c=<out>")
            if kind == "c3k2" and node.repeat < 0:
                raise GraphBuildError(f"{where}: repeat must be >= 0")
            shapes.append(NodeShape(node.out_channels, first.stride))
        elif kind in ("c2psa", "spab", "simam"):
            if node.out_channels is not None and node.out_channels != first.channels:
                raise GraphBuildError(
                    f"{where}: channel mismatch, declared c={node.out_channels} but input has {first.channels}"
                )
            shapes.append(NodeShape(first.channels, first.stride))
        elif kind == "upsample":
            if first.stride % node.stride:
                raise GraphBuildError(f"{where}: cannot upsample stride {first.stride} by {node.stride}")
            shapes.append(NodeShape(first.channels, first.stride // node.stride))
        elif kind == "concat":
            if len(ins) < 2:
                raise GraphBuildError(f"{where}: concat needs at least two inputs")
            if len({s.stride for s in ins}) != 1:
                raise GraphBuildError(f"{where}: concat inputs have different strides {[s.stride for s in ins]}")
            total = sum(s.channels for s in ins)
            if node.out_channels is not None and node.out_channels != total:
                raise GraphBuildError(f"{where}: channel mismatch, declared c={node.out_channels}, inputs sum to {total}")
            shapes.append(NodeShape(total, first.stride))
        elif kind == "detect":
            if len(ins) != 3:
                raise GraphBuildError(f"{where}: exactly three nodes must feed detect, got {len(ins)}")
            strides = tuple(s.stride for s in ins)
            if strides != Detect.strides:
                raise GraphBuildError(f"{where}: wrong stride chain {strides}, expected {Detect.strides}")
            shapes.append(NodeShape(0, 0))
    return shapes


def insertion_points(config: GraphConfig) -> list[int]:
    return [i for i, n in enumerate(config.nodes) if n.kind != "detect"]


def _check_attention(config: GraphConfig) -> None:
    valid = set(insertion_points(config))
    for label, indices in (("SPAB", config.spab_indices), ("SimAM", config.simam_indices)):
        bad = sorted(i for i in indices if i not in valid)
        if bad:
            raise AttentionIndexError(
                f"{label} index {bad[0]} is not an insertion point (valid: 0..{max(valid)})"
            )


# ---------------------------------------------------------------------------
# Model


class Model(Module):
    """An executable detector graph.

    ``forward`` returns the three raw prediction maps; ``run`` also
    returns every node's output (after attention) for inspection.
    """

    def __init__(self, config: GraphConfig, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.shapes = infer_shapes(config)
        _check_attention(config)
        layers: list[Module] = []
        spab: list[Module | None] = []
        simam: list[Module | None] = []
        for i, node in enumerate(config.nodes):
            cin = [3 if r == -1 else self.shapes[r].channels for r in node.inputs]
            layers.append(_build_block(node, cin, self.shapes[i], config, rng))
            spab.append(SpabLayer(self.shapes[i].channels, 3, rng=rng) if i in config.spab_indices else None)
            simam.append(
                SimAM(config.simam_lambda, config.simam_mode) if i in config.simam_indices else None
            )
        self.layers = layers
        self.spab = spab
        self.simam = simam
        self.head.init_biases(config.resolution)

    @property
    def head(self) -> Detect:
        return self.layers[-1]  # type: ignore[return-value]

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def reg_max(self) -> int:
        return self.config.reg_max

    def run(self, x: Tensor) -> tuple[list[Tensor | None], list[Tensor]]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise GraphBuildError(f"model input must be (N, 3, H, W), got {x.shape}")
        outputs: list[Tensor | None] = []
        preds: list[Tensor] = []
        for i, (node, layer) in enumerate(zip(self.config.nodes, self.layers)):
            ins = [x if r == -1 else outputs[r] for r in node.inputs]
            if node.kind == "detect":
                preds = layer(ins)
                outputs.append(None)
                continue
            y = layer(ins) if node.kind == "concat" else layer(ins[0])
            if self.spab[i] is not None:
                y = self.spab[i](y)
            if self.simam[i] is not None:
                y = self.simam[i](y)
            outputs.append(y)
        return outputs, preds

    def forward(self, x: Tensor) -> list[Tensor]:
        return self.run(x)[1]


def _build_block(node: LayerNode, cin: list[int], shape: NodeShape, config: GraphConfig, rng) -> Module:
    kind = node.kind
    if kind == "conv":
        return ConvBNAct(cin[0], node.out_channels, node.kernel, node.stride, rng=rng)
    if kind == "c3k2":
        return C3K2(cin[0], node.out_channels, node.repeat, node.expansion, rng=rng)
    if kind == "sppf":
        return SPPF(cin[0], node.out_channels, node.kernel, rng=rng)
    if kind == "c2psa":
        try:
            return C2PSA(cin[0], node.repeat, node.expansion, node.heads, rng=rng)
        except ValueError as exc:
            raise GraphBuildError(f"node c2psa (line {node.line}): {exc}") from None
    if kind == "spab":
        return SpabLayer(cin[0], node.kernel if node.kernel > 1 else 3, rng=rng)
    if kind == "simam":
        return SimAM(config.simam_lambda, config.simam_mode)
    if kind == "upsample":
        return Upsample(node.stride)
    if kind == "concat":
        return Concat()
    if kind == "detect":
        return Detect(cin, config.num_classes, config.reg_max, rng=rng)
    raise GraphBuildError(f"unknown kind {kind}")


def build_graph(config: GraphConfig, seed: int | None = None, rng: np.random.Generator | None = None) -> Model:
    """Validate ``config`` and instantiate its model.

    Weights come from ``rng`` if given, else from the ``init`` stream of
    ``seed`` (see :mod:`ecoweednet.rng`).
    """
    if rng is None:
        from .rng import stream

        rng = stream(0 if seed is None else seed, "init")
    return Model(config, rng)


# ---------------------------------------------------------------------------
# Accounting


@dataclass
class LayerCost:
    index: int
    label: str
    kind: str
    inputs: tuple[int, ...]
    out_shape: tuple[int, ...]
    params: int
    macs: int


@dataclass
class AccountingReport:
    rows: list[LayerCost]
    resolution: int
    convention: str = GFLOPS_CONVENTION
    total_params: int = 0
    total_macs: int = 0

    def __post_init__(self):
        self.total_params = sum(r.params for r in self.rows)
        self.total_macs = sum(r.macs for r in self.rows)

    @property
    def gflops(self) -> float:
        return 2.0 * self.total_macs / 1e9

    def per_layer_params(self) -> dict[str, int]:
        return {r.label: r.params for r in self.rows}

    def format_table(self) -> str:
        head = f"{'layer':>8}  {'from':>10}  {'kind':<8}  {'output':>16}  {'params':>10}  {'GFLOPs':>8}"
        lines = [f"# {self.convention}", f"# resolution {self.resolution}x{self.resolution}", head]
        for r in self.rows:
            frm = ",".join("in" if i < 0 else str(i) for i in r.inputs) if r.inputs else "-"
            shp = "x".join(str(v) for v in r.out_shape) if r.out_shape else "-"
            lines.append(
                f"{r.label:>8}  {frm:>10}  {r.kind:<8}  {shp:>16}  {r.params:>10d}  {2 * r.macs / 1e9:>8.3f}"
            )
        lines.append(
            f"{'total':>8}  {'':>10}  {'':<8}  {'':>16}  {self.total_params:>10d}  {self.gflops:>8.3f}"
        )
        return "\n".join(lines)


def count_params(model: Model) -> dict[str, int]:
    """Learnable parameters per layer label (``"3"``, ``"3+spab"``...)."""
    out: dict[str, int] = {}
    for i, layer in enumerate(model.layers):
        out[str(i)] = layer.num_params()
        if model.spab[i] is not None:
            out[f"{i}+spab"] = model.spab[i].num_params()
        if model.simam[i] is not None:
            out[f"{i}+simam"] = model.simam[i].num_params()
    return out


def count_macs(model: Model, resolution: int | None = None) -> dict[str, tuple[int, tuple[int, ...]]]:
    """Analytic MACs per layer label for one ``resolution``-square image."""
    res = resolution or model.config.resolution
    shapes: list[tuple[int, int, int] | None] = []
    out: dict[str, tuple[int, tuple[int, ...]]] = {}
    for i, (node, layer) in enumerate(zip(model.config.nodes, model.layers)):
        ins = [(3, res, res) if r == -1 else shapes[r] for r in node.inputs]
        if node.kind == "detect":
            macs, outs = layer.macs_multi(ins)
            out[str(i)] = (macs, tuple(tuple(o) for o in outs))
            shapes.append(None)
            continue
        if node.kind == "concat":
            macs, shape = layer.macs_multi(ins)
        else:
            macs, shape = layer.macs(ins[0])
        out[str(i)] = (macs, tuple(shape))
        for tag, mod in (("spab", model.spab[i]), ("simam", model.simam[i])):
            if mod is not None:
                m, shape = mod.macs(shape)
                out[f"{i}+{tag}"] = (m, tuple(shape))
        shapes.append(tuple(shape))
    return out


def account(model: Model, resolution: int | None = None) -> AccountingReport:
    res = resolution or model.config.resolution
    params = count_params(model)
    macs = count_macs(model, res)
    rows = []
    for label, p in params.items():
        base = int(label.split("+")[0])
        node = model.config.nodes[base]
        kind = label.split("+")[1] if "+" in label else node.kind
        m, shape = macs[label]
        if node.kind == "detect":
            shape = ()
        rows.append(LayerCost(base, label, kind, tuple(node.inputs) if "+" not in label else (base,), shape, p, m))
    return AccountingReport(rows=rows, resolution=res)


@dataclass
class GridRow:
    spab: frozenset[int]
    simam: frozenset[int]
    config: GraphConfig | None = None
    report: AccountingReport | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def ablation_grid(base: GraphConfig, rows: Sequence[tuple[Iterable[int], Iterable[int]]]) -> list[GridRow]:
    """Account every (spab, simam) row against ``base``; bad rows keep their error."""
    out = []
    for spab, simam in rows:
        spab, simam = frozenset(spab), frozenset(simam)
        cfg = base.with_attention(spab, simam)
        try:
            model = build_graph(cfg, seed=0)
            out.append(GridRow(spab, simam, cfg, account(model)))
        except GraphBuildError as exc:
            out.append(GridRow(spab, simam, cfg, None, str(exc)))
    return out


def parse_grid(text: str) -> list[tuple[frozenset[int], frozenset[int]]]:
    """Grid file: one ``spab=<ids> simam=<ids>`` row per line (``-`` for none)."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        fields = {}
        for token in body.split():
            if "=" not in token:
                raise ConfigError(f"expected key=value, got {token!r}", lineno, raw.index(token) + 1)
            key, value = token.split("=", 1)
            if key not in ("spab", "simam"):
                raise ConfigError(f"unknown grid field {key!r}", lineno, raw.index(token) + 1)
            fields[key] = _parse_ids(value, lineno, raw.index(token) + len(key) + 2)
        rows.append((fields.get("spab", frozenset()), fields.get("simam", frozenset())))
    return rows


def format_grid(rows: Sequence[GridRow], baseline: AccountingReport | None = None) -> str:
    """Machine-readable grid: one whitespace-separated ``key=value`` record per row."""

    def ids(s):
        return ",".join(str(i) for i in sorted(s)) if s else "-"

    lines = [f"# {GFLOPS_CONVENTION}"]
    if baseline is not None:
        lines.append(f"baseline params={baseline.total_params} gflops={baseline.gflops:.4f}")
    for row in rows:
        rec = f"spab={ids(row.spab)} simam={ids(row.simam)}"
        if row.ok:
            rep = row.report
            rec += f" status=ok params={rep.total_params} gflops={rep.gflops:.4f}"
            if baseline is not None:
                rec += (
                    f" dparams={rep.total_params - baseline.total_params}"
                    f" dgflops={rep.gflops - baseline.gflops:.4f}"
                )
        else:
            rec += f" status=error error={row.error!r}"
        lines.append(rec)
    return "\n".join(lines) + "\n"


def clone_config(config: GraphConfig) -> GraphConfig:
    return copy.deepcopy(config)
