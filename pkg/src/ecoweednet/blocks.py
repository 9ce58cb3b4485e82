"""Detector building blocks: Conv-BN-SiLU, C3K2, SPPF, C2PSA and the Detect head.

The internal layout of C3K2 and C2PSA is pinned here (the published
architecture only names them):

* ``C3K2``: 1x1 projection to ``hidden`` channels, split into a passthrough
  part of ``hidden - hidden // 2`` channels and a bottleneck path of
  ``hidden // 2`` channels that runs through ``repeat`` residual
  bottlenecks (two 3x3 Conv-BN-SiLU each); concatenate and fuse with a
  1x1 Conv-BN-SiLU.
* ``C2PSA``: 1x1 projection to ``2 * hidden``, equal split, one half through
  ``repeat`` PSA units (multi-head spatial self-attention, then a
  position-wise feed-forward, each with a residual), concat and 1x1 fuse.

Every block reports analytic MACs for a ``(C, H, W)`` input through
``macs()``. Batch-norm, activations, pooling and residual additions are
not counted.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import ops
from .errors import DimensionError
from .module import Module, constant, uniform_init
from .tensor import Tensor, get_default_dtype

BN_EPS = 1e-3
BN_MOMENTUM = 0.03
DFL_BINS = 16


def _out_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


class Conv2d(Module):
    """Plain convolution with bias (used for the prediction layers)."""

    def __init__(self, cin: int, cout: int, k: int = 1, s: int = 1, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout, self.k, self.s = cin, cout, k, s
        self.weight = uniform_init(rng, (cout, cin, k, k), cin * k * k)
        self.bias = uniform_init(rng, (cout,), cin * k * k)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.s, padding=self.k // 2)

    def macs(self, shape):
        _, h, w = shape
        p = self.k // 2
        ho, wo = _out_size(h, self.k, self.s, p), _out_size(w, self.k, self.s, p)
        return self.cout * self.cin * self.k * self.k * ho * wo, (self.cout, ho, wo)


class ConvBNAct(Module):
    """Bias-free convolution, batch norm, then SiLU (or identity)."""

    def __init__(self, cin: int, cout: int, k: int = 1, s: int = 1, groups: int = 1, act: bool = True, rng=None):
        super().__init__()
        if cin % groups or cout % groups:
            raise DimensionError(f"groups={groups} must divide {cin} and {cout}", axis="channels")
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout, self.k, self.s, self.groups, self.act = cin, cout, k, s, groups, act
        fan_in = (cin // groups) * k * k
        self.weight = uniform_init(rng, (cout, cin // groups, k, k), fan_in)
        self.gamma = constant((cout,), 1.0)
        self.beta = constant((cout,), 0.0)
        dtype = get_default_dtype()
        self.buffers["running_mean"] = np.zeros(cout, dtype=dtype)
        self.buffers["running_var"] = np.ones(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise DimensionError(f"expected {self.cin} input channels, got {x.shape[1]}", axis="channels")
        y = ops.conv2d(x, self.weight, stride=self.s, padding=self.k // 2, groups=self.groups)
        y = ops.batch_norm(
            y, self.gamma, self.beta,
            self.buffers["running_mean"], self.buffers["running_var"],
            training=self.training, momentum=BN_MOMENTUM, eps=BN_EPS,
        )
        return ops.silu(y) if self.act else y

    def macs(self, shape):
        _, h, w = shape
        p = self.k // 2
        ho, wo = _out_size(h, self.k, self.s, p), _out_size(w, self.k, self.s, p)
        return self.cout * (self.cin // self.groups) * self.k * self.k * ho * wo, (self.cout, ho, wo)


def conv_bn_act(x: Tensor, block: ConvBNAct) -> Tensor:
    return block(x)


class Bottleneck(Module):
    def __init__(self, c: int, shortcut: bool = True, rng=None):
        super().__init__()
        self.cv1 = ConvBNAct(c, c, 3, rng=rng)
        self.cv2 = ConvBNAct(c, c, 3, rng=rng)
        self.shortcut = shortcut

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv2(self.cv1(x))
        return x + y if self.shortcut else y

    def macs(self, shape):
        m1, s1 = self.cv1.macs(shape)
        m2, s2 = self.cv2.macs(s1)
        return m1 + m2, s2


class C3K2(Module):
    """CSP split block: projection, partial bottleneck path, concat, fuse."""

    def __init__(self, cin: int, cout: int, repeat: int = 1, e: float = 0.5, rng=None):
        super().__init__()
        hidden = max(2, int(cout * e))
        self.cin, self.cout, self.repeat, self.hidden = cin, cout, repeat, hidden
        self.path = hidden // 2
        self.keep = hidden - self.path
        self.cv1 = ConvBNAct(cin, hidden, 1, rng=rng)
        self.m = [Bottleneck(self.path, rng=rng) for _ in range(repeat)]
        self.cv2 = ConvBNAct(hidden, cout, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv1(x)
        a = y[:, : self.keep]
        b = y[:, self.keep:]
        for unit in self.m:
            b = unit(b)
        return self.cv2(ops.concat_channels([a, b]))

    def macs(self, shape):
        total, s = self.cv1.macs(shape)
        inner = (self.path, s[1], s[2])
        for unit in self.m:
            m, inner = unit.macs(inner)
            total += m
        m, s = self.cv2.macs((self.hidden, s[1], s[2]))
        return total + m, s


def c3k2(x: Tensor, block: C3K2) -> Tensor:
    return block(x)


class SPPF(Module):
    """1x1 reduce, three chained 5x5 stride-1 max-pools, concat of four maps, 1x1 fuse."""

    def __init__(self, cin: int, cout: int, k: int = 5, rng=None):
        super().__init__()
        hidden = max(1, cin // 2)
        self.cin, self.cout, self.k, self.hidden = cin, cout, k, hidden
        self.cv1 = ConvBNAct(cin, hidden, 1, rng=rng)
        self.cv2 = ConvBNAct(4 * hidden, cout, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = [self.cv1(x)]
        for _ in range(3):
            y.append(ops.maxpool2d(y[-1], self.k, stride=1, padding=self.k // 2))
        return self.cv2(ops.concat_channels(y))

    def macs(self, shape):
        m1, s = self.cv1.macs(shape)
        m2, s = self.cv2.macs((4 * self.hidden, s[1], s[2]))
        return m1 + m2, s


def sppf(x: Tensor, block: SPPF) -> Tensor:
    return block(x)


def spatial_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over positions.

    ``q``, ``k``, ``v`` are ``(N, heads, d, L)``; position ``i`` of the
    result is ``sum_j softmax_j(q_i . k_j / sqrt(d)) v_j``.
    """
    d = q.shape[2]
    scores = ops.matmul(ops.transpose(q, (0, 1, 3, 2)), k) * (1.0 / math.sqrt(d))
    weights = ops.softmax(scores, axis=-1)
    return ops.matmul(v, ops.transpose(weights, (0, 1, 3, 2)))


class PSABlock(Module):
    def __init__(self, c: int, heads: int = 1, rng=None):
        super().__init__()
        if heads < 1 or c % heads:
            raise DimensionError(f"{c} channels not divisible by {heads} heads", axis="channels")
        self.c, self.heads = c, heads
        self.qkv = ConvBNAct(c, 3 * c, 1, act=False, rng=rng)
        self.proj = ConvBNAct(c, c, 1, act=False, rng=rng)
        self.ffn1 = ConvBNAct(c, 2 * c, 1, rng=rng)
        self.ffn2 = ConvBNAct(2 * c, c, 1, act=False, rng=rng)

    def attention(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        d = c // self.heads
        qkv = ops.reshape(self.qkv(x), (n, self.heads, 3 * d, h * w))
        q, k, v = qkv[:, :, :d], qkv[:, :, d:2 * d], qkv[:, :, 2 * d:]
        out = spatial_attention(q, k, v)
        return self.proj(ops.reshape(out, (n, c, h, w)))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attention(x)
        return x + self.ffn2(self.ffn1(x))

    def macs(self, shape):
        c, h, w = shape
        L = h * w
        total = self.qkv.macs(shape)[0] + self.proj.macs(shape)[0]
        total += 2 * c * L * L  # scores and weighted values
        m1, s1 = self.ffn1.macs(shape)
        total += m1 + self.ffn2.macs(s1)[0]
        return total, shape


class C2PSA(Module):
    def __init__(self, c: int, repeat: int = 1, e: float = 0.5, heads: int | None = None, rng=None):
        super().__init__()
        hidden = max(1, int(c * e))
        if heads is None:
            heads = max(1, hidden // 64)
        if hidden % heads:
            raise DimensionError(f"{hidden} channels not divisible by {heads} heads", axis="channels")
        self.cin = self.cout = c
        self.hidden, self.repeat, self.heads = hidden, repeat, heads
        self.cv1 = ConvBNAct(c, 2 * hidden, 1, rng=rng)
        self.m = [PSABlock(hidden, heads, rng=rng) for _ in range(repeat)]
        self.cv2 = ConvBNAct(2 * hidden, c, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv1(x)
        a, b = y[:, : self.hidden], y[:, self.hidden:]
        for unit in self.m:
            b = unit(b)
        return self.cv2(ops.concat_channels([a, b]))

    def macs(self, shape):
        total, s = self.cv1.macs(shape)
        inner = (self.hidden, s[1], s[2])
        for unit in self.m:
            total += unit.macs(inner)[0]
        m, s = self.cv2.macs(s)
        return total + m, s


def c2psa(x: Tensor, block: C2PSA) -> Tensor:
    return block(x)


class Upsample(Module):
    def __init__(self, factor: int = 2):
        super().__init__()
        self.factor = factor

    def forward(self, x: Tensor) -> Tensor:
        return ops.upsample_nearest(x, self.factor)

    def macs(self, shape):
        c, h, w = shape
        return 0, (c, h * self.factor, w * self.factor)


class Concat(Module):
    def forward(self, xs: Sequence[Tensor]) -> Tensor:
        return ops.concat_channels(xs)

    def macs_multi(self, shapes):
        c = sum(s[0] for s in shapes)
        return 0, (c, shapes[0][1], shapes[0][2])


class DetectLevel(Module):
    """Box and class branches for one pyramid level."""

    def __init__(self, cin: int, box_width: int, cls_width: int, nc: int, reg_max: int, rng=None):
        super().__init__()
        self.box = [
            ConvBNAct(cin, box_width, 3, rng=rng),
            ConvBNAct(box_width, box_width, 3, rng=rng),
        ]
        self.box_pred = Conv2d(box_width, 4 * reg_max, 1, rng=rng)
        self.cls = [
            ConvBNAct(cin, cin, 3, groups=cin, rng=rng),
            ConvBNAct(cin, cls_width, 1, rng=rng),
            ConvBNAct(cls_width, cls_width, 3, groups=cls_width, rng=rng),
            ConvBNAct(cls_width, cls_width, 1, rng=rng),
        ]
        self.cls_pred = Conv2d(cls_width, nc, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        b = x
        for layer in self.box:
            b = layer(b)
        c = x
        for layer in self.cls:
            c = layer(c)
        return ops.concat_channels([self.box_pred(b), self.cls_pred(c)])

    def macs(self, shape):
        total = 0
        s = shape
        for layer in self.box + [self.box_pred]:
            m, s = layer.macs(s)
            total += m
        out_hw = s[1:]
        s = shape
        for layer in self.cls + [self.cls_pred]:
            m, s = layer.macs(s)
            total += m
        return total, (self.box_pred.cout + self.cls_pred.cout, *out_hw)


class Detect(Module):
    """Anchor-free three-scale head.

    Each level emits ``4 * reg_max`` distance-distribution logits (left,
    top, right, bottom) followed by ``nc`` class logits per grid cell.
    """

    strides = (8, 16, 32)

    def __init__(self, channels: Sequence[int], nc: int, reg_max: int = DFL_BINS, rng=None):
        super().__init__()
        if len(channels) != 3:
            raise DimensionError(f"Detect needs three inputs, got {len(channels)}", axis="inputs")
        self.nc, self.reg_max = nc, reg_max
        self.channels = tuple(channels)
        box_width = max(16, channels[0] // 4, 4 * reg_max)
        cls_width = max(channels[0], min(nc, 100))
        self.box_width, self.cls_width = box_width, cls_width
        self.levels = [DetectLevel(c, box_width, cls_width, nc, reg_max, rng=rng) for c in channels]

    def init_biases(self, image_size: int) -> None:
        """Prior-probability bias init so early class scores start near background."""
        for level, stride in zip(self.levels, self.strides):
            level.box_pred.bias.data[...] = 1.0
            cells = (image_size / stride) ** 2
            level.cls_pred.bias.data[...] = math.log(5.0 / self.nc / cells)

    def forward(self, xs: Sequence[Tensor]) -> list[Tensor]:
        return detect_head(xs, self)

    def macs_multi(self, shapes):
        total = 0
        outs = []
        for level, s in zip(self.levels, shapes):
            m, o = level.macs(s)
            total += m
            outs.append(o)
        return total, outs


def detect_head(maps: Sequence[Tensor], head: Detect, image_size: int | None = None) -> list[Tensor]:
    """Raw per-scale predictions ``(N, 4R + nc, H, W)``.

    When ``image_size`` is given the level sizes are checked against the
    stride chain 8/16/32.
    """
    if len(maps) != 3:
        raise DimensionError(f"Detect needs three feature maps, got {len(maps)}", axis="inputs")
    if image_size is not None:
        for m, stride in zip(maps, head.strides):
            if m.shape[2] * stride != image_size or m.shape[3] * stride != image_size:
                raise DimensionError(
                    f"level of size {m.shape[2]}x{m.shape[3]} does not match stride {stride} "
                    f"for a {image_size}px input", axis="height",
                )
    return [level(m) for level, m in zip(head.levels, maps)]
