"""Parameter-free attention: SimAM and SPAB.

SimAM scores every neuron ``t`` of a channel by the minimum of the energy

    e_t(w, b) = 1/(M-1) * sum_i (-1 - (w x_i + b))^2 + (1 - (w t + b))^2 + lam * w^2

over a per-neuron linear map, where ``x_i`` are the other ``M - 1`` neurons
of the channel. The minimum has the closed form

    e*_t = 4 (var_t + lam) / ((t - mu_t)^2 + 2 var_t + 2 lam)

reached at ``w_t = 2 (t - mu_t) / ((t - mu_t)^2 + 2 var_t + 2 lam)`` and
``b_t = -(t + mu_t) w_t / 2``. The slope ``w_t`` carries the sign of the
deviation ``t - mu_t``; flipping it raises the energy. ``e*_t`` itself is
even in ``t - mu_t``. The refined map is ``x * sigmoid(1 / e*)``.

SPAB stacks three channel-preserving convolutions into ``H``, builds an
attention map ``V = sigmoid(H) - 1/2`` and returns ``(x + H) * V``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import DimensionError
from .module import Module, uniform_init
from .tensor import Tensor

DEFAULT_LAMBDA = 1e-4


@dataclass(frozen=True)
class SimAMConfig:
    lam: float = DEFAULT_LAMBDA
    moments_mode: str = "leave-one-out"

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"SimAM lambda must be > 0, got {self.lam}")
        if self.moments_mode not in ("leave-one-out", "whole-channel"):
            raise ValueError(f"unknown moments mode {self.moments_mode!r}")


@dataclass
class SimAMStats:
    mu_t: np.ndarray
    sigma2_t: np.ndarray
    e_star: np.ndarray
    importance: np.ndarray


def energy(w, b, t, surround, lam: float):
    """Evaluate the SimAM energy for explicit ``(w, b)``.

    ``surround`` holds the ``M - 1`` other neurons of the channel.
    """
    surround = np.asarray(surround, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    others = np.mean((-1.0 - (w[..., None] * surround + b[..., None])) ** 2, axis=-1)
    return others + (1.0 - (w * t + b)) ** 2 + lam * w * w


def simam_energy(t, mu_t, sigma2_t, lam: float = DEFAULT_LAMBDA):
    """Closed-form minimal energy ``e*_t`` (vectorised)."""
    t, mu_t, sigma2_t = np.asarray(t), np.asarray(mu_t), np.asarray(sigma2_t)
    d = t - mu_t
    return 4.0 * (sigma2_t + lam) / (d * d + 2.0 * sigma2_t + 2.0 * lam)


def simam_optimal_params(t, mu_t, sigma2_t, lam: float = DEFAULT_LAMBDA):
    """The minimising ``(w_t, b_t)`` of the SimAM energy."""
    d = np.asarray(t) - np.asarray(mu_t)
    w = 2.0 * d / (d * d + 2.0 * np.asarray(sigma2_t) + 2.0 * lam)
    b = -0.5 * (np.asarray(t) + np.asarray(mu_t)) * w
    return w, b


def simam_stats(x: Tensor | np.ndarray, cfg: SimAMConfig = SimAMConfig()) -> SimAMStats:
    x = x if isinstance(x, Tensor) else Tensor(x)
    mu, var = ops.channel_moments(x.detach(), cfg.moments_mode)
    mu_t = np.broadcast_to(mu.data, x.shape)
    var_t = np.broadcast_to(var.data, x.shape)
    e = simam_energy(x.data, mu_t, var_t, cfg.lam)
    return SimAMStats(mu_t=mu_t, sigma2_t=var_t, e_star=e, importance=1.0 / e)


def simam_refine(x: Tensor, cfg: SimAMConfig = SimAMConfig()) -> Tensor:
    """``x * sigmoid(1/e*)`` with per-neuron minimal energies; differentiable."""
    mu, var = ops.channel_moments(x, cfg.moments_mode)
    d = x - mu
    s = var + cfg.lam
    importance = (d * d + s * 2.0) / (s * 4.0)
    return x * ops.sigmoid(importance)


class SimAM(Module):
    """Plug-in SimAM layer. Holds no learnable parameters."""

    def __init__(self, lam: float = DEFAULT_LAMBDA, moments_mode: str = "leave-one-out"):
        super().__init__()
        self.cfg = SimAMConfig(lam, moments_mode)

    def forward(self, x: Tensor) -> Tensor:
        return simam_refine(x, self.cfg)

    def macs(self, shape):
        # statistics are elementwise work, excluded from the MAC convention
        return 0, shape


_ODD_ACTIVATIONS = ("symmetric_sigmoid",)


class SpabLayer(Module):
    """Three bias-free, channel-preserving ``k x k`` convolutions with a
    residual-gated output."""

    def __init__(
        self,
        channels: int,
        kernel: int = 3,
        inner: str = "silu",
        attention: str = "symmetric_sigmoid",
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        if attention not in _ODD_ACTIVATIONS:
            raise ValueError(f"SPAB attention activation must be odd, got {attention!r}")
        if kernel % 2 == 0:
            raise ValueError("SPAB kernel must be odd to preserve spatial size")
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.kernel = kernel
        self.inner = inner
        self.attention = attention
        fan_in = channels * kernel * kernel
        shape = (channels, channels, kernel, kernel)
        self.w1 = uniform_init(rng, shape, fan_in)
        self.w2 = uniform_init(rng, shape, fan_in)
        self.w3 = uniform_init(rng, shape, fan_in)

    def forward(self, x: Tensor) -> Tensor:
        return spab_forward(x, self)

    def macs(self, shape):
        c, h, w = shape
        return 3 * c * c * self.kernel * self.kernel * h * w, shape


def spab_forward(o_prev: Tensor, layer: SpabLayer) -> Tensor:
    if o_prev.ndim != 4 or o_prev.shape[1] != layer.channels:
        raise DimensionError(
            f"SPAB expects {layer.channels} channels, got shape {o_prev.shape}", axis="channels"
        )
    pad = layer.kernel // 2
    h = ops.activation(ops.conv2d(o_prev, layer.w1, padding=pad), layer.inner)
    h = ops.activation(ops.conv2d(h, layer.w2, padding=pad), layer.inner)
    h = ops.conv2d(h, layer.w3, padding=pad)
    v = ops.activation(h, layer.attention)
    u = ops.elementwise(o_prev, h, "add")
    return ops.elementwise(u, v, "mul")


def set_identity_kernels(layer: SpabLayer) -> None:
    """Overwrite the three kernels with centre-tap identities (testing aid)."""
    c, k = layer.channels, layer.kernel
    eye = np.zeros((c, c, k, k), dtype=layer.w1.dtype)
    eye[np.arange(c), np.arange(c), k // 2, k // 2] = 1.0
    for p in (layer.w1, layer.w2, layer.w3):
        p.data[...] = eye


__all__ = [
    "DEFAULT_LAMBDA", "SimAMConfig", "SimAMStats", "SimAM", "SpabLayer",
    "energy", "simam_energy", "simam_optimal_params", "simam_stats",
    "simam_refine", "spab_forward", "set_identity_kernels",
]
