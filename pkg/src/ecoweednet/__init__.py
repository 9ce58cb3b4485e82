"""Lightweight single-stage weed detector with parameter-free attention.

Everything runs on NumPy: a small reverse-mode autodiff core, detector
blocks, a text graph format with parameter/GFLOPs accounting, training,
evaluation and GradCAM++ saliency.
"""

__version__ = "0.1.0"

from .tensor import GradTape, Parameter, Tensor, default_dtype  # noqa: E402
from .attention import SimAM, SimAMConfig, SpabLayer, simam_refine, spab_forward  # noqa: E402
from .graph import GraphConfig, Model, account, build_graph, parse_config, reference_config  # noqa: E402
from .detection import DetectionBox, iou, nms  # noqa: E402

__all__ = [
    "__version__", "Tensor", "Parameter", "GradTape", "default_dtype",
    "SimAM", "SimAMConfig", "SpabLayer", "simam_refine", "spab_forward",
    "GraphConfig", "Model", "account", "build_graph", "parse_config", "reference_config",
    "DetectionBox", "iou", "nms",
]
