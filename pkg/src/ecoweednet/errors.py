"""Exception types shared across the package."""

from __future__ import annotations


class EcoWeedError(Exception):
    """Base class for all package errors."""


class DimensionError(EcoWeedError, ValueError):
    """Raised when operand shapes are incompatible.

    ``axis`` names the offending axis (``"channels"``, ``"height"``, ...).
    """

    def __init__(self, message: str, axis: str | None = None):
        if axis is not None:
            message = f"{message} [axis: {axis}]"
        super().__init__(message)
        self.axis = axis


class DegenerateChannelError(EcoWeedError, ValueError):
    """Leave-one-out statistics need at least two neurons per channel."""


class UnknownValueError(EcoWeedError, KeyError):
    """A gradient was requested for a value that was not recorded on the tape."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ConfigError(EcoWeedError, ValueError):
    """Malformed graph config text, with a 1-based line/column location."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        loc = ""
        if line is not None:
            loc = f"line {line}"
            if column is not None:
                loc += f", column {column}"
            loc += ": "
        super().__init__(loc + message)


class GraphBuildError(EcoWeedError, ValueError):
    """The graph config is well-formed text but does not describe a valid model."""


class AttentionIndexError(GraphBuildError, IndexError):
    """An attention insertion index does not name a valid insertion point."""


class TargetError(EcoWeedError, ValueError):
    """Ground-truth boxes outside the normalized image frame."""

    def __init__(self, message: str, diagnostics: list[str] | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class CheckpointError(EcoWeedError, ValueError):
    """Unreadable or inconsistent checkpoint file."""


class UnsupportedLayerError(EcoWeedError, ValueError):
    """Saliency was requested for a layer that has no spatial feature map."""
