"""Dense tensors and a reverse-mode gradient tape.

Rank-4 tensors in NCHW layout are the feature maps that flow through the
detector graph. Every differentiable operation in :mod:`ecoweednet.ops`
records itself on the innermost active :class:`GradTape`; the tape then
walks its records in reverse execution order (which is a reverse
topological order) and accumulates gradients by summing the contributions
of every consumer.

Single precision is the runtime default. Wrap a block in
``with default_dtype(np.float64):`` to build double precision values for
verification.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import UnknownValueError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_state = threading.local()


def _get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def get_default_dtype() -> np.dtype:
    return _get_default_dtype()


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype.kind != "f":
        raise TypeError(f"default dtype must be floating point, got {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (thread-local)."""
    previous = _get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def _tape_stack() -> list["GradTape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


class Tensor:
    """An n-dimensional array that can take part in gradient computation.

    Feature maps are rank-4 ``(batch, channels, height, width)``. The
    array is treated as immutable once wrapped; only the optimizer writes
    into parameter storage, and it does so outside any tape.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.name = name

    # -- basic introspection -------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar (implemented in ops) ---------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


class Parameter(Tensor):
    """A learnable tensor (always tracked)."""

    __slots__ = ()

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """Wrap constants; python scalars adopt ``like``'s dtype."""
    if isinstance(value, Tensor):
        return value
    if like is not None and not (isinstance(value, np.ndarray) and value.dtype.kind == "f"):
        return Tensor(np.asarray(value, dtype=like.dtype))
    if like is not None and isinstance(value, np.ndarray) and value.dtype != like.dtype:
        return Tensor(value.astype(like.dtype))
    return Tensor(value)


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap an op result and log it on every active tape.

    ``backward`` maps the output gradient to one gradient (or ``None``)
    per input, already reduced to that input's shape.
    """
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        for tape in _tape_stack():
            tape._records.append((out, tuple(inputs), backward))
            tape._produced.add(id(out))
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Gradients:
    """Read-only mapping from tracked tensors to their gradients."""

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        try:
            return self._grads[id(tensor)]
        except KeyError:
            raise UnknownValueError(f"no gradient recorded for {tensor!r}") from None

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def items(self) -> Iterator[tuple[Tensor, np.ndarray]]:
        for key, grad in self._grads.items():
            yield self._tensors[key], grad


class GradTape:
    """Records executed operations for one backward pass.

    Usage::

        with GradTape() as tape:
            loss = model_loss(params)
        g_w, g_b = tape.gradient(loss, [w, b])

    A tape belongs to the thread that entered it.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        elif self in stack:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def _check_target(self, target: Tensor) -> None:
        if not isinstance(target, Tensor):
            raise TypeError("gradient target must be a Tensor")
        if id(target) not in self._produced:
            raise UnknownValueError("target value was not produced on this tape")

    def _run(self, target: Tensor, keep: set[int] | None) -> tuple[dict[int, np.ndarray], dict[int, Tensor]]:
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        seen: dict[int, Tensor] = {id(target): target}
        for out, inputs, backward in reversed(self._records):
            key = id(out)
            g = grads.get(key)
            if g is None:
                continue
            if keep is not None and key not in keep:
                del grads[key]
            input_grads = backward(g)
            for tensor, gi in zip(inputs, input_grads):
                if gi is None or not tensor.requires_grad:
                    continue
                k = id(tensor)
                if gi.dtype != tensor.dtype:
                    gi = gi.astype(tensor.dtype)
                prev = grads.get(k)
                grads[k] = gi if prev is None else prev + gi
                seen[k] = tensor
        return grads, seen

    def gradient(self, target: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``target`` with respect to each source.

        Sources that do not influence the target get zero gradients.
        """
        sources = list(sources)
        self._check_target(target)
        if target.size != 1:
            raise ValueError(f"gradient target must be a scalar, got shape {target.shape}")
        grads, _ = self._run(target, {id(s) for s in sources})
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]

    def backward(self, loss: Tensor) -> Gradients:
        """Gradients of ``loss`` for every tracked value on the tape."""
        self._check_target(loss)
        if loss.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        grads, seen = self._run(loss, None)
        return Gradients(grads, seen)


def backward(tape: GradTape, loss: Tensor) -> Gradients:
    return tape.backward(loss)
