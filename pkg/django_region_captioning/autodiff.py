"""Define-by-run reverse-mode automatic differentiation over dense ``float64`` tensors.

A :class:`Tape` is opened around a forward pass; every primitive applied to a
tensor that requires a gradient is appended to it. :func:`backward` replays the
tape in reverse to produce gradients for the leaves::

    with Tape() as tape:
        loss = (x * x).sum()
    backward(tape, loss)
"""

from __future__ import annotations

from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any
import logging
import math
import threading

import numpy as np
import numpy.typing as npt

from django_region_captioning import primitives as _primitives  # noqa: F401  registers the primitive set
from django_region_captioning.primitives import ShapeError
from django_region_captioning.registry import Attrs, FloatArray, Saved, primitive_registry

logger = logging.getLogger(__name__)

__all__ = [
    "FloatArray",
    "GradCheckResult",
    "ShapeError",
    "Tape",
    "TapeNode",
    "Tensor",
    "apply_primitive",
    "backward",
    "grad_check",
    "no_tape",
]


class Tensor:
    """An n-dimensional array of 64-bit reals with an optional gradient slot.

    Leaves created with ``requires_grad=True`` carry a zero-initialised
    ``grad`` of the same shape; :func:`backward` adds into it.
    """

    __slots__ = ("data", "grad", "name", "requires_grad")

    def __init__(self, data: npt.ArrayLike, *, requires_grad: bool = False, name: str | None = None) -> None:
        array = np.array(data, dtype=np.float64, order="C")
        if any(extent <= 0 for extent in array.shape):
            raise ShapeError(f"Tensor extents must be positive, got shape {array.shape}")
        self.data: FloatArray = array
        self.requires_grad = requires_grad
        self.grad: FloatArray | None = np.zeros_like(array) if requires_grad else None
        self.name = name

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> FloatArray:
        """Return a copy of the underlying array."""
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # Operator sugar; every path goes through apply_primitive.

    def __add__(self, other: Tensor | float) -> Tensor:
        return apply_primitive("add", [self, _as_tensor(other)])

    def __sub__(self, other: Tensor | float) -> Tensor:
        return apply_primitive("sub", [self, _as_tensor(other)])

    def __mul__(self, other: Tensor | float) -> Tensor:
        return apply_primitive("mul", [self, _as_tensor(other)])

    def __truediv__(self, other: Tensor | float) -> Tensor:
        return apply_primitive("div", [self, _as_tensor(other)])

    def __matmul__(self, other: Tensor) -> Tensor:
        return apply_primitive("matmul", [self, other])

    def __neg__(self) -> Tensor:
        return apply_primitive("mul", [self, Tensor(-1.0)])

    def __getitem__(self, index: Any) -> Tensor:
        return apply_primitive("slice", [self], {"index": index})

    @property
    def T(self) -> Tensor:  # noqa: N802
        return apply_primitive("transpose", [self])

    def sum(self, axis: int | None = None) -> Tensor:
        return apply_primitive("sum", [self], {"axis": axis})

    def reshape(self, *shape: int) -> Tensor:
        return apply_primitive("reshape", [self], {"shape": shape})


def _as_tensor(value: Tensor | float) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass(frozen=True)
class TapeNode:
    """One recorded primitive application."""

    primitive: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: Attrs
    saved: Saved


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Nodes are appended as they execute, so every node's inputs precede it.
    A tape becomes the active recording target for the current thread while
    used as a context manager.
    """

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("Tape contexts must be exited in reverse order of entry")
        stack.pop()

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)


_local = threading.local()


def _stack() -> list[Tape | None]:
    stack: list[Tape | None] | None = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def current_tape() -> Tape | None:
    """Return the innermost active tape for this thread, if any."""
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording for the enclosed block (inference, finite differences)."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def apply_primitive(op: str, inputs: Sequence[Tensor], attrs: Attrs | None = None) -> Tensor:
    """Apply the primitive ``op`` to ``inputs`` and record it on the active tape.

    Raises:
        ValueError: If ``op`` is not a registered primitive.
        ShapeError: If the inputs do not conform to the primitive's arity or shape rule.
    """
    entry = primitive_registry.get(op)
    if entry.arity is not None and len(inputs) != entry.arity:
        raise ShapeError(f"{op}: expected {entry.arity} input(s), got {len(inputs)}")
    if entry.arity is None and not inputs:
        raise ShapeError(f"{op}: expected at least one input")
    resolved_attrs: Attrs = dict(attrs or {})
    data, saved = entry.op.forward([t.data for t in inputs], resolved_attrs)
    requires_grad = any(t.requires_grad for t in inputs)
    output = Tensor.__new__(Tensor)
    output.data = np.ascontiguousarray(data, dtype=np.float64)
    output.requires_grad = requires_grad
    output.grad = None
    output.name = None
    tape = current_tape()
    if requires_grad and tape is not None:
        tape.record(TapeNode(primitive=op, inputs=tuple(inputs), output=output, attrs=resolved_attrs, saved=saved))
    return output


def backward(tape: Tape, loss: Tensor, *, accumulate: bool = True) -> dict[Tensor, FloatArray]:
    """Propagate ``d loss`` back through ``tape``.

    Returns a map from every ``requires_grad`` leaf reachable from ``loss`` to
    its gradient. With ``accumulate=True`` (the default) each gradient is also
    added into the leaf's ``grad``; ``accumulate=False`` leaves the tensors
    untouched so independent passes can be reduced by the caller.

    Raises:
        ShapeError: If ``loss`` is not a scalar.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")

    produced = {id(node.output) for node in tape.nodes}
    grads: dict[int, FloatArray] = {id(loss): np.ones(())}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss

    for node in reversed(tape.nodes):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        entry = primitive_registry.get(node.primitive)
        input_grads = entry.op.backward(upstream, [t.data for t in node.inputs], node.output.data, node.saved, node.attrs)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            existing = grads.get(key)
            grads[key] = grad if existing is None else existing + grad
            if key not in produced:
                leaves[key] = tensor

    result: dict[Tensor, FloatArray] = {}
    for key, tensor in leaves.items():
        grad = grads[key]
        result[tensor] = grad
        if accumulate:
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
            tensor.grad += grad
    return result


@dataclass(frozen=True)
class GradCheckResult:
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    *,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckResult:
    """Compare analytic gradients of scalar ``f(*inputs)`` to central differences.

    The error for one coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``; the result holds
    the maximum over every coordinate of every input.

    Raises:
        ValueError: If ``eps`` is outside ``[1e-7, 1e-3]`` or ``f`` is not finite.
        ShapeError: If ``f`` is not scalar-valued.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for tensor in inputs:
        tensor.requires_grad = True

    with Tape() as tape:
        value = f(*inputs)
    _require_finite_scalar(value)
    analytic = backward(tape, value, accumulate=False)

    def evaluate() -> float:
        with no_tape():
            out = f(*inputs)
        _require_finite_scalar(out)
        return float(out.data)

    max_error = 0.0
    for tensor in inputs:
        grad = analytic.get(tensor, np.zeros_like(tensor.data)).reshape(-1)
        flat = tensor.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = evaluate()
            flat[i] = original - eps
            minus = evaluate()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            error = abs(grad[i] - numeric) / max(1.0, abs(grad[i]), abs(numeric))
            max_error = max(max_error, error)
    logger.debug("grad_check over %d input(s): max relative error %.3e", len(inputs), max_error)
    return GradCheckResult(max_error=max_error, tolerance=tol)


def _require_finite_scalar(value: Tensor) -> None:
    if value.data.ndim != 0:
        raise ShapeError(f"grad_check requires a scalar function, got shape {value.shape}")
    if not math.isfinite(float(value.data)):
        raise ValueError(f"grad_check: forward value is not finite ({float(value.data)})")
