from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np
import numpy.typing as npt

FloatArray = npt.NDArray[np.float64]
Attrs = Mapping[str, Any]
Saved = dict[str, Any]


class PrimitiveOp(Protocol):
    """Structural type for a differentiable primitive.

    ``forward`` maps raw input arrays (plus static attributes) to the output
    array and whatever it wants to keep for the backward pass. ``backward``
    receives the upstream gradient and returns one gradient per input, or
    ``None`` for inputs that are not differentiable (e.g. integer indices).
    """

    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]: ...

    def backward(
        self,
        grad: FloatArray,
        inputs: Sequence[FloatArray],
        output: FloatArray,
        saved: Saved,
        attrs: Attrs,
    ) -> Sequence[FloatArray | None]: ...


@dataclass(frozen=True)
class PrimitiveEntry:
    """An immutable record describing a single registered primitive.

    Attributes:
        name: The primitive id used by :func:`~django_region_captioning.autodiff.apply_primitive`.
        op: The object implementing ``forward`` / ``backward``.
        arity: Number of tensor inputs, or ``None`` for variadic primitives
            such as ``concat``.
    """

    name: str
    op: PrimitiveOp
    arity: int | None


class PrimitiveRegistry:
    """Registry of differentiable primitives, keyed by primitive id."""

    def __init__(self) -> None:
        self._entries: dict[str, PrimitiveEntry] = {}

    def register(self, op: PrimitiveOp, *, name: str, arity: int | None) -> None:
        """Register a primitive under ``name``.

        Raises:
            ValueError: If the name is empty, already registered, or the arity is not positive.
        """
        if not name:
            raise ValueError("Primitive name must be a non-empty string")
        if name in self._entries:
            raise ValueError(f"Primitive '{name}' is already registered")
        if arity is not None and arity <= 0:
            raise ValueError(f"Primitive arity must be positive, got {arity}")
        self._entries[name] = PrimitiveEntry(name=name, op=op, arity=arity)

    def get(self, name: str) -> PrimitiveEntry:
        """Look up a primitive by id.

        Raises:
            ValueError: If no primitive with that id exists.
        """
        try:
            return self._entries[name]
        except KeyError:
            raise ValueError(f"Unknown primitive: {name}") from None

    def get_entries(self) -> dict[str, PrimitiveEntry]:
        """Return a copy of all registered primitives, keyed by name."""
        return dict(self._entries)


primitive_registry = PrimitiveRegistry()


def primitive[T: PrimitiveOp](
    *,
    name: str,
    arity: int | None,
    registry: PrimitiveRegistry | None = None,
) -> Callable[[type[T]], type[T]]:
    """Class decorator that instantiates a primitive and registers it.

    ::

        @primitive(name="tanh", arity=1)
        class Tanh:
            def forward(self, inputs, attrs): ...
            def backward(self, grad, inputs, output, saved, attrs): ...

    Args:
        name: Unique primitive id.
        arity: Number of tensor inputs (``None`` for variadic).
        registry: An alternate ``PrimitiveRegistry`` (defaults to the global
            ``primitive_registry``).
    """
    target_registry = registry or primitive_registry

    def decorator(cls: type[T]) -> type[T]:
        target_registry.register(cls(), name=name, arity=arity)
        return cls

    return decorator
