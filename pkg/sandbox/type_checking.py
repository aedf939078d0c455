"""Type-checking assertions for django_region_captioning.

This file is analyzed by mypy (via ``mypy sandbox/``) but never imported at
runtime.  It verifies that our generic type annotations actually work:

* **Positive cases**: valid code that must type-check without errors.
* **Negative cases**: invalid code with ``# type: ignore[error-code]``.
  If a ``type: ignore`` becomes unused (the error disappears), mypy's
  ``warn_unused_ignores`` setting will flag the regression.
"""

from collections.abc import Sequence

import numpy as np

from django_region_captioning.autodiff import Tape, Tensor, backward
from django_region_captioning.registry import Attrs, FloatArray, PrimitiveRegistry, Saved, primitive

# ---------------------------------------------------------------------------
# Positive: valid usage (must type-check cleanly)
# ---------------------------------------------------------------------------

_registry = PrimitiveRegistry()


@primitive(name="square", arity=1, registry=_registry)
class Square:
    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        return inputs[0] * inputs[0], {}

    def backward(
        self,
        grad: FloatArray,
        inputs: Sequence[FloatArray],
        output: FloatArray,
        saved: Saved,
        attrs: Attrs,
    ) -> Sequence[FloatArray | None]:
        return [2.0 * inputs[0] * grad]


# The decorator hands back the class itself
square: Square = Square()

x = Tensor(np.ones(3), requires_grad=True)
with Tape() as tape:
    y = (x * x + 1.0).sum()
grads: dict[Tensor, FloatArray] = backward(tape, y)
value: float = y.item()
shape: tuple[int, ...] = (x @ x).shape
transposed: Tensor = Tensor(np.ones((2, 3))).T

# ---------------------------------------------------------------------------
# Negative: wrong types (each MUST trigger the marked mypy error)
# ---------------------------------------------------------------------------

# name is keyword-only and must be a str
primitive(name=1, arity=1)  # type: ignore[arg-type]

# arity must be an int or None
primitive(name="bad", arity="one")  # type: ignore[arg-type]

# backward needs a Tape, not a Tensor
backward(x, y)  # type: ignore[arg-type]

# item() returns float, not str
label: str = y.item()  # type: ignore[assignment]
