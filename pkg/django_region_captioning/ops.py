"""Functional front-end over :func:`~django_region_captioning.autodiff.apply_primitive`."""

from __future__ import annotations

from collections.abc import Sequence
from typing import Any

import numpy as np
import numpy.typing as npt

from django_region_captioning.autodiff import Tensor, apply_primitive


def constant(value: npt.ArrayLike) -> Tensor:
    return Tensor(value)


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def div(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("div", [a, b])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def tanh(x: Tensor) -> Tensor:
    return apply_primitive("tanh", [x])


def exp(x: Tensor) -> Tensor:
    return apply_primitive("exp", [x])


def log(x: Tensor) -> Tensor:
    return apply_primitive("log", [x])


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", [x])


def softmax(x: Tensor, axis: int | None = None) -> Tensor:
    """Softmax over all entries jointly (``axis=None``) or along ``axis``."""
    return apply_primitive("softmax", [x], {"axis": axis})


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    return apply_primitive("sum", [x], {"axis": axis})


def max(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    return apply_primitive("max", [x], {"axis": axis})


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", list(tensors), {"axis": axis})


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return apply_primitive("stack", list(tensors))


def gather(x: Tensor, indices: Sequence[int] | npt.NDArray[np.intp]) -> Tensor:
    """Select rows of ``x`` (embedding lookup)."""
    return apply_primitive("gather", [x], {"indices": np.asarray(indices, dtype=np.intp)})


def slice(x: Tensor, index: Any) -> Tensor:  # noqa: A001
    return apply_primitive("slice", [x], {"index": index})


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", [x], {"shape": tuple(shape)})


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return apply_primitive("transpose", [x], {"axes": None if axes is None else tuple(axes)})


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, *, stride: int = 1, padding: int = 0) -> Tensor:
    out = apply_primitive("conv2d", [x, kernel], {"stride": stride, "padding": padding})
    return out if bias is None else add(out, bias)


def max_pool_region(x: Tensor, box: tuple[int, int, int, int]) -> Tensor:
    """Channelwise max over feature cells ``[r0:r1, c0:c1]``."""
    return apply_primitive("max_pool_region", [x], {"box": box})


def bilinear_sample(feature_map: Tensor, points: Tensor) -> Tensor:
    """Sample an H×W×C map at k×2 (row, col) points with border clamping."""
    return apply_primitive("bilinear_sample", [feature_map, points])


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``weight @ x + bias`` for a vector ``x``."""
    out = matmul(weight, x)
    return out if bias is None else add(out, bias)
