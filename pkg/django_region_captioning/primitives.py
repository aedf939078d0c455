"""Forward and backward rules for every differentiable primitive.

Primitives operate on raw ``float64`` arrays; :mod:`django_region_captioning.autodiff`
wraps them in :class:`~django_region_captioning.autodiff.Tensor` objects and
records them on the active tape. Importing this module registers the full set.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from django_region_captioning.registry import Attrs, FloatArray, Saved, primitive


class ShapeError(ValueError):
    """Raised when primitive inputs do not conform to the primitive's shape rule."""


def _check_trailing(name: str, a: FloatArray, b: FloatArray) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim :] == b.shape:
        return
    raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast (only trailing bias broadcasting is supported)")


def _reduce_to(grad: FloatArray, shape: tuple[int, ...]) -> FloatArray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.reshape((-1, *shape)).sum(axis=0))


def _elementwise_inputs(name: str, inputs: Sequence[FloatArray]) -> tuple[FloatArray, FloatArray]:
    a, b = inputs
    _check_trailing(name, a, b)
    return a, b


@primitive(name="add", arity=2)
class Add:
    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        a, b = _elementwise_inputs("add", inputs)
        return a + b, {}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        return grad, _reduce_to(grad, inputs[1].shape)


@primitive(name="sub", arity=2)
class Sub:
    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        a, b = _elementwise_inputs("sub", inputs)
        return a - b, {}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        return grad, -_reduce_to(grad, inputs[1].shape)


@primitive(name="mul", arity=2)
class Mul:
    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        a, b = _elementwise_inputs("mul", inputs)
        return a * b, {}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        a, b = inputs
        return grad * b, _reduce_to(grad * a, b.shape)


@primitive(name="div", arity=2)
class Div:
    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        a, b = _elementwise_inputs("div", inputs)
        return a / b, {}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        a, b = inputs
        return grad / b, _reduce_to(-grad * a / (b * b), b.shape)


@primitive(name="matmul", arity=2)
class MatMul:
    """Matrix product of 1-D/2-D operands with ``numpy.matmul`` semantics."""

    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        a, b = inputs
        if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return np.asarray(np.matmul(a, b)), {}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        a, b = inputs
        a2 = a if a.ndim == 2 else a[np.newaxis, :]
        b2 = b if b.ndim == 2 else b[:, np.newaxis]
        g2 = grad.reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)


@primitive(name="sigmoid", arity=1)
class Sigmoid:
    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        # tanh form: stable for large |x| and exactly 0.5 at 0
        return 0.5 * (1.0 + np.tanh(0.5 * inputs[0])), {}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        return (grad * output * (1.0 - output),)


@primitive(name="tanh", arity=1)
class Tanh:
    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        return np.tanh(inputs[0]), {}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        return (grad * (1.0 - output * output),)


@primitive(name="exp", arity=1)
class Exp:
    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        return np.exp(inputs[0]), {}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        return (grad * output,)


@primitive(name="log", arity=1)
class Log:
    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        return np.log(inputs[0]), {}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        return (grad / inputs[0],)


@primitive(name="relu", arity=1)
class Relu:
    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        return np.maximum(inputs[0], 0.0), {}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        return (grad * (inputs[0] > 0.0),)


@primitive(name="softmax", arity=1)
class Softmax:
    """Softmax over all entries (``axis=None``) or along one axis."""

    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        x = inputs[0]
        axis = attrs.get("axis")
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=axis, keepdims=True), {}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        axis = attrs.get("axis")
        inner = np.sum(grad * output, axis=axis, keepdims=True)
        return (output * (grad - inner),)


@primitive(name="sum", arity=1)
class Sum:
    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        return np.asarray(np.sum(inputs[0], axis=attrs.get("axis"))), {}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        x = inputs[0]
        axis = attrs.get("axis")
        expanded = grad if axis is None else np.expand_dims(grad, axis)
        return (np.broadcast_to(expanded, x.shape).copy(),)


@primitive(name="max", arity=1)
class Max:
    """Maximum over all entries or one axis; ties resolve to the lowest index."""

    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        x = inputs[0]
        axis = attrs.get("axis")
        if axis is None:
            flat_index = int(np.argmax(x))
            return np.asarray(x.reshape(-1)[flat_index]), {"argmax": flat_index}
        argmax = np.argmax(x, axis=axis)
        return np.take_along_axis(x, np.expand_dims(argmax, axis), axis=axis).squeeze(axis), {"argmax": argmax}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        x = inputs[0]
        axis = attrs.get("axis")
        gx = np.zeros_like(x)
        if axis is None:
            gx.reshape(-1)[saved["argmax"]] = grad
        else:
            np.put_along_axis(gx, np.expand_dims(saved["argmax"], axis), np.expand_dims(grad, axis), axis=axis)
        return (gx,)


@primitive(name="concat", arity=None)
class Concat:
    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        axis = attrs.get("axis", 0)
        try:
            return np.concatenate(inputs, axis=axis), {}
        except ValueError as e:
            raise ShapeError(f"concat: cannot join shapes {[x.shape for x in inputs]} on axis {axis}") from e

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        axis = attrs.get("axis", 0)
        bounds = np.cumsum([x.shape[axis] for x in inputs])[:-1]
        return list(np.split(grad, bounds, axis=axis))


@primitive(name="stack", arity=None)
class Stack:
    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        shapes = {x.shape for x in inputs}
        if len(shapes) != 1:
            raise ShapeError(f"stack: inputs must share one shape, got {sorted(shapes)}")
        return np.stack(inputs, axis=0), {}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        return [grad[i] for i in range(len(inputs))]


@primitive(name="gather", arity=1)
class Gather:
    """Row lookup along axis 0 (embedding lookup); repeated indices accumulate."""

    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        x = inputs[0]
        indices = np.asarray(attrs["indices"], dtype=np.intp)
        if indices.size and (indices.min() < -x.shape[0] or indices.max() >= x.shape[0]):
            raise ShapeError(f"gather: indices out of range for shape {x.shape}")
        return x[indices], {}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        gx = np.zeros_like(inputs[0])
        np.add.at(gx, np.asarray(attrs["indices"], dtype=np.intp), grad)
        return (gx,)


@primitive(name="slice", arity=1)
class Slice:
    """Basic (non-fancy) numpy indexing: ints, slices and strides."""

    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        try:
            return np.array(inputs[0][attrs["index"]]), {}
        except IndexError as e:
            raise ShapeError(f"slice: index {attrs['index']!r} invalid for shape {inputs[0].shape}") from e

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        gx = np.zeros_like(inputs[0])
        gx[attrs["index"]] += grad
        return (gx,)


@primitive(name="reshape", arity=1)
class Reshape:
    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        try:
            return inputs[0].reshape(attrs["shape"]).copy(), {}
        except ValueError as e:
            raise ShapeError(f"reshape: cannot reshape {inputs[0].shape} to {attrs['shape']}") from e

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        return (grad.reshape(inputs[0].shape),)


@primitive(name="transpose", arity=1)
class Transpose:
    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        x = inputs[0]
        axes = attrs.get("axes")
        if axes is not None and sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
        return np.ascontiguousarray(np.transpose(x, axes)), {}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        axes = attrs.get("axes")
        inverse = None if axes is None else tuple(np.argsort(axes))
        return (np.transpose(grad, inverse),)


def _conv_geometry(x: FloatArray, w: FloatArray, stride: int, padding: int) -> tuple[int, int]:
    if x.ndim != 3 or w.ndim != 4 or x.shape[2] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform (expected H×W×C and kh×kw×C×C')")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride must be >= 1 and padding >= 0, got stride={stride} padding={padding}")
    out_h = (x.shape[0] + 2 * padding - w.shape[0]) // stride + 1
    out_w = (x.shape[1] + 2 * padding - w.shape[1]) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d: kernel {w.shape[:2]} larger than padded input {x.shape[:2]}")
    return out_h, out_w


@primitive(name="conv2d", arity=2)
class Conv2d:
    """2-D cross-correlation of an H×W×C map with a kh×kw×C×C' kernel (zero padding)."""

    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        x, w = inputs
        stride = int(attrs.get("stride", 1))
        padding = int(attrs.get("padding", 0))
        out_h, out_w = _conv_geometry(x, w, stride, padding)
        kh, kw, cin, cout = w.shape
        padded = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
        windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(0, 1))
        windows = windows[: (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
        # (out_h, out_w, C, kh, kw) -> rows ordered (kh, kw, C) to match the kernel layout
        cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 4, 2)).reshape(out_h * out_w, kh * kw * cin)
        out = (cols @ w.reshape(kh * kw * cin, cout)).reshape(out_h, out_w, cout)
        return out, {"cols": cols}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        x, w = inputs
        stride = int(attrs.get("stride", 1))
        padding = int(attrs.get("padding", 0))
        kh, kw, cin, cout = w.shape
        out_h, out_w = grad.shape[:2]
        g2 = grad.reshape(out_h * out_w, cout)
        gw = (saved["cols"].T @ g2).reshape(w.shape)
        gcols = (g2 @ w.reshape(kh * kw * cin, cout).T).reshape(out_h, out_w, kh, kw, cin)
        gpadded = np.zeros((x.shape[0] + 2 * padding, x.shape[1] + 2 * padding, cin))
        for di in range(kh):
            for dj in range(kw):
                gpadded[di : di + (out_h - 1) * stride + 1 : stride, dj : dj + (out_w - 1) * stride + 1 : stride] += gcols[:, :, di, dj]
        gx = gpadded[padding : padding + x.shape[0], padding : padding + x.shape[1]]
        return np.ascontiguousarray(gx), gw


@primitive(name="max_pool_region", arity=1)
class MaxPoolRegion:
    """Channelwise max of an H×W×C map over the cells ``[r0:r1, c0:c1]``."""

    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        x = inputs[0]
        r0, c0, r1, c1 = (int(v) for v in attrs["box"])
        if x.ndim != 3 or not (0 <= r0 < r1 <= x.shape[0] and 0 <= c0 < c1 <= x.shape[1]):
            raise ShapeError(f"max_pool_region: box {(r0, c0, r1, c1)} is empty or outside map of shape {x.shape}")
        region = x[r0:r1, c0:c1].reshape(-1, x.shape[2])
        argmax = np.argmax(region, axis=0)
        return region[argmax, np.arange(x.shape[2])], {"argmax": argmax}

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        x = inputs[0]
        r0, c0, r1, c1 = (int(v) for v in attrs["box"])
        gregion = np.zeros(((r1 - r0) * (c1 - c0), x.shape[2]))
        gregion[saved["argmax"], np.arange(x.shape[2])] = grad
        gx = np.zeros_like(x)
        gx[r0:r1, c0:c1] = gregion.reshape(r1 - r0, c1 - c0, x.shape[2])
        return (gx,)


@primitive(name="bilinear_sample", arity=2)
class BilinearSample:
    """Bilinear interpolation of an H×W×C map at k real (row, col) points.

    Coordinates are clamped to ``[0, H-1] × [0, W-1]`` before interpolation;
    the gradient w.r.t. a clamped coordinate is zero.
    """

    def forward(self, inputs: Sequence[FloatArray], attrs: Attrs) -> tuple[FloatArray, Saved]:
        feature_map, points = inputs
        if feature_map.ndim != 3 or points.ndim != 2 or points.shape[1] != 2:
            raise ShapeError(f"bilinear_sample: expected H×W×C map and k×2 points, got {feature_map.shape} and {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ValueError("bilinear_sample: sample coordinates must be finite")
        height, width = feature_map.shape[:2]
        rows = np.clip(points[:, 0], 0.0, height - 1)
        cols = np.clip(points[:, 1], 0.0, width - 1)
        r0 = np.minimum(np.floor(rows).astype(np.intp), max(height - 2, 0))
        c0 = np.minimum(np.floor(cols).astype(np.intp), max(width - 2, 0))
        r1 = np.minimum(r0 + 1, height - 1)
        c1 = np.minimum(c0 + 1, width - 1)
        fr = (rows - r0)[:, np.newaxis]
        fc = (cols - c0)[:, np.newaxis]
        out = (
            (1.0 - fr) * (1.0 - fc) * feature_map[r0, c0]
            + (1.0 - fr) * fc * feature_map[r0, c1]
            + fr * (1.0 - fc) * feature_map[r1, c0]
            + fr * fc * feature_map[r1, c1]
        )
        saved = {"r0": r0, "c0": c0, "r1": r1, "c1": c1, "fr": fr, "fc": fc}
        return out, saved

    def backward(self, grad: FloatArray, inputs: Sequence[FloatArray], output: FloatArray, saved: Saved, attrs: Attrs) -> Sequence[FloatArray | None]:
        feature_map, points = inputs
        height, width = feature_map.shape[:2]
        r0, c0, r1, c1 = saved["r0"], saved["c0"], saved["r1"], saved["c1"]
        fr, fc = saved["fr"], saved["fc"]

        gmap = np.zeros_like(feature_map)
        np.add.at(gmap, (r0, c0), (1.0 - fr) * (1.0 - fc) * grad)
        np.add.at(gmap, (r0, c1), (1.0 - fr) * fc * grad)
        np.add.at(gmap, (r1, c0), fr * (1.0 - fc) * grad)
        np.add.at(gmap, (r1, c1), fr * fc * grad)

        d_row = (1.0 - fc) * (feature_map[r1, c0] - feature_map[r0, c0]) + fc * (feature_map[r1, c1] - feature_map[r0, c1])
        d_col = (1.0 - fr) * (feature_map[r0, c1] - feature_map[r0, c0]) + fr * (feature_map[r1, c1] - feature_map[r1, c0])
        inside_rows = (points[:, 0] >= 0.0) & (points[:, 0] <= height - 1) & (height > 1)
        inside_cols = (points[:, 1] >= 0.0) & (points[:, 1] <= width - 1) & (width > 1)
        gpoints = np.stack(
            [np.sum(grad * d_row, axis=1) * inside_rows, np.sum(grad * d_col, axis=1) * inside_cols],
            axis=1,
        )
        return gmap, gpoints
