from __future__ import annotations

from dataclasses import fields, replace
from typing import Self

import numpy as np

from django_region_captioning.autodiff import Tensor


class ParameterGroup:
    """Mixin for dataclasses whose fields are learnable tensors or nested groups.

    Parameter names are dotted field paths, e.g. ``convs.conv1_w``.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for f in fields(self):  # type: ignore[arg-type]
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                named[f"{prefix}{f.name}"] = value
            elif isinstance(value, ParameterGroup):
                named.update(value.named_parameters(prefix=f"{prefix}{f.name}."))
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def copy(self) -> Self:
        """Deep copy: fresh tensors with copied data and zeroed gradients."""
        changes: dict[str, object] = {}
        for f in fields(self):  # type: ignore[arg-type]
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                changes[f.name] = Tensor(value.data, requires_grad=value.requires_grad, name=value.name)
            elif isinstance(value, ParameterGroup):
                changes[f.name] = value.copy()
        return replace(self, **changes)  # type: ignore[type-var]


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    """Uniform in ``[-a, a]`` with ``a = sqrt(6 / (fan_in + fan_out))``."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def conv_kernel(rng: np.random.Generator, size: int, in_channels: int, out_channels: int) -> Tensor:
    return glorot_uniform(
        rng,
        (size, size, in_channels, out_channels),
        fan_in=size * size * in_channels,
        fan_out=size * size * out_channels,
    )


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)
