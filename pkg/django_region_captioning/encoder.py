"""Small convolutional image encoder: global code φ(I) and spatial map γ(I)."""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from django_region_captioning import ops
from django_region_captioning.autodiff import ShapeError, Tensor
from django_region_captioning.parameters import ParameterGroup, conv_kernel, glorot_uniform, zeros

KERNEL_SIZE = 5
STRIDE = 2
PADDING = 2
HIDDEN_CHANNELS = (16, 32)
DOWNSAMPLING = STRIDE**3


@dataclass
class ConvStackParams(ParameterGroup):
    """Three 5×5 stride-2 convolutions (3 → 16 → 32 → c), relu after each."""

    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    conv3_w: Tensor
    conv3_b: Tensor

    @classmethod
    def initialize(cls, rng: np.random.Generator, channels: int = 32) -> ConvStackParams:
        c1, c2 = HIDDEN_CHANNELS
        return cls(
            conv1_w=conv_kernel(rng, KERNEL_SIZE, 3, c1),
            conv1_b=zeros(c1),
            conv2_w=conv_kernel(rng, KERNEL_SIZE, c1, c2),
            conv2_b=zeros(c2),
            conv3_w=conv_kernel(rng, KERNEL_SIZE, c2, channels),
            conv3_b=zeros(channels),
        )

    @property
    def channels(self) -> int:
        return self.conv3_w.shape[3]


@dataclass
class EncoderParams(ParameterGroup):
    """Conv stack plus a fully connected map from the flattened last conv to φ(I)."""

    convs: ConvStackParams
    fc_w: Tensor
    fc_b: Tensor
    image_size: int

    @classmethod
    def initialize(
        cls,
        rng: np.random.Generator,
        *,
        image_size: int = 64,
        channels: int = 32,
        phi_dim: int = 64,
    ) -> EncoderParams:
        if image_size % DOWNSAMPLING:
            raise ValueError(f"image_size must be a multiple of {DOWNSAMPLING}, got {image_size}")
        grid = image_size // DOWNSAMPLING
        flat = grid * grid * channels
        return cls(
            convs=ConvStackParams.initialize(rng, channels),
            fc_w=glorot_uniform(rng, (phi_dim, flat), fan_in=flat, fan_out=phi_dim),
            fc_b=zeros(phi_dim),
            image_size=image_size,
        )

    @property
    def phi_dim(self) -> int:
        return self.fc_w.shape[0]

    @property
    def grid_size(self) -> int:
        return self.image_size // DOWNSAMPLING


@dataclass(frozen=True)
class EncoderOutput:
    phi: Tensor
    gamma: Tensor
    gamma_hires: Tensor | None = None


def conv_stack(image: Tensor, params: ConvStackParams) -> Tensor:
    x = image
    for weight, bias in (
        (params.conv1_w, params.conv1_b),
        (params.conv2_w, params.conv2_b),
        (params.conv3_w, params.conv3_b),
    ):
        x = ops.relu(ops.conv2d(x, weight, bias, stride=STRIDE, padding=PADDING))
    return x


def _check_image(image: Tensor, size: int, label: str) -> None:
    if image.shape != (size, size, 3):
        raise ShapeError(f"{label} must have shape ({size}, {size}, 3), got {image.shape}")
    if float(image.data.min()) < 0.0 or float(image.data.max()) > 1.0:
        raise ValueError(f"{label} values must lie in [0, 1]")


def encode(
    image: Tensor,
    params: EncoderParams,
    *,
    hires_image: Tensor | None = None,
    hires_params: ConvStackParams | None = None,
) -> EncoderOutput:
    """Run the encoder on an S×S×3 image with values in [0, 1].

    When both ``hires_image`` (2S×2S×3) and ``hires_params`` are given, the
    separate high-resolution stack also runs and fills ``gamma_hires``.

    Raises:
        ShapeError: If an image has the wrong shape.
    """
    _check_image(image, params.image_size, "image")
    gamma = conv_stack(image, params.convs)
    phi = ops.linear(ops.reshape(gamma, (-1,)), params.fc_w, params.fc_b)
    gamma_hires = None
    if hires_image is not None and hires_params is not None:
        _check_image(hires_image, 2 * params.image_size, "hires_image")
        gamma_hires = conv_stack(hires_image, hires_params)
    return EncoderOutput(phi=phi, gamma=gamma, gamma_hires=gamma_hires)


def subsample_grid(gamma: Tensor, stride: int) -> Tensor:
    """Keep cells ``0, stride, 2·stride, …`` along both spatial axes.

    Raises:
        ValueError: If ``stride`` is not positive or exceeds the map height.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if stride > gamma.shape[0]:
        raise ValueError(f"stride {stride} exceeds feature map height {gamma.shape[0]}")
    if stride == 1:
        return gamma
    return ops.slice(gamma, (slice(None, None, stride), slice(None, None, stride)))


def subsampled_extent(extent: int, stride: int) -> int:
    return math.ceil(extent / stride)
