from __future__ import annotations

from dataclasses import dataclass, field
from enum import StrEnum
import logging

import numpy as np

from django_region_captioning.attention import AttentionParams, Feedback, GruParams, init_state
from django_region_captioning.autodiff import Tensor
from django_region_captioning.conf import get_region_provider
from django_region_captioning.encoder import ConvStackParams, EncoderOutput, EncoderParams, encode
from django_region_captioning.parameters import ParameterGroup
from django_region_captioning.regions import ProposalBox, RegionContext, RegionSet, StnParams
from django_region_captioning.rng import INIT, substream

logger = logging.getLogger(__name__)


class RegionKind(StrEnum):
    GRID = "grid"
    PROPOSALS = "proposals"
    STN = "stn"


class Ablation(StrEnum):
    """Which interaction terms of the joint score are trained.

    Omitted terms are zero-initialised and never updated.
    """

    WH = "wh"
    WH_WR = "wh+wr"
    WH_WR_RH = "wh+wr+rh"
    FULL = "full"

    @property
    def frozen(self) -> frozenset[str]:
        return _FROZEN[self]

    @property
    def default_feedback(self) -> Feedback:
        return Feedback.MARGINAL if self is Ablation.FULL else Feedback.NONE


_FROZEN: dict[Ablation, frozenset[str]] = {
    Ablation.WH: frozenset({"attention.theta_wr", "attention.theta_rh", "attention.theta_r"}),
    Ablation.WH_WR: frozenset({"attention.theta_rh"}),
    Ablation.WH_WR_RH: frozenset(),
    Ablation.FULL: frozenset(),
}


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    word_dim: int = 32
    hidden_dim: int = 32
    channels: int = 32
    image_dim: int = 64
    image_size: int = 64

    def __post_init__(self) -> None:
        for name in ("vocab_size", "word_dim", "hidden_dim", "channels", "image_dim", "image_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must include the STOP and OOV tokens")


@dataclass
class CaptionModel(ParameterGroup):
    """Encoder, region provider parameters, attention and GRU, plus the run-time choices that shape them."""

    dims: ModelDims
    encoder: EncoderParams
    attention: AttentionParams
    gru: GruParams
    region_kind: RegionKind = RegionKind.GRID
    feedback: Feedback = Feedback.MARGINAL
    ablation: Ablation = Ablation.FULL
    stn: StnParams | None = None
    hires_encoder: ConvStackParams | None = None
    grid_stride: int = 1
    proposal_k: int = 50
    frozen: frozenset[str] = field(default_factory=frozenset)

    @classmethod
    def initialize(
        cls,
        dims: ModelDims,
        *,
        seed: int,
        region_kind: RegionKind = RegionKind.GRID,
        feedback: Feedback | None = None,
        ablation: Ablation = Ablation.FULL,
        grid_stride: int = 1,
        proposal_k: int = 50,
    ) -> CaptionModel:
        rng = substream(seed, INIT)
        feedback = ablation.default_feedback if feedback is None else feedback
        if ablation is Ablation.WH and feedback is not Feedback.NONE:
            raise ValueError("the wh baseline has no region terms and takes no visual feedback")
        input_dim = dims.word_dim + (0 if feedback is Feedback.NONE else dims.channels)
        model = cls(
            dims=dims,
            encoder=EncoderParams.initialize(
                rng, image_size=dims.image_size, channels=dims.channels, phi_dim=dims.image_dim
            ),
            attention=AttentionParams.initialize(
                rng,
                vocab_size=dims.vocab_size,
                word_dim=dims.word_dim,
                hidden_dim=dims.hidden_dim,
                region_dim=dims.channels,
                image_dim=dims.image_dim,
            ),
            gru=GruParams.initialize(rng, input_dim=input_dim, hidden_dim=dims.hidden_dim),
            region_kind=RegionKind(region_kind),
            feedback=feedback,
            ablation=ablation,
            stn=StnParams.initialize(rng, dims.channels) if region_kind == RegionKind.STN else None,
            hires_encoder=(
                ConvStackParams.initialize(rng, dims.channels) if region_kind == RegionKind.PROPOSALS else None
            ),
            grid_stride=grid_stride,
            proposal_k=proposal_k,
            frozen=ablation.frozen,
        )
        model.zero_frozen()
        return model

    def zero_frozen(self) -> None:
        named = self.named_parameters()
        for name in self.frozen:
            named[name].data[...] = 0.0

    def trainable_parameters(self, *, include_encoder: bool = True) -> dict[str, Tensor]:
        return {
            name: tensor
            for name, tensor in self.named_parameters().items()
            if name not in self.frozen
            and (include_encoder or not (name.startswith("encoder.") or name.startswith("hires_encoder.")))
        }

    @property
    def uses_hires(self) -> bool:
        return get_region_provider(self.region_kind).uses_hires

    def encode(self, image: Tensor, hires_image: Tensor | None = None) -> EncoderOutput:
        if self.uses_hires and hires_image is None:
            raise ValueError("this model's region provider needs a high-resolution render")
        return encode(image, self.encoder, hires_image=hires_image, hires_params=self.hires_encoder)

    def regions(
        self,
        encoded: EncoderOutput,
        *,
        proposals: tuple[ProposalBox, ...] | list[ProposalBox] = (),
        rng: np.random.Generator | None = None,
        stride: int | None = None,
        proposal_k: int | None = None,
    ) -> RegionSet:
        context = RegionContext(
            image_size=self.dims.image_size,
            stride=self.grid_stride if stride is None else stride,
            proposals=tuple(proposals),
            proposal_k=self.proposal_k if proposal_k is None else proposal_k,
            rng=rng,
        )
        return get_region_provider(self.region_kind).build(encoded, self.stn, context)

    def initial_state(self, encoded: EncoderOutput) -> Tensor:
        return init_state(encoded.phi, self.attention.theta_hi)

    def describe(self) -> dict[str, object]:
        return {
            "region_kind": str(self.region_kind),
            "feedback": str(self.feedback),
            "ablation": str(self.ablation),
            "grid_stride": self.grid_stride,
            "proposal_k": self.proposal_k,
            "parameters": int(sum(t.data.size for t in self.parameters())),
        }
