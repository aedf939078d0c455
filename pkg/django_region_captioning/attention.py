"""Joint word–region attention and the recurrent state update.

At every step the RNN state ``h`` scores each (word, region) pair with three
bilinear interactions plus two unary terms::

    S[w, r] = wᵀWθ_wh h + wᵀWθ_wr Rᵀr + rᵀRθ_rh h + wᵀWθ_w + rᵀRθ_r

A single softmax over all pairs gives the joint distribution. Its word
marginal predicts the next token; its region marginal (or the region
distribution conditioned on the emitted word) pools the region descriptors
into a visual feedback vector that joins the word embedding as GRU input.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import StrEnum

import numpy as np

from django_region_captioning import ops
from django_region_captioning.autodiff import ShapeError, Tensor
from django_region_captioning.parameters import ParameterGroup, glorot_uniform, zeros


class Feedback(StrEnum):
    """Which region distribution pools the visual feedback vector."""

    NONE = "none"
    MARGINAL = "marginal"
    CONDITIONAL = "conditional"


@dataclass
class AttentionParams(ParameterGroup):
    word_embeddings: Tensor  # n_w × d_w
    theta_wh: Tensor  # d_w × d_h
    theta_wr: Tensor  # d_w × d_r
    theta_rh: Tensor  # d_r × d_h
    theta_w: Tensor  # d_w
    theta_r: Tensor  # d_r
    theta_hi: Tensor  # d_h × d_I

    @classmethod
    def initialize(
        cls,
        rng: np.random.Generator,
        *,
        vocab_size: int,
        word_dim: int,
        hidden_dim: int,
        region_dim: int,
        image_dim: int,
    ) -> AttentionParams:
        return cls(
            word_embeddings=glorot_uniform(rng, (vocab_size, word_dim), fan_in=vocab_size, fan_out=word_dim),
            theta_wh=glorot_uniform(rng, (word_dim, hidden_dim), fan_in=hidden_dim, fan_out=word_dim),
            theta_wr=glorot_uniform(rng, (word_dim, region_dim), fan_in=region_dim, fan_out=word_dim),
            theta_rh=glorot_uniform(rng, (region_dim, hidden_dim), fan_in=hidden_dim, fan_out=region_dim),
            theta_w=zeros(word_dim),
            theta_r=zeros(region_dim),
            theta_hi=glorot_uniform(rng, (hidden_dim, image_dim), fan_in=image_dim, fan_out=hidden_dim),
        )

    @property
    def vocab_size(self) -> int:
        return self.word_embeddings.shape[0]

    @property
    def word_dim(self) -> int:
        return self.word_embeddings.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.theta_wh.shape[1]

    @property
    def region_dim(self) -> int:
        return self.theta_wr.shape[1]


@dataclass
class GruParams(ParameterGroup):
    """Update gate ``z``, reset gate ``r`` and candidate ``h̃`` weights."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    @classmethod
    def initialize(cls, rng: np.random.Generator, *, input_dim: int, hidden_dim: int) -> GruParams:
        def w() -> Tensor:
            return glorot_uniform(rng, (hidden_dim, input_dim), fan_in=input_dim, fan_out=hidden_dim)

        def u() -> Tensor:
            return glorot_uniform(rng, (hidden_dim, hidden_dim), fan_in=hidden_dim, fan_out=hidden_dim)

        return cls(
            w_z=w(),
            u_z=u(),
            b_z=zeros(hidden_dim),
            w_r=w(),
            u_r=u(),
            b_r=zeros(hidden_dim),
            w_h=w(),
            u_h=u(),
            b_h=zeros(hidden_dim),
        )

    @property
    def input_dim(self) -> int:
        return self.w_z.shape[1]


@dataclass(frozen=True)
class JointDistribution:
    """``p(w, r | h)`` as an n_w × n_r tensor summing to one."""

    probs: Tensor


@dataclass(frozen=True)
class Attention:
    """Everything computed from the state before a word is chosen."""

    joint: JointDistribution
    word_dist: Tensor
    region_dist: Tensor


@dataclass(frozen=True)
class StepResult:
    word_dist: Tensor
    region_dist: Tensor
    pooling_weights: Tensor | None
    h_next: Tensor


def init_state(phi: Tensor, theta_hi: Tensor) -> Tensor:
    return ops.matmul(theta_hi, phi)


def score_joint(h: Tensor, regions: Tensor, params: AttentionParams) -> Tensor:
    """Evaluate the n_w × n_r score matrix.

    Raises:
        ShapeError: If ``h`` or ``regions`` do not conform to ``params``.
    """
    if h.shape != (params.hidden_dim,):
        raise ShapeError(f"state must have shape ({params.hidden_dim},), got {h.shape}")
    if regions.ndim != 2 or regions.shape[1] != params.region_dim:
        raise ShapeError(f"regions must be n_r×{params.region_dim}, got {regions.shape}")
    embeddings = params.word_embeddings
    word_terms = ops.add(
        ops.matmul(embeddings, ops.matmul(params.theta_wh, h)),
        ops.matmul(embeddings, params.theta_w),
    )
    region_terms = ops.add(
        ops.matmul(regions, ops.matmul(params.theta_rh, h)),
        ops.matmul(regions, params.theta_r),
    )
    pair_terms = ops.matmul(ops.matmul(embeddings, params.theta_wr), ops.transpose(regions))
    # word terms broadcast down columns, region terms along rows
    with_words = ops.transpose(ops.add(ops.transpose(pair_terms), word_terms))
    return ops.add(with_words, region_terms)


def joint_dist(scores: Tensor) -> JointDistribution:
    return JointDistribution(probs=ops.softmax(scores, axis=None))


def word_marginal(joint: JointDistribution) -> Tensor:
    return ops.sum(joint.probs, axis=1)


def region_marginal(joint: JointDistribution) -> Tensor:
    return ops.sum(joint.probs, axis=0)


def region_conditional(joint: JointDistribution, word: int) -> Tensor:
    """``p(r | w, h)``: row ``word`` of the joint, renormalised.

    Raises:
        ValueError: If the row has no probability mass.
    """
    row = ops.slice(joint.probs, word)
    mass = ops.sum(row)
    if not mass.item() > 0.0:
        raise ValueError(f"word {word} has zero probability mass; cannot condition on it")
    return ops.div(row, mass)


def pool_regions(weights: Tensor, regions: Tensor) -> Tensor:
    """Convex combination ``weightsᵀ R`` of the descriptor rows."""
    return ops.matmul(weights, regions)


def gru_step(h: Tensor, x: Tensor, params: GruParams) -> Tensor:
    z = ops.sigmoid(ops.add(ops.add(ops.matmul(params.w_z, x), ops.matmul(params.u_z, h)), params.b_z))
    r = ops.sigmoid(ops.add(ops.add(ops.matmul(params.w_r, x), ops.matmul(params.u_r, h)), params.b_r))
    candidate = ops.tanh(
        ops.add(ops.add(ops.matmul(params.w_h, x), ops.matmul(params.u_h, ops.mul(r, h))), params.b_h)
    )
    keep = ops.sub(ops.constant(np.ones(h.shape)), z)
    return ops.add(ops.mul(keep, h), ops.mul(z, candidate))


def embed(word: int, params: AttentionParams) -> Tensor:
    if not 0 <= word < params.vocab_size:
        raise ValueError(f"word index {word} outside vocabulary of size {params.vocab_size}")
    return ops.slice(params.word_embeddings, word)


def attend(h: Tensor, regions: Tensor, params: AttentionParams) -> Attention:
    joint = joint_dist(score_joint(h, regions, params))
    return Attention(joint=joint, word_dist=word_marginal(joint), region_dist=region_marginal(joint))


def feed_back(
    h: Tensor,
    regions: Tensor,
    attention: Attention,
    word: int,
    params: AttentionParams,
    gru: GruParams,
    feedback: Feedback,
) -> tuple[Tensor, Tensor | None]:
    """Advance the state after ``word`` was emitted; returns ``(h_next, pooling_weights)``."""
    embedding = embed(word, params)
    if feedback is Feedback.NONE:
        return gru_step(h, embedding, gru), None
    if feedback is Feedback.CONDITIONAL:
        weights = region_conditional(attention.joint, word)
    else:
        weights = attention.region_dist
    visual = pool_regions(weights, regions)
    return gru_step(h, ops.concat([embedding, visual]), gru), weights


def attend_step(
    h: Tensor,
    regions: Tensor,
    word: int,
    params: AttentionParams,
    gru: GruParams,
    feedback: Feedback = Feedback.MARGINAL,
) -> StepResult:
    """One full step: word and region distributions, then the state update fed with ``word``."""
    attention = attend(h, regions, params)
    h_next, weights = feed_back(h, regions, attention, word, params, gru, feedback)
    return StepResult(
        word_dist=attention.word_dist,
        region_dist=attention.region_dist,
        pooling_weights=weights,
        h_next=h_next,
    )


def baseline_word_dist(h: Tensor, params: AttentionParams) -> Tensor:
    """Logistic regression on the state alone: ``softmax(Wθ_wh h)``."""
    return ops.softmax(ops.matmul(params.word_embeddings, ops.matmul(params.theta_wh, h)))
