from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
import logging

import numpy as np

from django_region_captioning.attention import Attention, attend, feed_back
from django_region_captioning.autodiff import FloatArray, Tensor, no_tape
from django_region_captioning.model import CaptionModel
from django_region_captioning.regions import ProposalBox, RegionSet
from django_region_captioning.rng import SAMPLING, substream
from django_region_captioning.vocabulary import STOP_INDEX

logger = logging.getLogger(__name__)

MIN_TEMPERATURE = 1e-6


@dataclass(frozen=True)
class DecodeContext:
    """Initial state and regions for one image."""

    h0: Tensor
    regions: RegionSet

    @classmethod
    def build(
        cls,
        model: CaptionModel,
        image: Tensor,
        *,
        hires_image: Tensor | None = None,
        proposals: Sequence[ProposalBox] = (),
        stride: int | None = None,
        proposal_k: int | None = None,
    ) -> DecodeContext:
        with no_tape():
            encoded = model.encode(image, hires_image)
            if proposals and proposal_k is None:
                proposal_k = min(model.proposal_k, len(proposals))
            regions = model.regions(encoded, proposals=list(proposals), stride=stride, proposal_k=proposal_k)
            return cls(h0=model.initial_state(encoded), regions=regions)


@dataclass(frozen=True)
class Hypothesis:
    """A decoded token sequence.

    ``log_prob`` is the sum of ``ln p(w_t | h_t)`` over ``tokens``; ``state``
    is the RNN state that emitted the last token; ``region_dists[t]`` is the
    region marginal at step ``t``.
    """

    tokens: tuple[int, ...]
    log_prob: float
    state: Tensor
    region_dists: tuple[FloatArray, ...]

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == STOP_INDEX


@dataclass(frozen=True)
class AttentionTrace:
    """Region distribution per emitted token, with the regions' geometry."""

    region_dists: tuple[FloatArray, ...]
    geometry: FloatArray

    @classmethod
    def from_hypothesis(cls, hypothesis: Hypothesis, regions: RegionSet) -> AttentionTrace:
        return cls(region_dists=hypothesis.region_dists, geometry=regions.geometry)

    def __len__(self) -> int:
        return len(self.region_dists)


@dataclass(frozen=True)
class _Live:
    tokens: tuple[int, ...]
    log_prob: float
    state: Tensor
    attention: Attention | None
    region_dists: tuple[FloatArray, ...]


def _advance(model: CaptionModel, context: DecodeContext, live: _Live) -> tuple[Tensor, Attention]:
    """State for the next token (feeding back the last one) and its attention."""
    h = live.state
    if live.attention is not None:
        h, _ = feed_back(
            h,
            context.regions.descriptors,
            live.attention,
            live.tokens[-1],
            model.attention,
            model.gru,
            model.feedback,
        )
    return h, attend(h, context.regions.descriptors, model.attention)


def _check_max_len(max_len: int) -> None:
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")


def decode_greedy(model: CaptionModel, context: DecodeContext, max_len: int = 20) -> Hypothesis:
    """Most probable token at each step (lowest index on ties) until STOP or ``max_len``."""
    _check_max_len(max_len)
    live = _Live(tokens=(), log_prob=0.0, state=context.h0, attention=None, region_dists=())
    with no_tape():
        for _ in range(max_len):
            h, attention = _advance(model, context, live)
            # rank on cumulative scores, exactly as beam search does
            scores = live.log_prob + np.log(attention.word_dist.data)
            word = int(np.argmax(scores))
            live = _Live(
                tokens=(*live.tokens, word),
                log_prob=float(scores[word]),
                state=h,
                attention=attention,
                region_dists=(*live.region_dists, attention.region_dist.data.copy()),
            )
            if word == STOP_INDEX:
                break
    return _hypothesis(live)


def decode_sample(
    model: CaptionModel,
    context: DecodeContext,
    max_len: int = 20,
    temperature: float = 1.0,
    *,
    seed: int = 0,
    rng: np.random.Generator | None = None,
) -> Hypothesis:
    """Sample each token from ``word_dist ** (1 / temperature)``, renormalised.

    ``log_prob`` is always taken under the untempered model.
    """
    _check_max_len(max_len)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    temperature = max(temperature, MIN_TEMPERATURE)
    rng = substream(seed, SAMPLING) if rng is None else rng
    live = _Live(tokens=(), log_prob=0.0, state=context.h0, attention=None, region_dists=())
    with no_tape():
        for _ in range(max_len):
            h, attention = _advance(model, context, live)
            log_p = np.log(attention.word_dist.data)
            tempered = log_p / temperature
            weights = np.exp(tempered - tempered.max())
            cumulative = np.cumsum(weights)
            word = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
            word = min(word, len(weights) - 1)
            live = _Live(
                tokens=(*live.tokens, word),
                log_prob=live.log_prob + float(log_p[word]),
                state=h,
                attention=attention,
                region_dists=(*live.region_dists, attention.region_dist.data.copy()),
            )
            if word == STOP_INDEX:
                break
    return _hypothesis(live)


def beam_search(model: CaptionModel, context: DecodeContext, k: int = 3, max_len: int = 20) -> list[Hypothesis]:
    """Breadth-``k`` search on raw cumulative log-probability (no length normalisation).

    Candidates tie-break on parent rank then token index, so ``k = 1`` follows
    :func:`decode_greedy` exactly. Returns at most ``k`` hypotheses, best first.
    """
    if k < 1:
        raise ValueError(f"beam width must be >= 1, got {k}")
    _check_max_len(max_len)
    live = [_Live(tokens=(), log_prob=0.0, state=context.h0, attention=None, region_dists=())]
    finished: list[_Live] = []
    with no_tape():
        for _ in range(max_len):
            candidates: list[tuple[float, int, int, Tensor, Attention]] = []
            for rank, item in enumerate(live):
                h, attention = _advance(model, context, item)
                log_p = np.log(attention.word_dist.data)
                for word in range(log_p.shape[0]):
                    candidates.append((item.log_prob + float(log_p[word]), rank, word, h, attention))
            candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
            next_live = []
            for score, rank, word, h, attention in candidates[:k]:
                parent = live[rank]
                extended = _Live(
                    tokens=(*parent.tokens, word),
                    log_prob=score,
                    state=h,
                    attention=attention,
                    region_dists=(*parent.region_dists, attention.region_dist.data.copy()),
                )
                (finished if word == STOP_INDEX else next_live).append(extended)
            live = next_live
            # log-probabilities only decrease, so no live beam can overtake the best finished one
            if not live or (finished and max(f.log_prob for f in finished) >= max(item.log_prob for item in live)):
                break
    pool = sorted(finished + live, key=lambda item: -item.log_prob)
    return [_hypothesis(item) for item in pool[:k]]


def _hypothesis(live: _Live) -> Hypothesis:
    return Hypothesis(tokens=live.tokens, log_prob=live.log_prob, state=live.state, region_dists=live.region_dists)


def forced_trace(model: CaptionModel, context: DecodeContext, tokens: Sequence[int]) -> Hypothesis:
    """Score a given token sequence step by step, recording the attention at each token."""
    live = _Live(tokens=(), log_prob=0.0, state=context.h0, attention=None, region_dists=())
    with no_tape():
        for word in tokens:
            h, attention = _advance(model, context, live)
            live = _Live(
                tokens=(*live.tokens, word),
                log_prob=live.log_prob + float(np.log(attention.word_dist.data)[word]),
                state=h,
                attention=attention,
                region_dists=(*live.region_dists, attention.region_dist.data.copy()),
            )
    return _hypothesis(live)


def decode(model: CaptionModel, context: DecodeContext, *, beam: int = 1, max_len: int = 20) -> Hypothesis:
    if beam == 1:
        return decode_greedy(model, context, max_len)
    return beam_search(model, context, beam, max_len)[0]
