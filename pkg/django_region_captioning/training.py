"""Teacher-forced caption loss, Adam, and the two-stage training schedule.

Stage 1 trains everything except the image encoder; stage 2 fine-tunes the
encoder as well. Per-example losses of a batch may be evaluated on worker
threads, but their gradients are always reduced in batch-index order so a run
is bitwise reproducible from its seed.
"""

from __future__ import annotations

from collections.abc import Iterator, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
import csv
import logging
import math

import numpy as np
import numpy.typing as npt

from django_region_captioning import conf, ops
from django_region_captioning.attention import Feedback, attend, feed_back
from django_region_captioning.autodiff import FloatArray, ShapeError, Tape, Tensor, backward
from django_region_captioning.model import Ablation, CaptionModel, ModelDims, RegionKind
from django_region_captioning.parameters import glorot_uniform, zeros
from django_region_captioning.regions import WARMSTART_TRANSFORM, ProposalBox, StnParams, oracle_proposals
from django_region_captioning.rng import CAPTIONS, FLIP, INIT, PROPOSALS, SHUFFLE, substream
from django_region_captioning.scenes import SceneRecord
from django_region_captioning.vocabulary import STOP_INDEX, Vocabulary, build_vocab

logger = logging.getLogger(__name__)

HIRES_FACTOR = 2
ORACLE_DISTRACTORS = 48
ORACLE_JITTER = 2.0
WARMUP_POOL = 8
# unset stage1_steps resolves to stage2_steps // STAGE1_DIVISOR
STAGE1_DIVISOR = 4


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 8
    stage1_steps: int | None = None
    stage2_steps: int = 1000
    region_kind: RegionKind = RegionKind.GRID
    feedback: Feedback | None = None
    ablation: Ablation = Ablation.FULL
    proposal_k: int = 50
    grid_stride: int = 1
    seed: int = 0
    flip: bool = False
    encoder_warmup_steps: int = 0
    min_count: int = 1

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.stage1_steps is not None and self.stage1_steps < 0:
            raise ValueError(f"stage1_steps must be >= 0, got {self.stage1_steps}")
        for name in ("stage2_steps", "encoder_warmup_steps", "seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("batch_size", "proposal_k", "grid_stride", "min_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def resolved_stage1_steps(self) -> int:
        return self.stage2_steps // STAGE1_DIVISOR if self.stage1_steps is None else self.stage1_steps

    @property
    def total_steps(self) -> int:
        return self.resolved_stage1_steps + self.stage2_steps

    @property
    def resolved_feedback(self) -> Feedback:
        return self.ablation.default_feedback if self.feedback is None else self.feedback

    def as_dict(self) -> dict[str, object]:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "batch_size": self.batch_size,
            "stage1_steps": self.resolved_stage1_steps,
            "stage2_steps": self.stage2_steps,
            "region_kind": str(self.region_kind),
            "feedback": str(self.resolved_feedback),
            "ablation": str(self.ablation),
            "proposal_k": self.proposal_k,
            "grid_stride": self.grid_stride,
            "seed": self.seed,
            "flip": self.flip,
            "encoder_warmup_steps": self.encoder_warmup_steps,
            "min_count": self.min_count,
        }


@dataclass
class AdamState:
    first_moments: dict[str, FloatArray] = field(default_factory=dict)
    second_moments: dict[str, FloatArray] = field(default_factory=dict)
    # updates applied to each parameter; bias correction uses these, not the global step
    counts: dict[str, int] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, FloatArray],
    state: AdamState,
    lr: float,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> AdamState:
    """Apply one bias-corrected Adam update in place and return the new state.

    Parameters without a gradient entry are left alone. Bias correction is
    counted per parameter, so a parameter that joins training late (the
    encoder in stage 2) starts from a fresh correction.

    Raises:
        ValueError: If any gradient is non-finite; nothing is modified.
    """
    for name, grad in grads.items():
        if name not in params:
            raise ValueError(f"gradient for unknown parameter {name!r}")
        if grad.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {grad.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise ValueError(f"non-finite gradient for {name!r}; step rejected")
    first = dict(state.first_moments)
    second = dict(state.second_moments)
    counts = dict(state.counts)
    for name, grad in grads.items():
        count = counts.get(name, 0) + 1
        counts[name] = count
        correction1 = 1.0 - beta1**count
        correction2 = 1.0 - beta2**count
        m = beta1 * first.get(name, np.zeros_like(grad)) + (1.0 - beta1) * grad
        v = beta2 * second.get(name, np.zeros_like(grad)) + (1.0 - beta2) * grad * grad
        first[name], second[name] = m, v
        params[name].data -= lr * (m / correction1) / (np.sqrt(v / correction2) + epsilon)
    return AdamState(first_moments=first, second_moments=second, counts=counts, step=state.step + 1)


def clip_by_global_norm(grads: Mapping[str, FloatArray], max_norm: float) -> tuple[dict[str, FloatArray], float]:
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


@dataclass(frozen=True)
class TrainingExample:
    """A scene prepared for training: tensors, encoded captions and proposals."""

    record: SceneRecord
    image: Tensor
    captions: tuple[tuple[int, ...], ...]
    hires_image: Tensor | None = None
    proposals: tuple[ProposalBox, ...] = ()
    mirror: TrainingExample | None = None


def prepare_example(
    record: SceneRecord,
    vocab: Vocabulary,
    *,
    uses_hires: bool,
    proposals: Sequence[ProposalBox] | None = None,
    seed: int = 0,
    with_mirror: bool = False,
) -> TrainingExample:
    hires = Tensor(record.render(record.image.shape[0] * HIRES_FACTOR)) if uses_hires else None
    if uses_hires and proposals is None:
        proposals = oracle_proposals(record, ORACLE_DISTRACTORS, ORACLE_JITTER, seed=seed)
    example = TrainingExample(
        record=record,
        image=Tensor(record.pixels()),
        captions=tuple(tuple(vocab.encode(caption)) for caption in record.captions),
        hires_image=hires,
        proposals=tuple(proposals or ()),
    )
    if not with_mirror:
        return example
    size = record.image.shape[0]
    mirrored = prepare_example(
        record.flipped(),
        vocab,
        uses_hires=uses_hires,
        proposals=[box.flipped(size) for box in example.proposals] if uses_hires else None,
        seed=seed,
    )
    return TrainingExample(
        record=example.record,
        image=example.image,
        captions=example.captions,
        hires_image=example.hires_image,
        proposals=example.proposals,
        mirror=mirrored,
    )


def prepare_examples(
    records: Sequence[SceneRecord],
    vocab: Vocabulary,
    *,
    uses_hires: bool,
    proposals: Mapping[str, Sequence[ProposalBox]] | None = None,
    seed: int = 0,
    with_mirror: bool = False,
) -> list[TrainingExample]:
    return [
        prepare_example(
            record,
            vocab,
            uses_hires=uses_hires,
            proposals=None if proposals is None else proposals.get(record.id),
            seed=seed,
            with_mirror=with_mirror,
        )
        for record in records
    ]


def _check_caption(caption: Sequence[int], vocab_size: int) -> None:
    if not caption:
        raise ValueError("caption is empty")
    if caption[-1] != STOP_INDEX:
        raise ValueError("caption must end with the STOP token")
    if any(not 0 <= w < vocab_size for w in caption):
        raise ValueError(f"caption holds token indices outside the vocabulary of size {vocab_size}")


def sequence_loss(model: CaptionModel, h0: Tensor, regions: Tensor, caption: Sequence[int]) -> Tensor:
    """Negative log-likelihood of ``caption`` under teacher forcing, summed over all tokens."""
    _check_caption(caption, model.dims.vocab_size)
    h = h0
    total: Tensor | None = None
    for position, word in enumerate(caption):
        attention = attend(h, regions, model.attention)
        nll = ops.mul(ops.log(ops.slice(attention.word_dist, word)), ops.constant(-1.0))
        total = nll if total is None else ops.add(total, nll)
        if position + 1 < len(caption):
            h, _ = feed_back(h, regions, attention, word, model.attention, model.gru, model.feedback)
    assert total is not None
    return total


def caption_loss(
    model: CaptionModel,
    image: Tensor,
    caption: Sequence[int],
    *,
    hires_image: Tensor | None = None,
    proposals: Sequence[ProposalBox] = (),
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Encode ``image``, build its regions and score ``caption`` (which must end in STOP)."""
    _check_caption(caption, model.dims.vocab_size)
    encoded = model.encode(image, hires_image)
    regions = model.regions(encoded, proposals=list(proposals), rng=rng)
    return sequence_loss(model, model.initial_state(encoded), regions.descriptors, caption)


def pad_captions(captions: Sequence[Sequence[int]]) -> tuple[npt.NDArray[np.intp], FloatArray]:
    """Pad to the batch's longest caption with STOP; the mask is 1 up to and including each STOP."""
    length = max(len(c) for c in captions)
    tokens = np.full((len(captions), length), STOP_INDEX, dtype=np.intp)
    mask = np.zeros((len(captions), length))
    for i, caption in enumerate(captions):
        tokens[i, : len(caption)] = caption
        mask[i, : len(caption)] = 1.0
    return tokens, mask


@dataclass(frozen=True)
class _ExampleJob:
    example: TrainingExample
    tokens: npt.NDArray[np.intp]
    mask: FloatArray
    rng: np.random.Generator | None


@dataclass(frozen=True)
class _ExampleResult:
    loss: float
    tokens: int
    grads: dict[Tensor, FloatArray]


def _masked_caption(tokens: npt.NDArray[np.intp], mask: FloatArray) -> list[int]:
    # the mask is a prefix of ones, so padded steps are simply never unrolled
    return [int(w) for w, m in zip(tokens, mask) if m > 0.0]


def _run_example(model: CaptionModel, job: _ExampleJob) -> _ExampleResult:
    caption = _masked_caption(job.tokens, job.mask)
    with Tape() as tape:
        loss = caption_loss(
            model,
            job.example.image,
            caption,
            hires_image=job.example.hires_image,
            proposals=job.example.proposals,
            rng=job.rng,
        )
    grads = backward(tape, loss, accumulate=False)
    return _ExampleResult(loss=loss.item(), tokens=len(caption), grads=grads)


@dataclass(frozen=True)
class LossPoint:
    step: int
    loss: float


@dataclass
class TrainResult:
    model: CaptionModel
    trace: list[LossPoint]
    vocab: Vocabulary | None = None
    rejected_steps: int = 0


class _BatchSampler:
    """Epoch-wise shuffled example indices plus per-draw caption and flip choices."""

    def __init__(self, examples: Sequence[TrainingExample], seed: int, flip: bool) -> None:
        self.examples = examples
        self.shuffle = substream(seed, SHUFFLE)
        self.captions = substream(seed, CAPTIONS)
        self.flips = substream(seed, FLIP)
        self.flip = flip
        self.queue: list[int] = []

    def draw(self, batch_size: int) -> list[tuple[TrainingExample, tuple[int, ...]]]:
        batch = []
        for _ in range(batch_size):
            if not self.queue:
                self.queue = [int(i) for i in self.shuffle.permutation(len(self.examples))]
            example = self.examples[self.queue.pop(0)]
            if self.flip and example.mirror is not None and self.flips.random() < 0.5:
                example = example.mirror
            caption = example.captions[int(self.captions.integers(len(example.captions)))]
            batch.append((example, caption))
        return batch


@contextmanager
def _no_grad(tensors: Sequence[Tensor]) -> Iterator[None]:
    previous = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(tensors, previous):
            t.requires_grad = flag


def _encoder_tensors(model: CaptionModel) -> list[Tensor]:
    return [t for name, t in model.named_parameters().items() if name.startswith(("encoder.", "hires_encoder."))]


def train(
    examples: Sequence[TrainingExample],
    model: CaptionModel,
    config: TrainConfig,
    *,
    workers: int | None = None,
    grad_clip_norm: float | None = None,
) -> TrainResult:
    """Run the warm-up (optional), stage 1 and stage 2 on ``model`` in place.

    Raises:
        ValueError: If ``examples`` is empty.
    """
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    workers = conf.get_workers() if workers is None else workers
    clip = conf.get_grad_clip_norm() if grad_clip_norm is None else grad_clip_norm
    log_every = conf.get_log_every()

    if config.encoder_warmup_steps:
        warm_up_encoder(model, examples, config)

    sampler = _BatchSampler(examples, config.seed, config.flip)
    state = AdamState()
    trace: list[LossPoint] = []
    rejected = 0
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for step in range(1, config.total_steps + 1):
            stage1 = step <= config.resolved_stage1_steps
            if step == 1 or step == config.resolved_stage1_steps + 1:
                logger.info("Starting stage %d at step %d", 1 if stage1 else 2, step)
            trainable = model.trainable_parameters(include_encoder=not stage1)
            batch = sampler.draw(config.batch_size)
            tokens, mask = pad_captions([caption for _, caption in batch])
            jobs = [
                _ExampleJob(
                    example=example,
                    tokens=tokens[i],
                    mask=mask[i],
                    rng=substream(config.seed, PROPOSALS, step, i) if example.proposals else None,
                )
                for i, (example, _) in enumerate(batch)
            ]
            with _no_grad(_encoder_tensors(model) if stage1 else []):
                if executor is None:
                    results = [_run_example(model, job) for job in jobs]
                else:
                    results = list(executor.map(lambda job: _run_example(model, job), jobs))

            grads = _reduce(trainable, results, len(batch))
            grads, norm = clip_by_global_norm(grads, clip)
            try:
                state = adam_step(
                    trainable,
                    grads,
                    state,
                    config.learning_rate,
                    beta1=config.beta1,
                    beta2=config.beta2,
                    epsilon=config.epsilon,
                )
            except ValueError:
                rejected += 1
                logger.warning("Step %d rejected: non-finite gradient (norm %s)", step, norm)
            per_token = sum(r.loss for r in results) / sum(r.tokens for r in results)
            trace.append(LossPoint(step=step, loss=per_token))
            if step % log_every == 0 or step == config.total_steps:
                logger.info("step %d/%d loss/token %.4f grad-norm %.3f", step, config.total_steps, per_token, norm)
    finally:
        if executor is not None:
            executor.shutdown()
    model.zero_frozen()
    return TrainResult(model=model, trace=trace, rejected_steps=rejected)


def _reduce(trainable: Mapping[str, Tensor], results: Sequence[_ExampleResult], batch_size: int) -> dict[str, FloatArray]:
    grads: dict[str, FloatArray] = {}
    for name, tensor in trainable.items():
        total = np.zeros_like(tensor.data)
        for result in results:
            grad = result.grads.get(tensor)
            if grad is not None:
                total = total + grad
        grads[name] = total / batch_size
    return grads


def warm_up_encoder(model: CaptionModel, examples: Sequence[TrainingExample], config: TrainConfig) -> list[float]:
    """Auxiliary pre-training: reconstruct the 8×8 average-pooled image from φ(I).

    The linear decoder is discarded afterwards; only encoder weights change.
    """
    rng = substream(config.seed, INIT, 2)
    target_dim = WARMUP_POOL * WARMUP_POOL * 3
    phi_dim = model.encoder.phi_dim
    decoder_w = glorot_uniform(rng, (target_dim, phi_dim), fan_in=phi_dim, fan_out=target_dim)
    decoder_b = zeros(target_dim)
    params = {f"encoder.{name}": t for name, t in model.encoder.named_parameters().items()}
    params |= {"decoder.w": decoder_w, "decoder.b": decoder_b}
    state = AdamState()
    losses = []
    for step in range(config.encoder_warmup_steps):
        example = examples[step % len(examples)]
        image = example.image.data
        block = image.shape[0] // WARMUP_POOL
        target = image.reshape(WARMUP_POOL, block, WARMUP_POOL, block, 3).mean(axis=(1, 3)).reshape(-1)
        with Tape() as tape:
            encoded = model.encode(example.image, example.hires_image)
            diff = ops.sub(ops.linear(encoded.phi, decoder_w, decoder_b), ops.constant(target))
            loss = ops.div(ops.sum(ops.mul(diff, diff)), ops.constant(float(target_dim)))
        found = backward(tape, loss, accumulate=False)
        grads = {name: found.get(t, np.zeros_like(t.data)) for name, t in params.items()}
        state = adam_step(params, grads, state, config.learning_rate)
        losses.append(loss.item())
    if losses:
        logger.info("Encoder warm-up: %d step(s), reconstruction loss %.4f → %.4f", len(losses), losses[0], losses[-1])
    return losses


def transfer_parameters(source: CaptionModel, target: CaptionModel, *, skip_prefix: tuple[str, ...] = ()) -> list[str]:
    """Copy every parameter ``target`` shares with ``source`` by name.

    Raises:
        ValueError: If a shared parameter differs in shape.
    """
    source_params = source.named_parameters()
    copied = []
    for name, tensor in target.named_parameters().items():
        if name.startswith(skip_prefix) or name not in source_params:
            continue
        if source_params[name].shape != tensor.shape:
            raise ValueError(
                f"cannot warm-start {name}: source shape {source_params[name].shape}, target shape {tensor.shape}"
            )
        tensor.data[...] = source_params[name].data
        copied.append(name)
    target.zero_frozen()
    return copied


def stn_warmstart(
    grid_model: CaptionModel,
    *,
    seed: int,
    transform: Sequence[float] = WARMSTART_TRANSFORM,
    feedback: Feedback | None = None,
    ablation: Ablation | None = None,
    grid_stride: int | None = None,
    proposal_k: int | None = None,
) -> CaptionModel:
    """Spatial-transformer model initialised from a grid-trained one.

    Shared parameters are copied; the localization network starts at the
    fixed ``transform`` everywhere and the output filter at the centre-tap
    identity. Options left as ``None`` are taken from ``grid_model``.
    """
    target = CaptionModel.initialize(
        grid_model.dims,
        seed=seed,
        region_kind=RegionKind.STN,
        feedback=grid_model.feedback if feedback is None else feedback,
        ablation=grid_model.ablation if ablation is None else ablation,
        grid_stride=grid_model.grid_stride if grid_stride is None else grid_stride,
        proposal_k=grid_model.proposal_k if proposal_k is None else proposal_k,
    )
    target.stn = StnParams.warmstart(substream(seed, INIT, 1), grid_model.dims.channels, transform)
    copied = transfer_parameters(grid_model, target, skip_prefix=("stn.",))
    logger.info("Warm-started spatial transformer model from %d shared parameter(s)", len(copied))
    return target


def fit(
    records: Sequence[SceneRecord],
    config: TrainConfig,
    *,
    vocab: Vocabulary | None = None,
    warmstart: CaptionModel | None = None,
    proposals: Mapping[str, Sequence[ProposalBox]] | None = None,
    dims: ModelDims | None = None,
) -> TrainResult:
    """Build the vocabulary, model and examples for ``records`` and train."""
    if not records:
        raise ValueError("cannot train on an empty dataset")
    vocab = vocab or build_vocab((c for r in records for c in r.captions), config.min_count)
    dims = dims or ModelDims(vocab_size=len(vocab), image_size=records[0].image.shape[0])
    if warmstart is not None and config.region_kind == RegionKind.STN and warmstart.region_kind != RegionKind.STN:
        model = stn_warmstart(
            warmstart,
            seed=config.seed,
            feedback=config.resolved_feedback,
            ablation=config.ablation,
            grid_stride=config.grid_stride,
            proposal_k=config.proposal_k,
        )
    else:
        model = CaptionModel.initialize(
            dims,
            seed=config.seed,
            region_kind=config.region_kind,
            feedback=config.resolved_feedback,
            ablation=config.ablation,
            grid_stride=config.grid_stride,
            proposal_k=config.proposal_k,
        )
        if warmstart is not None:
            transfer_parameters(warmstart, model)
    if model.dims != dims:
        raise ValueError(f"warm-start model dims {model.dims} do not match the dataset's {dims}")
    examples = prepare_examples(
        records,
        vocab,
        uses_hires=model.uses_hires,
        proposals=proposals,
        seed=config.seed,
        with_mirror=config.flip,
    )
    result = train(examples, model, config)
    result.vocab = vocab
    return result


def write_loss_csv(path: str | Path, trace: Sequence[LossPoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for point in trace:
            writer.writerow([point.step, repr(point.loss)])
