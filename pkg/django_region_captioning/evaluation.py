"""Dataset-level evaluation, region-count sweeps and the ablation ladder."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
import logging
import math

import numpy as np

from django_region_captioning import conf
from django_region_captioning.attention import Feedback
from django_region_captioning.autodiff import Tensor
from django_region_captioning.decoding import DecodeContext, Hypothesis, decode, forced_trace
from django_region_captioning.metrics import (
    BleuStats,
    attention_correctness,
    bleu,
    uniform_attention_correctness,
)
from django_region_captioning.model import Ablation, CaptionModel, RegionKind
from django_region_captioning.regions import ProposalBox, oracle_proposals
from django_region_captioning.scenes import SceneRecord, generate_scenes
from django_region_captioning.training import (
    HIRES_FACTOR,
    ORACLE_DISTRACTORS,
    ORACLE_JITTER,
    TrainConfig,
    fit,
)
from django_region_captioning.vocabulary import Vocabulary

logger = logging.getLogger(__name__)

BLEU_ORDERS = (1, 2, 3, 4)


@dataclass(frozen=True)
class DecodeRecord:
    image_id: str
    caption: str
    logprob: float
    attention: list[list[float]]

    def as_json(self) -> dict[str, object]:
        return asdict(self)


@dataclass(frozen=True)
class _ImageResult:
    record: DecodeRecord
    candidate: list[str]
    references: list[list[str]]
    correctness: float | None
    uniform: float | None


@dataclass
class EvaluationResult:
    metrics: dict[str, float]
    decodes: list[DecodeRecord] = field(default_factory=list)


def _proposals_for(
    model: CaptionModel,
    record: SceneRecord,
    proposals: Mapping[str, Sequence[ProposalBox]] | None,
    seed: int,
) -> list[ProposalBox]:
    if not model.uses_hires:
        return []
    if proposals is not None and record.id in proposals:
        return list(proposals[record.id])
    return oracle_proposals(record, ORACLE_DISTRACTORS, ORACLE_JITTER, seed=seed)


def decode_context(
    model: CaptionModel,
    record: SceneRecord,
    *,
    proposals: Mapping[str, Sequence[ProposalBox]] | None = None,
    seed: int = 0,
    stride: int | None = None,
    proposal_k: int | None = None,
) -> DecodeContext:
    hires = Tensor(record.render(record.image.shape[0] * HIRES_FACTOR)) if model.uses_hires else None
    boxes = _proposals_for(model, record, proposals, seed)
    if boxes and proposal_k is not None:
        proposal_k = min(proposal_k, len(boxes))
    return DecodeContext.build(
        model,
        Tensor(record.pixels()),
        hires_image=hires,
        proposals=boxes,
        stride=stride,
        proposal_k=proposal_k,
    )


def _evaluate_one(
    model: CaptionModel,
    vocab: Vocabulary,
    record: SceneRecord,
    *,
    beam: int,
    max_len: int,
    proposals: Mapping[str, Sequence[ProposalBox]] | None,
    seed: int,
    stride: int | None,
    proposal_k: int | None,
) -> _ImageResult:
    context = decode_context(model, record, proposals=proposals, seed=seed, stride=stride, proposal_k=proposal_k)
    hypothesis: Hypothesis = decode(model, context, beam=beam, max_len=max_len)
    candidate = vocab.decode(hypothesis.tokens)

    correctness = uniform = None
    image_size = record.image.shape[0]
    if record.captions and record.alignments[0]:
        forced = forced_trace(model, context, vocab.encode(record.captions[0]))
        boxes = {t: record.objects[o].box for t, o in record.alignments[0].items()}
        correctness = attention_correctness(forced.region_dists, context.regions.geometry, boxes, image_size)
        uniform = uniform_attention_correctness(context.regions.geometry, boxes, image_size)

    return _ImageResult(
        record=DecodeRecord(
            image_id=record.id,
            caption=" ".join(candidate),
            logprob=hypothesis.log_prob,
            attention=[[float(p) for p in dist] for dist in hypothesis.region_dists],
        ),
        candidate=candidate,
        references=[list(c) for c in record.captions],
        correctness=correctness,
        uniform=uniform,
    )


def evaluate(
    model: CaptionModel,
    vocab: Vocabulary,
    records: Sequence[SceneRecord],
    *,
    beam: int = 1,
    max_len: int = 20,
    proposals: Mapping[str, Sequence[ProposalBox]] | None = None,
    seed: int = 0,
    stride: int | None = None,
    proposal_k: int | None = None,
    workers: int | None = None,
) -> EvaluationResult:
    """Decode every record and score BLEU-1..4 (sentence mean and corpus) and attention correctness.

    Raises:
        ValueError: If ``records`` is empty.
    """
    if not records:
        raise ValueError("cannot evaluate on an empty dataset")
    workers = conf.get_workers() if workers is None else workers

    def run(record: SceneRecord) -> _ImageResult:
        return _evaluate_one(
            model,
            vocab,
            record,
            beam=beam,
            max_len=max_len,
            proposals=proposals,
            seed=seed,
            stride=stride,
            proposal_k=proposal_k,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run, records))
    else:
        results = [run(record) for record in records]

    metrics: dict[str, float] = {}
    for n in BLEU_ORDERS:
        sentence = [bleu(r.candidate, r.references, n) if r.candidate else 0.0 for r in results]
        metrics[f"bleu{n}"] = float(np.mean(sentence))
        totals = BleuStats.empty(n)
        for r in results:
            if r.candidate:
                totals = totals + BleuStats.of(r.candidate, r.references, n)
        metrics[f"corpus_bleu{n}"] = totals.score()
    scored = [r for r in results if r.correctness is not None]
    metrics["attention_correctness"] = float(np.mean([r.correctness for r in scored])) if scored else math.nan
    metrics["uniform_attention_correctness"] = float(np.mean([r.uniform for r in scored])) if scored else math.nan
    metrics["mean_logprob"] = float(np.mean([r.record.logprob for r in results]))
    metrics["images"] = float(len(results))
    logger.info(
        "Evaluated %d image(s): BLEU-4 %.4f (corpus %.4f), attention correctness %.4f",
        len(results),
        metrics["bleu4"],
        metrics["corpus_bleu4"],
        metrics["attention_correctness"],
    )
    return EvaluationResult(metrics=metrics, decodes=[r.record for r in results])


@dataclass(frozen=True)
class SweepRow:
    region_count: int
    parameter: int
    bleu4: float
    corpus_bleu4: float
    attention_correctness: float


def sweep_region_counts(
    model: CaptionModel,
    vocab: Vocabulary,
    records: Sequence[SceneRecord],
    *,
    strides: Sequence[int] = (),
    proposal_counts: Sequence[int] = (),
    beam: int = 1,
    max_len: int = 20,
    proposals: Mapping[str, Sequence[ProposalBox]] | None = None,
    seed: int = 0,
) -> list[SweepRow]:
    """Re-evaluate a trained model with fewer or more regions at test time.

    Grid and spatial-transformer models sweep the location stride; proposal
    models sweep top-k by objectness, k ascending.
    """
    if bool(strides) == bool(proposal_counts):
        raise ValueError("give exactly one of strides or proposal_counts")
    rows = []
    if strides:
        if model.region_kind == RegionKind.PROPOSALS:
            raise ValueError("stride sweeps apply to grid and spatial-transformer models")
        grid = model.encoder.grid_size
        for stride in sorted(strides):
            result = evaluate(model, vocab, records, beam=beam, max_len=max_len, seed=seed, stride=stride)
            rows.append(_sweep_row(math.ceil(grid / stride) ** 2, stride, result))
    else:
        if model.region_kind != RegionKind.PROPOSALS:
            raise ValueError("proposal-count sweeps apply to proposal models")
        for k in sorted(proposal_counts):
            result = evaluate(
                model, vocab, records, beam=beam, max_len=max_len, proposals=proposals, seed=seed, proposal_k=k
            )
            rows.append(_sweep_row(k, k, result))
    return rows


def _sweep_row(region_count: int, parameter: int, result: EvaluationResult) -> SweepRow:
    return SweepRow(
        region_count=region_count,
        parameter=parameter,
        bleu4=result.metrics["bleu4"],
        corpus_bleu4=result.metrics["corpus_bleu4"],
        attention_correctness=result.metrics["attention_correctness"],
    )


@dataclass(frozen=True)
class Variant:
    name: str
    region_kind: RegionKind
    ablation: Ablation
    feedback: Feedback
    warmstart_from: str | None = None


LADDER: tuple[Variant, ...] = (
    Variant("baseline", RegionKind.GRID, Ablation.WH, Feedback.NONE),
    Variant("wh+wr", RegionKind.GRID, Ablation.WH_WR, Feedback.NONE),
    Variant("wh+wr+rh", RegionKind.GRID, Ablation.WH_WR_RH, Feedback.NONE),
    Variant("conditional", RegionKind.GRID, Ablation.FULL, Feedback.CONDITIONAL),
    Variant("full", RegionKind.GRID, Ablation.FULL, Feedback.MARGINAL),
    Variant("proposals", RegionKind.PROPOSALS, Ablation.FULL, Feedback.MARGINAL),
    Variant("stn", RegionKind.STN, Ablation.FULL, Feedback.MARGINAL, warmstart_from="full"),
)


@dataclass(frozen=True)
class AblationRow:
    variant: str
    seed: int
    bleu4: float
    corpus_bleu4: float
    attention_correctness: float
    uniform_attention_correctness: float


def split_benchmark(records: Sequence[SceneRecord], held_out: float = 0.2) -> tuple[list[SceneRecord], list[SceneRecord]]:
    if not 0.0 < held_out < 1.0:
        raise ValueError(f"held_out must lie in (0, 1), got {held_out}")
    cut = max(1, int(round(len(records) * (1.0 - held_out))))
    if cut >= len(records):
        raise ValueError(f"need at least two scenes to split, got {len(records)}")
    return list(records[:cut]), list(records[cut:])


def run_ablation_ladder(
    n: int,
    seeds: Sequence[int],
    steps: int,
    *,
    data_seed: int = 0,
    batch_size: int = 8,
    variants: Sequence[str] | None = None,
) -> tuple[list[AblationRow], dict[str, dict[str, float]]]:
    """Train each variant for every seed on one generated benchmark; score the held-out split.

    Returns per-run rows and per-variant means.
    """
    chosen = [v for v in LADDER if variants is None or v.name in variants]
    if variants is not None and len(chosen) != len(set(variants)):
        unknown = sorted(set(variants) - {v.name for v in LADDER})
        raise ValueError(f"Unknown ablation variant(s): {', '.join(unknown)}")
    train_set, test_set = split_benchmark(generate_scenes(data_seed, n))
    rows: list[AblationRow] = []
    for seed in seeds:
        trained: dict[str, CaptionModel] = {}
        vocab: Vocabulary | None = None
        for variant in chosen:
            config = TrainConfig(
                stage2_steps=steps,
                batch_size=batch_size,
                region_kind=variant.region_kind,
                ablation=variant.ablation,
                feedback=variant.feedback,
                seed=seed,
            )
            logger.info("Ablation seed %d: training %s", seed, variant.name)
            warmstart = trained.get(variant.warmstart_from) if variant.warmstart_from else None
            result = fit(train_set, config, vocab=vocab, warmstart=warmstart)
            vocab = result.vocab
            assert vocab is not None
            trained[variant.name] = result.model
            metrics = evaluate(result.model, vocab, test_set, seed=seed).metrics
            rows.append(
                AblationRow(
                    variant=variant.name,
                    seed=seed,
                    bleu4=metrics["bleu4"],
                    corpus_bleu4=metrics["corpus_bleu4"],
                    attention_correctness=metrics["attention_correctness"],
                    uniform_attention_correctness=metrics["uniform_attention_correctness"],
                )
            )
    summary = {
        variant.name: {
            key: float(np.mean([getattr(r, key) for r in rows if r.variant == variant.name]))
            for key in ("bleu4", "corpus_bleu4", "attention_correctness", "uniform_attention_correctness")
        }
        for variant in chosen
    }
    return rows, summary
