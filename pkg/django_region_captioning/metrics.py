"""Caption and attention metrics: BLEU-n and attention correctness."""

from __future__ import annotations

from collections import Counter
from collections.abc import Hashable, Mapping, Sequence
from dataclasses import dataclass
import math

import numpy as np
import numpy.typing as npt

from django_region_captioning.autodiff import FloatArray

Box = tuple[float, float, float, float]
Tokens = Sequence[Hashable]


def _ngrams(tokens: Tokens, order: int) -> Counter[tuple[Hashable, ...]]:
    return Counter(tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1))


def _closest_length(candidate_length: int, references: Sequence[Tokens]) -> int:
    # ties go to the shorter reference
    return min((len(ref) for ref in references), key=lambda length: (abs(length - candidate_length), length))


def _check(candidate: Tokens, references: Sequence[Tokens], n: int) -> None:
    if not 1 <= n <= 4:
        raise ValueError(f"n must lie in 1..4, got {n}")
    if not candidate:
        raise ValueError("candidate is empty")
    if not references:
        raise ValueError("at least one reference is required")


@dataclass
class BleuStats:
    """Clipped n-gram matches and totals, summable across sentences."""

    matches: list[int]
    totals: list[int]
    candidate_length: int = 0
    reference_length: int = 0

    @classmethod
    def empty(cls, n: int) -> BleuStats:
        return cls(matches=[0] * n, totals=[0] * n)

    @classmethod
    def of(cls, candidate: Tokens, references: Sequence[Tokens], n: int) -> BleuStats:
        _check(candidate, references, n)
        stats = cls.empty(n)
        for order in range(1, n + 1):
            counts = _ngrams(candidate, order)
            max_ref: Counter[tuple[Hashable, ...]] = Counter()
            for ref in references:
                max_ref |= _ngrams(ref, order)
            stats.matches[order - 1] = sum(min(count, max_ref[gram]) for gram, count in counts.items())
            stats.totals[order - 1] = max(len(candidate) - order + 1, 0)
        stats.candidate_length = len(candidate)
        stats.reference_length = _closest_length(len(candidate), references)
        return stats

    def __add__(self, other: BleuStats) -> BleuStats:
        return BleuStats(
            matches=[a + b for a, b in zip(self.matches, other.matches, strict=True)],
            totals=[a + b for a, b in zip(self.totals, other.totals, strict=True)],
            candidate_length=self.candidate_length + other.candidate_length,
            reference_length=self.reference_length + other.reference_length,
        )

    def score(self) -> float:
        """Geometric mean of the precisions times the brevity penalty; 0 if any precision is 0."""
        if any(m == 0 or t == 0 for m, t in zip(self.matches, self.totals)):
            return 0.0
        log_precision = sum(math.log(m / t) for m, t in zip(self.matches, self.totals)) / len(self.matches)
        c, r = self.candidate_length, self.reference_length
        brevity = 1.0 if c > r else math.exp(1.0 - r / c)
        return brevity * math.exp(log_precision)


def bleu(candidate: Tokens, references: Sequence[Tokens], n: int = 4) -> float:
    """Sentence BLEU-``n`` without smoothing."""
    return BleuStats.of(candidate, references, n).score()


def corpus_bleu(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], n: int = 4) -> float:
    """BLEU-``n`` over clipped counts aggregated across the whole corpus."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    if not candidates:
        raise ValueError("corpus is empty")
    total = BleuStats.empty(n)
    for candidate, refs in zip(candidates, references):
        total = total + BleuStats.of(candidate, refs, n)
    return total.score()


def pixel_centers(image_size: int) -> FloatArray:
    coords = np.arange(image_size) + 0.5
    rows, cols = np.meshgrid(coords, coords, indexing="ij")
    return np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1)


def quad_masks(geometry: FloatArray, image_size: int) -> npt.NDArray[np.bool_]:
    """Rasterize ``(n, 4, 2)`` convex quads: pixel centres inside (or on) each quad."""
    points = pixel_centers(image_size)
    masks = np.empty((geometry.shape[0], points.shape[0]), dtype=bool)
    for index, quad in enumerate(geometry):
        shifted = np.roll(quad, -1, axis=0)
        if abs(float(np.sum(quad[:, 0] * shifted[:, 1] - shifted[:, 0] * quad[:, 1]))) < 1e-9:
            masks[index] = False
            continue
        crosses = []
        for k in range(4):
            a, b = quad[k], quad[(k + 1) % 4]
            crosses.append((b[0] - a[0]) * (points[:, 1] - a[1]) - (b[1] - a[1]) * (points[:, 0] - a[0]))
        stacked = np.stack(crosses)
        masks[index] = np.all(stacked >= -1e-9, axis=0) | np.all(stacked <= 1e-9, axis=0)
    return masks


def box_mask(box: Box, image_size: int) -> npt.NDArray[np.bool_]:
    row0, col0, row1, col1 = box
    points = pixel_centers(image_size)
    return np.asarray(
        (points[:, 0] >= row0) & (points[:, 0] < row1) & (points[:, 1] >= col0) & (points[:, 1] < col1),
        dtype=bool,
    )


def overlap_fractions(geometry: FloatArray, box: Box, image_size: int) -> FloatArray:
    """Share of each region's pixels that fall inside ``box`` (0 for empty regions)."""
    masks = quad_masks(geometry, image_size)
    target = box_mask(box, image_size)
    areas = masks.sum(axis=1)
    inside = (masks & target).sum(axis=1)
    return np.where(areas > 0, inside / np.maximum(areas, 1), 0.0)


def attention_correctness(
    region_dists: Sequence[FloatArray],
    geometry: FloatArray,
    alignments: Mapping[int, Box],
    image_size: int = 64,
) -> float:
    """Mean attention mass on the ground-truth box of each aligned token.

    A region contributes its weight times the fraction of its pixels inside
    the box.

    Raises:
        ValueError: If an aligned token index has no region distribution, or
            nothing is aligned.
    """
    if not alignments:
        raise ValueError("no aligned tokens to score")
    values = []
    for token_index, box in sorted(alignments.items()):
        if not 0 <= token_index < len(region_dists):
            raise ValueError(f"token index {token_index} outside the {len(region_dists)}-step trace")
        values.append(float(np.dot(region_dists[token_index], overlap_fractions(geometry, box, image_size))))
    return float(np.mean(values))


def uniform_attention_correctness(geometry: FloatArray, alignments: Mapping[int, Box], image_size: int = 64) -> float:
    """Attention correctness a uniform distribution over the same regions would score."""
    uniform = np.full(geometry.shape[0], 1.0 / geometry.shape[0])
    steps = max(alignments) + 1 if alignments else 0
    return attention_correctness([uniform] * steps, geometry, alignments, image_size)
