"""Attention regions: the descriptor matrix R plus per-region geometry.

Three providers build a :class:`RegionSet` from encoder output:

* the activation grid, one region per feature cell;
* object proposals, max-pooled over a higher-resolution feature map;
* a convolutional spatial transformer that regresses an affine transform per
  location, resamples a 3×3 anchor around it and reduces the patch with a 3×3
  filter.

All providers emit descriptors of width ``c``, so attention never needs to
know which one produced its regions.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, ClassVar
import json
import logging
import math
import zlib

import numpy as np

from django_region_captioning import ops
from django_region_captioning.autodiff import FloatArray, ShapeError, Tensor
from django_region_captioning.encoder import EncoderOutput, subsample_grid
from django_region_captioning.parameters import ParameterGroup, conv_kernel, zeros
from django_region_captioning.rng import PROPOSALS, substream

if TYPE_CHECKING:
    from django_region_captioning.scenes import SceneRecord

logger = logging.getLogger(__name__)

Box = tuple[float, float, float, float]

# 3×3 anchor taps in local (row, col) units, row-major to match the kh×kw kernel layout
ANCHOR_TAPS: tuple[tuple[int, int], ...] = tuple((dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1))
# anchor corners in the local frame [-1, 1]², clockwise from top-left
ANCHOR_CORNERS: tuple[tuple[float, float], ...] = ((-1.0, -1.0), (-1.0, 1.0), (1.0, 1.0), (1.0, -1.0))
AFFINE_SIZE = 6
WARMSTART_TRANSFORM = (2.0, 0.0, 0.0, 0.0, 2.0, 0.0)
IDENTITY_TRANSFORM = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


@dataclass(frozen=True)
class RegionSet:
    """Region descriptors (rows of ``R``) and their image-space quadrilaterals.

    ``geometry`` has shape ``(n_r, 4, 2)``: (row, col) pixel corners,
    clockwise from the top-left corner.
    """

    descriptors: Tensor
    geometry: FloatArray
    kind: str

    def __post_init__(self) -> None:
        if self.descriptors.ndim != 2:
            raise ShapeError(f"descriptors must be n_r×d_r, got shape {self.descriptors.shape}")
        if self.geometry.shape != (self.descriptors.shape[0], 4, 2):
            raise ShapeError(
                f"geometry shape {self.geometry.shape} does not match {self.descriptors.shape[0]} descriptor rows"
            )

    def __len__(self) -> int:
        return self.descriptors.shape[0]

    @property
    def width(self) -> int:
        return self.descriptors.shape[1]


@dataclass(frozen=True)
class ProposalBox:
    """A candidate object box in image pixels with an objectness score."""

    box: Box
    score: float

    def __post_init__(self) -> None:
        row0, col0, row1, col1 = self.box
        if not (row0 < row1 and col0 < col1):
            raise ValueError(f"proposal box must satisfy row0 < row1 and col0 < col1, got {self.box}")
        if not all(math.isfinite(v) for v in (*self.box, self.score)):
            raise ValueError(f"proposal box and score must be finite, got {self.box} / {self.score}")

    def clipped(self, image_size: int) -> ProposalBox:
        row0, col0, row1, col1 = (min(max(v, 0.0), float(image_size)) for v in self.box)
        if row1 <= row0 or col1 <= col0:
            # fully outside: keep a one-pixel box on the nearest edge
            row0 = min(row0, image_size - 1.0)
            col0 = min(col0, image_size - 1.0)
            row1, col1 = max(row1, row0 + 1.0), max(col1, col0 + 1.0)
        return ProposalBox(box=(row0, col0, row1, col1), score=self.score)

    def flipped(self, image_size: int) -> ProposalBox:
        row0, col0, row1, col1 = self.box
        return ProposalBox(box=(row0, image_size - col1, row1, image_size - col0), score=self.score)


def box_corners(row0: float, col0: float, row1: float, col1: float) -> FloatArray:
    return np.array([[row0, col0], [row0, col1], [row1, col1], [row1, col0]], dtype=np.float64)


def grid_geometry(height: int, width: int, image_size: int, stride: int = 1) -> FloatArray:
    """Boxes for cells ``0, stride, 2·stride, …`` of an H×W grid, in image pixels.

    Each box is the kept cell's back-projected centre ± half the cell stride,
    clipped to the image.
    """
    cell_h, cell_w = image_size / height, image_size / width
    boxes = []
    for i in range(0, height, stride):
        for j in range(0, width, stride):
            center_r, center_c = (i + 0.5) * cell_h, (j + 0.5) * cell_w
            half_r, half_c = 0.5 * stride * cell_h, 0.5 * stride * cell_w
            boxes.append(
                box_corners(
                    max(center_r - half_r, 0.0),
                    max(center_c - half_c, 0.0),
                    min(center_r + half_r, float(image_size)),
                    min(center_c + half_c, float(image_size)),
                )
            )
    return np.stack(boxes)


def grid_regions(gamma: Tensor, *, image_size: int = 64, stride: int = 1) -> RegionSet:
    """One region per activation-grid cell; descriptor = the cell's channel column."""
    kept = subsample_grid(gamma, stride)
    height, width, channels = kept.shape
    return RegionSet(
        descriptors=ops.reshape(kept, (height * width, channels)),
        geometry=grid_geometry(gamma.shape[0], gamma.shape[1], image_size, stride),
        kind="grid",
    )


def select_proposals(
    boxes: Sequence[ProposalBox],
    k: int,
    rng: np.random.Generator | None = None,
) -> list[ProposalBox]:
    """Pick ``k`` boxes: uniformly at random when ``rng`` is given, else top-k by score.

    The chosen boxes keep their order in ``boxes``. Score ties resolve to the
    earlier box.
    """
    if not boxes:
        raise ValueError("proposal list is empty")
    if not 1 <= k <= len(boxes):
        raise ValueError(f"k must lie in [1, {len(boxes)}], got {k}")
    if rng is not None:
        chosen = rng.choice(len(boxes), size=k, replace=False)
    else:
        scores = np.array([b.score for b in boxes])
        chosen = np.argsort(-scores, kind="stable")[:k]
    return [boxes[int(i)] for i in sorted(chosen)]


def feature_cells(box: ProposalBox, image_size: int, height: int, width: int) -> tuple[int, int, int, int]:
    """Map an image-pixel box to the covered feature cells ``[r0:r1, c0:c1]``.

    Degenerate results snap to the single cell nearest the box centre.
    """
    row0, col0, row1, col1 = box.clipped(image_size).box
    scale_r, scale_c = height / image_size, width / image_size
    r0, r1 = math.floor(row0 * scale_r), math.ceil(row1 * scale_r)
    c0, c1 = math.floor(col0 * scale_c), math.ceil(col1 * scale_c)
    r0, r1 = max(r0, 0), min(r1, height)
    c0, c1 = max(c0, 0), min(c1, width)
    if r1 <= r0:
        r0 = min(max(math.floor(0.5 * (row0 + row1) * scale_r), 0), height - 1)
        r1 = r0 + 1
    if c1 <= c0:
        c0 = min(max(math.floor(0.5 * (col0 + col1) * scale_c), 0), width - 1)
        c1 = c0 + 1
    return r0, c0, r1, c1


def proposal_regions(
    gamma_hires: Tensor,
    boxes: Sequence[ProposalBox],
    k: int,
    *,
    image_size: int = 64,
    rng: np.random.Generator | None = None,
) -> RegionSet:
    """Max-pool ``gamma_hires`` over each selected proposal.

    Raises:
        ValueError: If ``boxes`` is empty or ``k`` exceeds its length.
    """
    selected = select_proposals(boxes, k, rng)
    height, width = gamma_hires.shape[:2]
    rows: list[Tensor] = []
    geometry: list[FloatArray] = []
    for proposal in selected:
        cells = feature_cells(proposal, image_size, height, width)
        rows.append(ops.max_pool_region(gamma_hires, cells))
        geometry.append(box_corners(*proposal.clipped(image_size).box))
    return RegionSet(descriptors=ops.stack(rows), geometry=np.stack(geometry), kind="proposals")


@dataclass
class StnParams(ParameterGroup):
    """Localization network (two 3×3 convs, c → c with relu, then c → 6) and the 3×3 output filter."""

    loc1_w: Tensor
    loc1_b: Tensor
    loc2_w: Tensor
    loc2_b: Tensor
    out_w: Tensor
    out_b: Tensor

    @classmethod
    def initialize(cls, rng: np.random.Generator, channels: int) -> StnParams:
        return cls(
            loc1_w=conv_kernel(rng, 3, channels, channels),
            loc1_b=zeros(channels),
            loc2_w=conv_kernel(rng, 3, channels, AFFINE_SIZE),
            loc2_b=Tensor(np.array(WARMSTART_TRANSFORM), requires_grad=True),
            out_w=conv_kernel(rng, 3, channels, channels),
            out_b=zeros(channels),
        )

    @classmethod
    def warmstart(
        cls,
        rng: np.random.Generator,
        channels: int,
        transform: Sequence[float] = WARMSTART_TRANSFORM,
    ) -> StnParams:
        """Zero localization output weights, fixed transform bias, centre-tap identity filter."""
        params = cls.initialize(rng, channels)
        params.loc2_w = zeros(3, 3, channels, AFFINE_SIZE)
        params.loc2_b = Tensor(np.array(transform, dtype=np.float64), requires_grad=True)
        out_w = np.zeros((3, 3, channels, channels))
        out_w[1, 1] = np.eye(channels)
        params.out_w = Tensor(out_w, requires_grad=True)
        params.out_b = zeros(channels)
        return params

    @property
    def channels(self) -> int:
        return self.out_w.shape[3]


def _tap_matrix() -> FloatArray:
    # maps the 6 entries of A to the 9 (row, col) offsets of the anchor taps
    mapping = np.zeros((AFFINE_SIZE, 2 * len(ANCHOR_TAPS)))
    for k, (dr, dc) in enumerate(ANCHOR_TAPS):
        mapping[0, 2 * k], mapping[1, 2 * k], mapping[2, 2 * k] = dr, dc, 1.0
        mapping[3, 2 * k + 1], mapping[4, 2 * k + 1], mapping[5, 2 * k + 1] = dr, dc, 1.0
    return mapping


_TAP_MATRIX = _tap_matrix()


def affine_field(gamma: Tensor, stn: StnParams) -> Tensor:
    """Regress one affine transform per location: an H×W×6 field."""
    hidden = ops.relu(ops.conv2d(gamma, stn.loc1_w, stn.loc1_b, padding=1))
    return ops.conv2d(hidden, stn.loc2_w, stn.loc2_b, padding=1)


def sample_points(field: Tensor) -> Tensor:
    """Feature-space (row, col) sample points for every location's anchor taps: (H·W·9)×2."""
    height, width = field.shape[:2]
    base = np.zeros((height * width, 2 * len(ANCHOR_TAPS)))
    locations = np.indices((height, width)).reshape(2, -1).T
    base[:, 0::2] = locations[:, :1]
    base[:, 1::2] = locations[:, 1:]
    offsets = ops.matmul(ops.reshape(field, (height * width, AFFINE_SIZE)), ops.constant(_TAP_MATRIX))
    return ops.reshape(ops.add(offsets, ops.constant(base)), (height * width * len(ANCHOR_TAPS), 2))


def sample_patches(gamma: Tensor, field: Tensor) -> Tensor:
    """Bilinearly resample each location's transformed anchor: (H·W)×(9·c), taps major."""
    height, width, channels = gamma.shape
    samples = ops.bilinear_sample(gamma, sample_points(field))
    return ops.reshape(samples, (height * width, len(ANCHOR_TAPS) * channels))


def stn_geometry(transforms: FloatArray, image_size: int) -> FloatArray:
    """Back-project each location's transformed anchor corners to image pixels."""
    height, width = transforms.shape[:2]
    cell_h, cell_w = image_size / height, image_size / width
    quads = np.empty((height, width, 4, 2))
    for n, (pr, pc) in enumerate(ANCHOR_CORNERS):
        a = transforms
        quads[:, :, n, 0] = np.arange(height)[:, None] + a[..., 0] * pr + a[..., 1] * pc + a[..., 2]
        quads[:, :, n, 1] = np.arange(width)[None, :] + a[..., 3] * pr + a[..., 4] * pc + a[..., 5]
    quads[..., 0] = (quads[..., 0] + 0.5) * cell_h
    quads[..., 1] = (quads[..., 1] + 0.5) * cell_w
    return quads


def stn_regions(gamma: Tensor, stn: StnParams, *, image_size: int = 64, stride: int = 1) -> RegionSet:
    """Spatial-transformer regions, one per location (every ``stride``-th when subsampled).

    Raises:
        ShapeError: If the map is smaller than 3×3 or its depth does not match ``stn``.
    """
    height, width, channels = gamma.shape
    if height < 3 or width < 3:
        raise ShapeError(f"stn_regions requires a map of at least 3×3, got {gamma.shape}")
    if channels != stn.channels:
        raise ShapeError(f"stn_regions: map depth {channels} does not match filter depth {stn.channels}")
    field = affine_field(gamma, stn)
    patches = sample_patches(gamma, field)
    descriptors = ops.add(ops.matmul(patches, ops.reshape(stn.out_w, (len(ANCHOR_TAPS) * channels, channels))), stn.out_b)
    geometry = stn_geometry(field.data, image_size)
    if stride > 1:
        grid = subsample_grid(ops.reshape(descriptors, (height, width, channels)), stride)
        descriptors = ops.reshape(grid, (grid.shape[0] * grid.shape[1], channels))
        geometry = geometry[::stride, ::stride]
    return RegionSet(descriptors=descriptors, geometry=np.ascontiguousarray(geometry.reshape(-1, 4, 2)), kind="stn")


def box_iou(a: Box, b: Box) -> float:
    inter_h = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    inter_w = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = inter_h * inter_w
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def oracle_proposals(
    scene: SceneRecord,
    n_distractors: int = 48,
    jitter: float = 2.0,
    *,
    seed: int,
    image_size: int = 64,
) -> list[ProposalBox]:
    """Stand-in proposal generator: jittered ground-truth boxes plus random distractors.

    Ground-truth boxes score 1.0; distractors score in ``(0, 0.5)``.
    """
    if not scene.objects:
        raise ValueError(f"scene {scene.id!r} has no objects")
    if n_distractors < 0 or jitter < 0:
        raise ValueError("n_distractors and jitter must be non-negative")
    rng = substream(seed, PROPOSALS, zlib.crc32(scene.id.encode("utf-8")))
    boxes: list[ProposalBox] = []
    for obj in scene.objects:
        shift = rng.uniform(-jitter, jitter, size=4) if jitter > 0 else np.zeros(4)
        row0, col0, row1, col1 = (float(v) + float(d) for v, d in zip(obj.box, shift))
        boxes.append(_valid_box(row0, col0, row1, col1, 1.0).clipped(image_size))
    for _ in range(n_distractors):
        r = np.sort(rng.uniform(0.0, image_size, size=2))
        c = np.sort(rng.uniform(0.0, image_size, size=2))
        score = float(rng.uniform(0.0, 0.5))
        boxes.append(_valid_box(float(r[0]), float(c[0]), float(r[1]), float(c[1]), max(score, 1e-6)))
    return boxes


def _valid_box(row0: float, col0: float, row1: float, col1: float, score: float) -> ProposalBox:
    if row1 - row0 < 1.0:
        row1 = row0 + 1.0
    if col1 - col0 < 1.0:
        col1 = col0 + 1.0
    return ProposalBox(box=(row0, col0, row1, col1), score=score)


def load_proposals(path: str | Path) -> dict[str, list[ProposalBox]]:
    """Read proposals from JSON lines ``{"image_id": str, "boxes": [[r0, c0, r1, c1, score], ...]}``."""
    proposals: dict[str, list[ProposalBox]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                boxes = [ProposalBox(box=(b[0], b[1], b[2], b[3]), score=b[4]) for b in record["boxes"]]
                proposals[str(record["image_id"])] = boxes
            except (ValueError, KeyError, IndexError, TypeError) as e:
                raise ValueError(f"{path}:{line_number}: malformed proposal record ({e})") from e
    logger.debug("Loaded proposals for %d image(s) from %s", len(proposals), path)
    return proposals


def dump_proposals(path: str | Path, proposals: Iterable[tuple[str, Sequence[ProposalBox]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, boxes in proposals:
            payload = {"image_id": image_id, "boxes": [[*b.box, b.score] for b in boxes]}
            fh.write(json.dumps(payload) + "\n")


@dataclass(frozen=True)
class RegionContext:
    """Per-image inputs a provider may need beyond the encoder output."""

    image_size: int = 64
    stride: int = 1
    proposals: Sequence[ProposalBox] = ()
    proposal_k: int = 50
    rng: np.random.Generator | None = field(default=None, compare=False)


class GridProvider:
    kind: ClassVar[str] = "grid"
    uses_hires: ClassVar[bool] = False

    def build(self, encoded: EncoderOutput, stn: StnParams | None, context: RegionContext) -> RegionSet:
        return grid_regions(encoded.gamma, image_size=context.image_size, stride=context.stride)


class ProposalProvider:
    kind: ClassVar[str] = "proposals"
    uses_hires: ClassVar[bool] = True

    def build(self, encoded: EncoderOutput, stn: StnParams | None, context: RegionContext) -> RegionSet:
        if encoded.gamma_hires is None:
            raise ValueError("proposal regions need the high-resolution feature map")
        k = min(context.proposal_k, len(context.proposals)) if context.proposals else context.proposal_k
        return proposal_regions(
            encoded.gamma_hires,
            context.proposals,
            k,
            image_size=context.image_size,
            rng=context.rng,
        )


class SpatialTransformerProvider:
    kind: ClassVar[str] = "stn"
    uses_hires: ClassVar[bool] = False

    def build(self, encoded: EncoderOutput, stn: StnParams | None, context: RegionContext) -> RegionSet:
        if stn is None:
            raise ValueError("spatial transformer regions need StnParams")
        return stn_regions(encoded.gamma, stn, image_size=context.image_size, stride=context.stride)


