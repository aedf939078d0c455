"""Synthetic captioned scenes: coloured shapes on textured backgrounds.

Every scene is a pure function of its integer seed. Captions come from a small
template grammar whose spatial relations are read off the object geometry, and
each shape noun is aligned to the object it names.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import logging

import numpy as np
import numpy.typing as npt

from django_region_captioning.autodiff import FloatArray
from django_region_captioning.regions import box_iou
from django_region_captioning.rng import CAPTIONS, DATA, substream

logger = logging.getLogger(__name__)

IMAGE_SIZE = 64
SUPERSAMPLE = 4
MAX_OBJECTS = 3
MAX_IOU = 0.2
PLACEMENT_ATTEMPTS = 200
TEXTURE_PERIOD = 8

SHAPES = ("circle", "square", "triangle")
COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.12, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.88, 0.10),
}
SIZES: dict[str, tuple[int, int]] = {
    "small": (12, 16),
    "large": (20, 26),
}
BACKGROUNDS = ("plain", "stripes", "checker", "noise")
MIRRORED_TOKENS = {"left": "right", "right": "left"}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    box: tuple[float, float, float, float]

    @property
    def center(self) -> tuple[float, float]:
        row0, col0, row1, col1 = self.box
        return 0.5 * (row0 + row1), 0.5 * (col0 + col1)

    def describe(self, *, with_size: bool = True) -> list[str]:
        return ["a", self.size, self.color, self.shape] if with_size else ["a", self.color, self.shape]

    def mirrored(self, image_size: int = IMAGE_SIZE) -> SceneObject:
        row0, col0, row1, col1 = self.box
        return replace(self, box=(row0, image_size - col1, row1, image_size - col0))


@dataclass(frozen=True)
class Background:
    kind: str
    level: float
    contrast: float
    texture_seed: int


@dataclass(frozen=True)
class SceneRecord:
    """One rendered scene with reference captions and noun alignments.

    ``alignments[k]`` maps token positions of ``captions[k]`` to indices into
    ``objects``.
    """

    id: str
    objects: tuple[SceneObject, ...]
    background: Background
    captions: tuple[tuple[str, ...], ...]
    alignments: tuple[dict[int, int], ...]
    image: npt.NDArray[np.uint8] = field(repr=False, compare=False)
    seed: int | None = None
    mirrored: bool = False

    @property
    def gt_boxes(self) -> list[tuple[float, float, float, float]]:
        return [obj.box for obj in self.objects]

    def pixels(self) -> FloatArray:
        """The 64×64×3 render as reals in ``[0, 1]``."""
        return self.image.astype(np.float64) / 255.0

    def render(self, size: int) -> FloatArray:
        """Re-render the scene at ``size``×``size`` (e.g. 128 for the high-resolution pathway)."""
        return render_scene(self.objects, self.background, size=size, mirrored=self.mirrored)

    def flipped(self) -> SceneRecord:
        """Mirror left-right: image, boxes and the left/right caption tokens."""
        captions = tuple(tuple(MIRRORED_TOKENS.get(token, token) for token in caption) for caption in self.captions)
        return replace(
            self,
            objects=tuple(obj.mirrored() for obj in self.objects),
            captions=captions,
            image=np.ascontiguousarray(self.image[:, ::-1]),
            mirrored=not self.mirrored,
        )


def relation(subject: SceneObject, reference: SceneObject) -> tuple[str, ...]:
    """Spatial relation of ``subject`` to ``reference`` along the dominant axis of their centre offset."""
    (sr, sc), (rr, rc) = subject.center, reference.center
    if abs(sc - rc) >= abs(sr - rr):
        return ("left", "of") if sc < rc else ("right", "of")
    return ("above",) if sr < rr else ("below",)


def _caption(objects: tuple[SceneObject, ...], variant: int) -> tuple[tuple[str, ...], dict[int, int]]:
    tokens: list[str] = ["there", "is"] if variant == 2 else []
    alignment: dict[int, int] = {}
    with_size = variant != 1

    def mention(index: int) -> None:
        tokens.extend(objects[index].describe(with_size=with_size))
        alignment[len(tokens) - 1] = index

    mention(0)
    if len(objects) > 1:
        tokens.extend(relation(objects[0], objects[1]))
        mention(1)
    for index in range(2, len(objects)):
        tokens.append("and")
        mention(index)
    return tuple(tokens), alignment


def _place(rng: np.random.Generator, placed: list[SceneObject], image_size: int) -> SceneObject | None:
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    color = list(COLORS)[int(rng.integers(len(COLORS)))]
    size = list(SIZES)[int(rng.integers(len(SIZES)))]
    low, high = SIZES[size]
    for _ in range(PLACEMENT_ATTEMPTS):
        side = int(rng.integers(low, high + 1))
        row0 = int(rng.integers(0, image_size - side + 1))
        col0 = int(rng.integers(0, image_size - side + 1))
        candidate = SceneObject(shape, color, size, (float(row0), float(col0), float(row0 + side), float(col0 + side)))
        if all(box_iou(candidate.box, other.box) <= MAX_IOU for other in placed):
            return candidate
    return None


def _shape_mask(obj: SceneObject, rows: FloatArray, cols: FloatArray) -> npt.NDArray[np.bool_]:
    row0, col0, row1, col1 = obj.box
    center_r, center_c = obj.center
    if obj.shape == "circle":
        radius = 0.5 * (row1 - row0)
        return np.asarray((rows - center_r) ** 2 + (cols - center_c) ** 2 <= radius * radius, dtype=bool)
    inside = (rows >= row0) & (rows <= row1) & (cols >= col0) & (cols <= col1)
    if obj.shape == "square":
        return np.asarray(inside, dtype=bool)
    # apex at top centre, base along the bottom edge
    half_width = 0.5 * (col1 - col0) * (rows - row0) / (row1 - row0)
    return np.asarray(inside & (np.abs(cols - center_c) <= half_width), dtype=bool)


def _background(background: Background, rows: FloatArray, cols: FloatArray) -> FloatArray:
    base_r = np.clip(np.floor(rows), 0, IMAGE_SIZE - 1).astype(np.intp)
    base_c = np.clip(np.floor(cols), 0, IMAGE_SIZE - 1).astype(np.intp)
    if background.kind == "plain":
        pattern = np.zeros_like(rows)
    elif background.kind == "stripes":
        pattern = (base_c // TEXTURE_PERIOD) % 2 * 1.0
    elif background.kind == "checker":
        pattern = ((base_r // TEXTURE_PERIOD + base_c // TEXTURE_PERIOD) % 2) * 1.0
    elif background.kind == "noise":
        texture = np.random.default_rng(background.texture_seed).uniform(0.0, 1.0, size=(IMAGE_SIZE, IMAGE_SIZE))
        pattern = texture[base_r, base_c]
    else:
        raise ValueError(f"Unknown background kind: {background.kind!r}")
    gray = background.level + background.contrast * (pattern - 0.5)
    return np.repeat(gray[..., np.newaxis], 3, axis=-1)


def render_scene(
    objects: tuple[SceneObject, ...] | list[SceneObject],
    background: Background,
    *,
    size: int = IMAGE_SIZE,
    mirrored: bool = False,
) -> FloatArray:
    """Rasterize at ``size``×``size`` with 4× supersampling; returns reals in ``[0, 1]``.

    Coordinates are in 64-pixel scene units whatever the output size.
    """
    fine = size * SUPERSAMPLE
    coords = (np.arange(fine) + 0.5) * (IMAGE_SIZE / fine)
    rows, cols = np.meshgrid(coords, coords, indexing="ij")
    texture_cols = IMAGE_SIZE - cols if mirrored else cols
    canvas = _background(background, rows, texture_cols)
    for obj in objects:
        mask = _shape_mask(obj, rows, cols)
        canvas[mask] = COLORS[obj.color]
    image = canvas.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE, 3).mean(axis=(1, 3))
    return np.clip(image, 0.0, 1.0)


def to_uint8(image: FloatArray) -> npt.NDArray[np.uint8]:
    return np.asarray(np.round(image * 255.0), dtype=np.uint8)


def generate_scene(seed: int, *, scene_id: str | None = None) -> SceneRecord:
    """Build the scene for ``seed``: 1–3 objects, a background and three reference captions."""
    rng = substream(seed, DATA)
    n_objects = int(rng.integers(1, MAX_OBJECTS + 1))
    placed: list[SceneObject] = []
    for _ in range(n_objects):
        obj = _place(rng, placed, IMAGE_SIZE)
        if obj is None:
            logger.debug("Scene seed %d: gave up placing object %d", seed, len(placed) + 1)
            break
        placed.append(obj)
    background = Background(
        kind=BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))],
        level=float(rng.uniform(0.35, 0.65)),
        contrast=float(rng.uniform(0.1, 0.3)),
        texture_seed=int(rng.integers(2**31)),
    )
    # caption subject order is shuffled so "left of" and "right of" both occur
    order = substream(seed, CAPTIONS).permutation(len(placed))
    objects = tuple(placed[int(i)] for i in order)
    captions, alignments = zip(*(_caption(objects, variant) for variant in range(3)), strict=True)
    image = render_scene(objects, background)
    return SceneRecord(
        id=scene_id if scene_id is not None else f"scene-{seed}",
        objects=objects,
        background=background,
        captions=tuple(captions),
        alignments=tuple(alignments),
        image=to_uint8(image),
        seed=seed,
    )


def scene_seeds(seed: int, n: int) -> list[int]:
    """Per-scene generator seeds for a dataset of ``n`` scenes drawn from ``seed``."""
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    return [int(substream(seed, DATA, index).integers(2**31)) for index in range(n)]


def generate_scenes(seed: int, n: int) -> list[SceneRecord]:
    return [generate_scene(scene_seed, scene_id=f"{index:06d}") for index, scene_seed in enumerate(scene_seeds(seed, n))]
