"""JSON-lines dataset files and PPM export.

One scene per line::

    {"id": "000000", "image": "<base64 RGB8>" | 1234, "captions": [...],
     "gt_boxes": [[r0, c0, r1, c1], ...], "alignments": [{"3": 0}, ...],
     "objects": [...], "background": {...}}

An integer ``image`` is a generator seed; the reader re-renders the scene from
it. A string is the base64 of the raw 64×64×3 RGB bytes.
"""

from __future__ import annotations

from collections.abc import Iterable, Iterator
from enum import StrEnum
from pathlib import Path
from typing import Any
import base64
import binascii
import json
import logging

import numpy as np
import numpy.typing as npt

from django_region_captioning.scenes import IMAGE_SIZE, Background, SceneObject, SceneRecord, generate_scene

logger = logging.getLogger(__name__)


class DatasetFormatError(ValueError):
    """A dataset line could not be parsed; ``line_number`` is 1-based."""

    def __init__(self, path: str | Path, line_number: int, reason: str) -> None:
        self.path = str(path)
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"{path}:{line_number}: {reason}")


class ImageForm(StrEnum):
    PIXELS = "pixels"
    SEED = "seed"


def record_to_json(record: SceneRecord, form: ImageForm = ImageForm.PIXELS) -> dict[str, Any]:
    if form is ImageForm.SEED:
        if record.seed is None or record.mirrored:
            raise ValueError(f"scene {record.id!r} has no generator seed; write it in pixel form")
        image: str | int = record.seed
    else:
        image = base64.b64encode(record.image.tobytes()).decode("ascii")
    return {
        "id": record.id,
        "image": image,
        "captions": [" ".join(caption) for caption in record.captions],
        "gt_boxes": [list(box) for box in record.gt_boxes],
        "alignments": [{str(k): v for k, v in sorted(alignment.items())} for alignment in record.alignments],
        "objects": [{"shape": o.shape, "color": o.color, "size": o.size} for o in record.objects],
        "background": {
            "kind": record.background.kind,
            "level": record.background.level,
            "contrast": record.background.contrast,
            "texture_seed": record.background.texture_seed,
        },
        "mirrored": record.mirrored,
    }


def record_from_json(payload: dict[str, Any]) -> SceneRecord:
    """Rebuild a record; raises ``KeyError``/``TypeError``/``ValueError`` on malformed input."""
    scene_id = str(payload["id"])
    image = payload["image"]
    if isinstance(image, int) and not isinstance(image, bool):
        return generate_scene(image, scene_id=scene_id)
    if not isinstance(image, str):
        raise TypeError("image must be a base64 string or an integer seed")
    raw = base64.b64decode(image, validate=True)
    expected = IMAGE_SIZE * IMAGE_SIZE * 3
    if len(raw) != expected:
        raise ValueError(f"image holds {len(raw)} bytes, expected {expected}")
    pixels: npt.NDArray[np.uint8] = np.frombuffer(raw, dtype=np.uint8).reshape(IMAGE_SIZE, IMAGE_SIZE, 3).copy()
    boxes = [tuple(float(v) for v in box) for box in payload["gt_boxes"]]
    described = payload["objects"]
    if len(described) != len(boxes):
        raise ValueError("objects and gt_boxes differ in length")
    objects = tuple(
        SceneObject(shape=o["shape"], color=o["color"], size=o["size"], box=(b[0], b[1], b[2], b[3]))
        for o, b in zip(described, boxes, strict=True)
    )
    bg = payload["background"]
    captions = tuple(tuple(str(c).split()) for c in payload["captions"])
    alignments = tuple({int(k): int(v) for k, v in a.items()} for a in payload["alignments"])
    if len(alignments) != len(captions):
        raise ValueError("captions and alignments differ in length")
    for caption, alignment in zip(captions, alignments, strict=True):
        for token_index, object_index in alignment.items():
            if not (0 <= token_index < len(caption) and 0 <= object_index < len(objects)):
                raise ValueError(f"alignment {token_index}->{object_index} out of range")
    return SceneRecord(
        id=scene_id,
        objects=objects,
        background=Background(
            kind=str(bg["kind"]),
            level=float(bg["level"]),
            contrast=float(bg["contrast"]),
            texture_seed=int(bg["texture_seed"]),
        ),
        captions=captions,
        alignments=alignments,
        image=pixels,
        mirrored=bool(payload.get("mirrored", False)),
    )


def write_dataset(path: str | Path, records: Iterable[SceneRecord], form: ImageForm = ImageForm.PIXELS) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_json(record, form), separators=(",", ":")) + "\n")
            count += 1
    logger.info("Wrote %d scene(s) to %s", count, path)
    return count


def iter_dataset(path: str | Path) -> Iterator[SceneRecord]:
    """Yield records in file order.

    Raises:
        DatasetFormatError: At the first malformed line.
    """
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
                if not isinstance(payload, dict):
                    raise TypeError("line is not a JSON object")
                yield record_from_json(payload)
            except (ValueError, KeyError, TypeError, IndexError, binascii.Error) as e:
                raise DatasetFormatError(path, line_number, f"{type(e).__name__}: {e}") from e


def read_dataset(path: str | Path) -> list[SceneRecord]:
    records = list(iter_dataset(path))
    logger.debug("Read %d scene(s) from %s", len(records), path)
    return records


def write_ppm(path: str | Path, image: npt.NDArray[np.uint8]) -> None:
    """Write an H×W×3 ``uint8`` image as binary PPM (P6)."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"PPM export needs an H×W×3 uint8 image, got {image.shape} {image.dtype}")
    height, width = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path: str | Path) -> npt.NDArray[np.uint8]:
    """Read a PPM in the layout :func:`write_ppm` produces."""
    magic, size, depth, payload = Path(path).read_bytes().split(b"\n", 3)
    if magic != b"P6" or depth != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    width, height = (int(v) for v in size.split())
    return np.frombuffer(payload[: width * height * 3], dtype=np.uint8).reshape(height, width, 3).copy()
