"""Attention overlays: one image per emitted token plus an SVG contact sheet.

Each overlay draws the outlines of the most attended regions on an upscaled
copy of the image, with stroke width ``1 + 6 * p(r | h)``.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
import base64
import io
import logging

from django.template.loader import render_to_string
from PIL import Image
import numpy as np
import numpy.typing as npt

from django_region_captioning.autodiff import FloatArray
from django_region_captioning.dataset import write_ppm
from django_region_captioning.decoding import AttentionTrace
from django_region_captioning.scenes import to_uint8

logger = logging.getLogger(__name__)

UPSCALE = 4
TOP_REGIONS = 5
BASE_STROKE = 1.0
STROKE_GAIN = 6.0
STROKE_COLOR = (255, 32, 32)
SVG_TEMPLATE = "region_captioning/attention.svg"


def stroke_width(weight: float) -> float:
    return BASE_STROKE + STROKE_GAIN * weight


@dataclass(frozen=True)
class DrawnRegion:
    index: int
    weight: float
    width: float
    corners: FloatArray


def top_regions(region_dist: FloatArray, geometry: FloatArray, k: int = TOP_REGIONS) -> list[DrawnRegion]:
    """The ``k`` heaviest regions with positive weight, heaviest first (lowest index on ties)."""
    order = sorted(range(len(region_dist)), key=lambda i: (-float(region_dist[i]), i))
    return [
        DrawnRegion(index=i, weight=float(region_dist[i]), width=stroke_width(float(region_dist[i])), corners=geometry[i])
        for i in order[:k]
        if region_dist[i] > 0.0
    ]


def upscale(image: FloatArray, factor: int = UPSCALE) -> npt.NDArray[np.uint8]:
    return to_uint8(np.repeat(np.repeat(image, factor, axis=0), factor, axis=1))


def png_data_uri(pixels: npt.NDArray[np.uint8]) -> str:
    """An RGB raster as an inline ``data:image/png;base64,...`` URI."""
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buffer.getvalue()).decode("ascii")


def _edge_distance(points: FloatArray, a: FloatArray, b: FloatArray) -> FloatArray:
    segment = b - a
    length2 = float(segment @ segment)
    t = np.zeros(points.shape[0]) if length2 == 0.0 else np.clip((points - a) @ segment / length2, 0.0, 1.0)
    nearest = a + t[:, None] * segment
    return np.asarray(np.linalg.norm(points - nearest, axis=1))


def outline_mask(corners: FloatArray, width: float, size: int) -> npt.NDArray[np.bool_]:
    """Pixels of a ``size``×``size`` canvas within ``width / 2`` of the quad's edges."""
    coords = np.arange(size) + 0.5
    rows, cols = np.meshgrid(coords, coords, indexing="ij")
    points = np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1)
    distance = np.min([_edge_distance(points, corners[k], corners[(k + 1) % 4]) for k in range(4)], axis=0)
    return np.asarray(distance <= width / 2.0).reshape(size, size)


def render_overlay(image: FloatArray, region_dist: FloatArray, geometry: FloatArray) -> npt.NDArray[np.uint8]:
    canvas = upscale(image)
    size = canvas.shape[0]
    # lightest first so heavier outlines stay on top
    for region in reversed(top_regions(region_dist, geometry)):
        mask = outline_mask(region.corners * UPSCALE, region.width, size)
        canvas[mask] = STROKE_COLOR
    return canvas


@dataclass(frozen=True)
class Panel:
    position: int
    token: str
    regions: list[DrawnRegion]
    x: int
    filename: str

    @property
    def polygons(self) -> list[dict[str, object]]:
        return [
            {
                "points": " ".join(f"{c * UPSCALE:.2f},{r * UPSCALE:.2f}" for r, c in region.corners),
                "width": f"{region.width:.3f}",
                "weight": f"{region.weight:.4f}",
            }
            for region in self.regions
        ]


def write_attention_sheet(
    out_dir: str | Path,
    image: FloatArray,
    tokens: Sequence[str],
    trace: AttentionTrace,
    *,
    image_id: str = "",
) -> list[Path]:
    """Write ``token_<t>.ppm`` per emitted token and ``attention.svg``; return the paths written.

    Raises:
        ValueError: If the trace and the token list differ in length.
    """
    if len(tokens) != len(trace):
        raise ValueError(f"{len(tokens)} tokens but {len(trace)} attention steps")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    size = image.shape[0] * UPSCALE
    written: list[Path] = []
    panels = []
    for position, (token, region_dist) in enumerate(zip(tokens, trace.region_dists)):
        path = out / f"token_{position:02d}.ppm"
        write_ppm(path, render_overlay(image, region_dist, trace.geometry))
        written.append(path)
        panels.append(
            Panel(
                position=position,
                token=token,
                regions=top_regions(region_dist, trace.geometry),
                x=position * (size + 8),
                filename=path.name,
            )
        )
    svg = render_to_string(
        SVG_TEMPLATE,
        {
            "image_id": image_id,
            "image_uri": png_data_uri(upscale(image)),
            "caption": " ".join(tokens),
            "panels": panels,
            "size": size,
            "width": max(len(panels), 1) * (size + 8),
            "height": size + 40,
        },
    )
    svg_path = out / "attention.svg"
    svg_path.write_text(svg, encoding="utf-8")
    written.append(svg_path)
    logger.info("Wrote %d overlay(s) and %s", len(panels), svg_path)
    return written
