from __future__ import annotations

from collections.abc import Mapping
from pathlib import Path
from typing import Any
import logging
import math

from django.core.management.base import BaseCommand, CommandError

from django_region_captioning.checkpoint import Checkpoint, CheckpointError, load_checkpoint
from django_region_captioning.dataset import DatasetFormatError, read_dataset
from django_region_captioning.regions import ProposalBox, load_proposals
from django_region_captioning.scenes import SceneRecord


class CaptioningCommand(BaseCommand):
    """Shared plumbing for the package's management commands.

    Domain errors raised while loading inputs surface as ``CommandError`` so
    the command exits with status 1 and a one-line message.
    """

    def _configure_logging(self, verbosity: int) -> None:
        pkg_logger = logging.getLogger("django_region_captioning")
        if verbosity == 0:
            pkg_logger.setLevel(logging.CRITICAL)
        elif verbosity == 1:
            pkg_logger.setLevel(logging.INFO)
        else:
            pkg_logger.setLevel(logging.DEBUG)

        if not pkg_logger.hasHandlers():
            pkg_logger.addHandler(logging.StreamHandler(self.stdout))

    def _load_dataset(self, path: str) -> list[SceneRecord]:
        if not Path(path).is_file():
            raise CommandError(f"Dataset not found: {path}")
        try:
            return read_dataset(path)
        except DatasetFormatError as e:
            raise CommandError(str(e)) from e

    def _load_checkpoint(self, path: str) -> Checkpoint:
        if not Path(path).is_file():
            raise CommandError(f"Checkpoint not found: {path}")
        try:
            return load_checkpoint(path)
        except CheckpointError as e:
            raise CommandError(str(e)) from e

    def _load_proposals(self, path: str | None) -> dict[str, list[ProposalBox]] | None:
        if path is None:
            return None
        try:
            return load_proposals(path)
        except (OSError, ValueError) as e:
            raise CommandError(f"Cannot read proposals: {e}") from e


def sidecar(path: str | Path, suffix: str) -> Path:
    """``<path><suffix>``, e.g. ``model.ckpt`` → ``model.ckpt.loss.csv``."""
    return Path(f"{path}{suffix}")


def json_safe(values: Mapping[str, Any]) -> dict[str, Any]:
    """Replace NaN (e.g. attention correctness with nothing aligned) by ``None`` so the output stays valid JSON."""
    return {
        key: json_safe(value) if isinstance(value, Mapping) else None if isinstance(value, float) and math.isnan(value) else value
        for key, value in values.items()
    }
