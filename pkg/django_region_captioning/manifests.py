"""Run manifests: every command invocation becomes a ``CaptioningRun`` row plus a JSON file."""

from __future__ import annotations

from collections.abc import Iterator, Mapping
from contextlib import contextmanager
from pathlib import Path
from typing import Any
import json
import logging

from django.db import transaction
from django.utils import timezone

from django_region_captioning.models import CaptioningRun, RunArtifact

logger = logging.getLogger(__name__)


class RunRecorder:
    """Handle yielded by :func:`tracked_run` for recording results as the command goes."""

    def __init__(self, run: CaptioningRun) -> None:
        self.run = run

    def add_artifact(self, path: str | Path, kind: RunArtifact.Kind) -> RunArtifact:
        """Point ``path`` at this run, taking it over from any earlier run that wrote it."""
        artifact, _ = RunArtifact.objects.update_or_create(
            path=str(path),
            defaults={"run": self.run, "kind": kind},
        )
        return artifact

    def set_metrics(self, metrics: Mapping[str, Any]) -> None:
        self.run.metrics = dict(metrics)

    def set_checkpoint(self, path: str | Path) -> None:
        self.run.checkpoint_path = str(path)


@contextmanager
def tracked_run(
    command: CaptioningRun.Command,
    *,
    seed: int | None = None,
    config: Mapping[str, Any] | None = None,
    manifest_path: str | Path | None = None,
) -> Iterator[RunRecorder]:
    """Record a command run from start to finish.

    On success the run is marked succeeded and, if ``manifest_path`` is given,
    its manifest is written there and registered as an artifact. Exceptions
    mark the run failed and propagate.
    """
    run = CaptioningRun.objects.create(command=command, seed=seed, config=dict(config or {}))
    recorder = RunRecorder(run)
    try:
        yield recorder
    except Exception as e:
        logger.exception("Run %s (%s) failed", run.id, command)
        run.status = CaptioningRun.Status.FAILED
        run.error = f"{type(e).__name__}: {e}"
        run.finished_at = timezone.now()
        run.save()
        raise
    with transaction.atomic():
        if manifest_path is not None:
            recorder.add_artifact(manifest_path, RunArtifact.Kind.MANIFEST)
        run.status = CaptioningRun.Status.SUCCEEDED
        run.finished_at = timezone.now()
        run.save()
    if manifest_path is not None:
        Path(manifest_path).write_text(json.dumps(run.to_manifest(), indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Run %s (%s) succeeded", run.id, command)
