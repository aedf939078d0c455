from typing import Any
import uuid

from django.db import models


class CaptioningRun(models.Model):
    """A persistent record of one management-command run.

    Each row is the manifest of a single invocation: the resolved options, the
    seed, the checkpoint it produced or read, the metrics it computed and the
    artifacts it wrote (see :class:`RunArtifact`).
    """

    class Command(models.TextChoices):
        GENERATE_SCENES = "generate_scenes", "Generate scenes"
        TRAIN_CAPTIONER = "train_captioner", "Train captioner"
        EVALUATE_CAPTIONER = "evaluate_captioner", "Evaluate captioner"
        VISUALIZE_ATTENTION = "visualize_attention", "Visualize attention"
        SWEEP_REGIONS = "sweep_regions", "Sweep regions"
        RUN_ABLATION = "run_ablation", "Run ablation"

    class Status(models.TextChoices):
        RUNNING = "running", "Running"
        SUCCEEDED = "succeeded", "Succeeded"
        FAILED = "failed", "Failed"

    id = models.UUIDField(primary_key=True, default=uuid.uuid4, editable=False)
    command = models.CharField(max_length=32, choices=Command.choices)
    status = models.CharField(max_length=20, choices=Status.choices, default=Status.RUNNING)

    seed = models.PositiveIntegerField(null=True, blank=True)
    config = models.JSONField(default=dict, blank=True)
    checkpoint_path = models.CharField(max_length=500, blank=True, default="")
    metrics = models.JSONField(default=dict, blank=True)
    error = models.TextField(blank=True, default="")

    started_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ["-started_at"]
        indexes = [
            models.Index(fields=["command", "started_at"], name="captioning_run_cmd_idx"),
        ]

    def __str__(self) -> str:
        return f"{self.command} [{self.status}]"

    def to_manifest(self) -> dict[str, Any]:
        """JSON-serialisable manifest of this run and its artifacts."""
        return {
            "id": str(self.id),
            "command": self.command,
            "status": self.status,
            "seed": self.seed,
            "config": self.config,
            "checkpoint_path": self.checkpoint_path,
            "metrics": self.metrics,
            "started_at": self.started_at.isoformat() if self.started_at else None,
            "finished_at": self.finished_at.isoformat() if self.finished_at else None,
            "artifacts": [{"path": a.path, "kind": a.kind} for a in self.artifacts.order_by("path")],
        }


class RunArtifact(models.Model):
    """A file written by a run. Each path belongs to exactly one run: the newest one that wrote it."""

    class Kind(models.TextChoices):
        DATASET = "dataset", "Dataset"
        CHECKPOINT = "checkpoint", "Checkpoint"
        LOSS_TRACE = "loss_trace", "Loss trace"
        MANIFEST = "manifest", "Manifest"
        METRICS = "metrics", "Metrics"
        DECODES = "decodes", "Decodes"
        IMAGE = "image", "Image"
        OVERLAY = "overlay", "Overlay"
        SVG = "svg", "SVG"
        SWEEP = "sweep", "Sweep"
        ABLATION = "ablation", "Ablation"

    run = models.ForeignKey(
        CaptioningRun,
        on_delete=models.CASCADE,
        related_name="artifacts",
    )
    path = models.CharField(max_length=500, unique=True)
    kind = models.CharField(max_length=20, choices=Kind.choices)
    created_at = models.DateTimeField(auto_now_add=True)

    def __str__(self) -> str:
        return f"{self.path} ({self.kind})"
