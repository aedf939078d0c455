from argparse import ArgumentParser
import logging

from django.core.management.base import CommandError

from django_region_captioning.attention import Feedback
from django_region_captioning.checkpoint import save_checkpoint
from django_region_captioning.management.base import CaptioningCommand, sidecar
from django_region_captioning.manifests import tracked_run
from django_region_captioning.model import Ablation, ModelDims, RegionKind
from django_region_captioning.models import CaptioningRun, RunArtifact
from django_region_captioning.training import TrainConfig, fit, write_loss_csv

logger = logging.getLogger(__name__)


class Command(CaptioningCommand):
    """Train a captioning model on a scene dataset and save a checkpoint.

    Writes the checkpoint to ``--out``, the per-step loss to
    ``<out>.loss.csv`` and the run manifest to ``<out>.manifest.json``.
    """

    help = "Train a region-attention captioning model"

    def add_arguments(self, parser: ArgumentParser) -> None:
        parser.add_argument("--data", required=True, help="Training dataset (JSONL)")
        parser.add_argument(
            "--regions",
            choices=[k.value for k in RegionKind],
            default=RegionKind.GRID.value,
            help="Attention region provider (default: %(default)s)",
        )
        parser.add_argument(
            "--feedback",
            choices=[f.value for f in Feedback],
            default=None,
            help="Visual feedback (default: marginal for --ablation full, none otherwise)",
        )
        parser.add_argument(
            "--ablation",
            choices=[a.value for a in Ablation],
            default=Ablation.FULL.value,
            help="Interaction terms to train; the rest stay zero (default: %(default)s)",
        )
        parser.add_argument("--warmstart", help="Checkpoint to initialise shared parameters from")
        parser.add_argument("--steps", type=int, default=1000, help="Stage-2 steps (default: %(default)s)")
        parser.add_argument(
            "--stage1-steps",
            type=int,
            default=None,
            help="Stage-1 steps, encoder frozen (default: a quarter of --steps)",
        )
        parser.add_argument("--batch-size", type=int, default=8)
        parser.add_argument("--lr", type=float, default=1e-3)
        parser.add_argument("--grid-stride", type=int, default=1)
        parser.add_argument("--proposal-k", type=int, default=50, help="Proposals sampled per image while training")
        parser.add_argument("--proposals", help="Proposal boxes (JSONL); oracle boxes are generated when omitted")
        parser.add_argument("--flip", action="store_true", help="Random horizontal flips")
        parser.add_argument("--encoder-warmup-steps", type=int, default=0)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--out", required=True, help="Checkpoint path")

    def handle(
        self,
        *,
        data: str,
        regions: str,
        feedback: str | None,
        ablation: str,
        warmstart: str | None,
        steps: int,
        stage1_steps: int | None,
        batch_size: int,
        lr: float,
        grid_stride: int,
        proposal_k: int,
        proposals: str | None,
        flip: bool,
        encoder_warmup_steps: int,
        seed: int,
        out: str,
        verbosity: int,
        **options: object,
    ) -> None:
        self._configure_logging(verbosity)
        records = self._load_dataset(data)
        if not records:
            raise CommandError(f"Dataset is empty: {data}")
        source = self._load_checkpoint(warmstart) if warmstart else None
        boxes = self._load_proposals(proposals)
        try:
            config = TrainConfig(
                learning_rate=lr,
                batch_size=batch_size,
                stage1_steps=stage1_steps,
                stage2_steps=steps,
                region_kind=RegionKind(regions),
                feedback=None if feedback is None else Feedback(feedback),
                ablation=Ablation(ablation),
                proposal_k=proposal_k,
                grid_stride=grid_stride,
                seed=seed,
                flip=flip,
                encoder_warmup_steps=encoder_warmup_steps,
            )
        except ValueError as e:
            raise CommandError(str(e)) from e

        resolved = {**config.as_dict(), "data": data, "warmstart": warmstart, "proposals": proposals}
        with tracked_run(
            CaptioningRun.Command.TRAIN_CAPTIONER,
            seed=seed,
            config=resolved,
            manifest_path=sidecar(out, ".manifest.json"),
        ) as recorder:
            try:
                result = fit(
                    records,
                    config,
                    vocab=source.vocab if source else None,
                    warmstart=source.model if source else None,
                    proposals=boxes,
                    dims=_dims_like(source.model.dims, records[0].image.shape[0]) if source else None,
                )
            except ValueError as e:
                raise CommandError(str(e)) from e
            assert result.vocab is not None
            save_checkpoint(out, result.model, result.vocab, config.as_dict())
            write_loss_csv(sidecar(out, ".loss.csv"), result.trace)
            recorder.set_checkpoint(out)
            recorder.add_artifact(out, RunArtifact.Kind.CHECKPOINT)
            recorder.add_artifact(sidecar(out, ".loss.csv"), RunArtifact.Kind.LOSS_TRACE)
            final = result.trace[-1].loss if result.trace else None
            recorder.set_metrics({"final_loss": final, "steps": config.total_steps, "rejected_steps": result.rejected_steps})
        logger.info("Saved checkpoint %s", out)


def _dims_like(dims: ModelDims, image_size: int) -> ModelDims:
    if dims.image_size != image_size:
        raise CommandError(f"warm-start model expects {dims.image_size}px images, dataset has {image_size}px")
    return dims
