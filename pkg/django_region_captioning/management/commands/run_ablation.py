from argparse import ArgumentParser
from dataclasses import astuple, fields
import csv
import json
import logging

from django.core.management.base import CommandError

from django_region_captioning.evaluation import LADDER, AblationRow, run_ablation_ladder
from django_region_captioning.management.base import CaptioningCommand, json_safe, sidecar
from django_region_captioning.manifests import tracked_run
from django_region_captioning.models import CaptioningRun, RunArtifact

logger = logging.getLogger(__name__)


class Command(CaptioningCommand):
    """Train and score every ablation variant over several seeds on one generated benchmark.

    Writes one CSV row per (variant, seed) to ``--out`` and the per-variant
    seed means to ``<out>.summary.json``.
    """

    help = "Run the attention ablation ladder"

    def add_arguments(self, parser: ArgumentParser) -> None:
        parser.add_argument("--n", type=int, default=2000, help="Benchmark scenes, 20%% held out (default: %(default)s)")
        parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="Training seeds")
        parser.add_argument("--steps", type=int, default=1000, help="Training steps per variant")
        parser.add_argument("--batch-size", type=int, default=8)
        parser.add_argument("--data-seed", type=int, default=0)
        parser.add_argument("--variants", nargs="+", choices=[v.name for v in LADDER], help="Subset of variants")
        parser.add_argument("--out", required=True, help="CSV path")

    def handle(
        self,
        *,
        n: int,
        seeds: list[int],
        steps: int,
        batch_size: int,
        data_seed: int,
        variants: list[str] | None,
        out: str,
        verbosity: int,
        **options: object,
    ) -> None:
        self._configure_logging(verbosity)
        config = {
            "n": n,
            "seeds": seeds,
            "steps": steps,
            "batch_size": batch_size,
            "data_seed": data_seed,
            "variants": variants,
        }
        summary_path = sidecar(out, ".summary.json")
        with tracked_run(
            CaptioningRun.Command.RUN_ABLATION,
            seed=data_seed,
            config=config,
            manifest_path=sidecar(out, ".manifest.json"),
        ) as recorder:
            try:
                rows, means = run_ablation_ladder(
                    n,
                    seeds,
                    steps,
                    data_seed=data_seed,
                    batch_size=batch_size,
                    variants=variants,
                )
            except ValueError as e:
                raise CommandError(str(e)) from e
            summary = json_safe(means)
            with open(out, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow([f.name for f in fields(AblationRow)])
                for row in rows:
                    writer.writerow([repr(v) if isinstance(v, float) else v for v in astuple(row)])
            summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            recorder.add_artifact(out, RunArtifact.Kind.ABLATION)
            recorder.add_artifact(summary_path, RunArtifact.Kind.METRICS)
            recorder.set_metrics(summary)
        logger.info("Ablation ladder: %d run(s) written to %s", len(rows), out)
