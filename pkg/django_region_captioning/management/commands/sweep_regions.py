from argparse import ArgumentParser
from dataclasses import astuple, fields
import csv
import logging

from django.core.management.base import CommandError

from django_region_captioning.evaluation import SweepRow, sweep_region_counts
from django_region_captioning.management.base import CaptioningCommand, sidecar
from django_region_captioning.manifests import tracked_run
from django_region_captioning.models import CaptioningRun, RunArtifact

logger = logging.getLogger(__name__)


def _int_list(value: str) -> list[int]:
    return [int(part) for part in value.split(",") if part.strip()]


class Command(CaptioningCommand):
    help = "Evaluate a checkpoint at several region counts and write a CSV"

    def add_arguments(self, parser: ArgumentParser) -> None:
        parser.add_argument("--ckpt", required=True)
        parser.add_argument("--data", required=True)
        group = parser.add_mutually_exclusive_group(required=True)
        group.add_argument("--strides", type=_int_list, help="Comma-separated grid strides, e.g. 1,2,4,8")
        group.add_argument("--proposal-counts", type=_int_list, help="Comma-separated top-k proposal counts")
        parser.add_argument("--out", required=True, help="CSV path")
        parser.add_argument("--beam", type=int, default=1)
        parser.add_argument("--max-len", type=int, default=20)
        parser.add_argument("--proposals")
        parser.add_argument("--seed", type=int, default=0)

    def handle(
        self,
        *,
        ckpt: str,
        data: str,
        strides: list[int] | None,
        proposal_counts: list[int] | None,
        out: str,
        beam: int,
        max_len: int,
        proposals: str | None,
        seed: int,
        verbosity: int,
        **options: object,
    ) -> None:
        self._configure_logging(verbosity)
        checkpoint = self._load_checkpoint(ckpt)
        records = self._load_dataset(data)
        boxes = self._load_proposals(proposals)
        config = {"ckpt": ckpt, "data": data, "strides": strides, "proposal_counts": proposal_counts, "beam": beam}
        with tracked_run(
            CaptioningRun.Command.SWEEP_REGIONS,
            seed=seed,
            config=config,
            manifest_path=sidecar(out, ".manifest.json"),
        ) as recorder:
            recorder.set_checkpoint(ckpt)
            try:
                rows = sweep_region_counts(
                    checkpoint.model,
                    checkpoint.vocab,
                    records,
                    strides=strides or (),
                    proposal_counts=proposal_counts or (),
                    beam=beam,
                    max_len=max_len,
                    proposals=boxes,
                    seed=seed,
                )
            except ValueError as e:
                raise CommandError(str(e)) from e
            with open(out, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow([f.name for f in fields(SweepRow)])
                for row in rows:
                    writer.writerow([repr(v) if isinstance(v, float) else v for v in astuple(row)])
            recorder.add_artifact(out, RunArtifact.Kind.SWEEP)
            recorder.set_metrics({"rows": len(rows)})
        logger.info("Wrote %d sweep row(s) to %s", len(rows), out)
