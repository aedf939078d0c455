from argparse import ArgumentParser
from pathlib import Path

from django.core.management.base import CommandError

from django_region_captioning.dataset import ImageForm, write_dataset, write_ppm
from django_region_captioning.management.base import CaptioningCommand, sidecar
from django_region_captioning.manifests import tracked_run
from django_region_captioning.models import CaptioningRun, RunArtifact
from django_region_captioning.regions import dump_proposals, oracle_proposals
from django_region_captioning.scenes import generate_scenes
from django_region_captioning.training import ORACLE_DISTRACTORS, ORACLE_JITTER


class Command(CaptioningCommand):
    """Generate a synthetic captioned-scene dataset as JSON lines."""

    help = "Generate synthetic captioned scenes"

    def add_arguments(self, parser: ArgumentParser) -> None:
        parser.add_argument("--n", type=int, required=True, help="Number of scenes")
        parser.add_argument("--seed", type=int, default=0, help="Data seed (default: %(default)s)")
        parser.add_argument("--out", required=True, help="Output JSONL path")
        parser.add_argument(
            "--form",
            choices=[f.value for f in ImageForm],
            default=ImageForm.PIXELS.value,
            help="Store rendered pixels or only the generator seed (default: %(default)s)",
        )
        parser.add_argument("--ppm-dir", help="Also export every image as <id>.ppm into this directory")
        parser.add_argument("--proposals-out", help="Also write oracle proposals as JSON lines")

    def handle(
        self,
        *,
        n: int,
        seed: int,
        out: str,
        form: str,
        ppm_dir: str | None,
        proposals_out: str | None,
        verbosity: int,
        **options: object,
    ) -> None:
        self._configure_logging(verbosity)
        if n < 0:
            raise CommandError(f"--n must be >= 0, got {n}")
        if seed < 0:
            raise CommandError(f"--seed must be >= 0, got {seed}")

        config = {"n": n, "seed": seed, "form": form, "ppm_dir": ppm_dir, "proposals_out": proposals_out}
        with tracked_run(
            CaptioningRun.Command.GENERATE_SCENES,
            seed=seed,
            config=config,
            manifest_path=sidecar(out, ".manifest.json"),
        ) as recorder:
            records = generate_scenes(seed, n)
            count = write_dataset(out, records, ImageForm(form))
            recorder.add_artifact(out, RunArtifact.Kind.DATASET)
            if ppm_dir is not None:
                Path(ppm_dir).mkdir(parents=True, exist_ok=True)
                for record in records:
                    path = Path(ppm_dir) / f"{record.id}.ppm"
                    write_ppm(path, record.image)
                    recorder.add_artifact(path, RunArtifact.Kind.IMAGE)
            if proposals_out is not None:
                dump_proposals(
                    proposals_out,
                    ((r.id, oracle_proposals(r, ORACLE_DISTRACTORS, ORACLE_JITTER, seed=seed)) for r in records),
                )
                recorder.add_artifact(proposals_out, RunArtifact.Kind.DATASET)
            recorder.set_metrics({"records": count})
        self.stdout.write(str(count))
