from argparse import ArgumentParser
import logging

from django.core.management.base import CommandError

from django_region_captioning.decoding import AttentionTrace, decode
from django_region_captioning.evaluation import decode_context
from django_region_captioning.management.base import CaptioningCommand
from django_region_captioning.manifests import tracked_run
from django_region_captioning.models import CaptioningRun, RunArtifact
from django_region_captioning.visualization import write_attention_sheet

logger = logging.getLogger(__name__)


class Command(CaptioningCommand):
    """Caption one image and draw where the model attended for every emitted word.

    Writes ``token_<t>.ppm`` per word, ``attention.svg`` and ``manifest.json``
    into ``--out``.
    """

    help = "Render per-token attention overlays for one image"

    def add_arguments(self, parser: ArgumentParser) -> None:
        parser.add_argument("--ckpt", required=True)
        parser.add_argument("--data", required=True)
        parser.add_argument("--id", required=True, dest="image_id", help="Scene id to visualize")
        parser.add_argument("--out", required=True, help="Output directory")
        parser.add_argument("--beam", type=int, default=1)
        parser.add_argument("--max-len", type=int, default=20)
        parser.add_argument("--proposals")
        parser.add_argument("--seed", type=int, default=0)

    def handle(
        self,
        *,
        ckpt: str,
        data: str,
        image_id: str,
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
        records = {record.id: record for record in self._load_dataset(data)}
        if image_id not in records:
            raise CommandError(f"Unknown scene id: {image_id}")
        record = records[image_id]
        boxes = self._load_proposals(proposals)
        config = {"ckpt": ckpt, "data": data, "id": image_id, "beam": beam, "max_len": max_len}
        with tracked_run(
            CaptioningRun.Command.VISUALIZE_ATTENTION,
            seed=seed,
            config=config,
            manifest_path=f"{out.rstrip('/')}/manifest.json",
        ) as recorder:
            recorder.set_checkpoint(ckpt)
            try:
                context = decode_context(checkpoint.model, record, proposals=boxes, seed=seed)
                hypothesis = decode(checkpoint.model, context, beam=beam, max_len=max_len)
            except ValueError as e:
                raise CommandError(str(e)) from e
            tokens = checkpoint.vocab.decode(hypothesis.tokens)
            trace = AttentionTrace(region_dists=hypothesis.region_dists[: len(tokens)], geometry=context.regions.geometry)
            written = write_attention_sheet(out, record.pixels(), tokens, trace, image_id=image_id)
            for path in written:
                kind = RunArtifact.Kind.SVG if path.suffix == ".svg" else RunArtifact.Kind.OVERLAY
                recorder.add_artifact(path, kind)
            recorder.set_metrics({"caption": " ".join(tokens), "logprob": hypothesis.log_prob})
        self.stdout.write(" ".join(tokens))
