from argparse import ArgumentParser
import json
import logging

from django.core.management.base import CommandError

from django_region_captioning.evaluation import BLEU_ORDERS, evaluate
from django_region_captioning.management.base import CaptioningCommand, json_safe, sidecar
from django_region_captioning.manifests import tracked_run
from django_region_captioning.models import CaptioningRun, RunArtifact

logger = logging.getLogger(__name__)

METRIC_GROUPS = {
    "bleu": [f"bleu{n}" for n in BLEU_ORDERS] + [f"corpus_bleu{n}" for n in BLEU_ORDERS],
    "attention": ["attention_correctness", "uniform_attention_correctness"],
    "logprob": ["mean_logprob"],
}


class Command(CaptioningCommand):
    help = "Decode a dataset with a trained checkpoint and report BLEU and attention correctness"

    def add_arguments(self, parser: ArgumentParser) -> None:
        parser.add_argument("--ckpt", required=True)
        parser.add_argument("--data", required=True)
        parser.add_argument("--beam", type=int, default=1, help="Beam width; 1 decodes greedily (default: %(default)s)")
        parser.add_argument(
            "--metrics",
            nargs="+",
            choices=sorted(METRIC_GROUPS),
            default=sorted(METRIC_GROUPS),
            help="Metric groups to report (default: all)",
        )
        parser.add_argument("--max-len", type=int, default=20)
        parser.add_argument("--proposals", help="Proposal boxes (JSONL) for proposal models")
        parser.add_argument("--seed", type=int, default=0, help="Seed for generated oracle proposals")
        parser.add_argument("--decodes", help="Write one JSON line per decoded image here")
        parser.add_argument("--out", help="Write the metrics JSON here instead of stdout")

    def handle(
        self,
        *,
        ckpt: str,
        data: str,
        beam: int,
        metrics: list[str],
        max_len: int,
        proposals: str | None,
        seed: int,
        decodes: str | None,
        out: str | None,
        verbosity: int,
        **options: object,
    ) -> None:
        self._configure_logging(verbosity)
        checkpoint = self._load_checkpoint(ckpt)
        records = self._load_dataset(data)
        boxes = self._load_proposals(proposals)
        config = {"ckpt": ckpt, "data": data, "beam": beam, "metrics": metrics, "max_len": max_len, "proposals": proposals}
        with tracked_run(
            CaptioningRun.Command.EVALUATE_CAPTIONER,
            seed=seed,
            config=config,
            manifest_path=sidecar(out, ".manifest.json") if out else None,
        ) as recorder:
            recorder.set_checkpoint(ckpt)
            try:
                result = evaluate(
                    checkpoint.model,
                    checkpoint.vocab,
                    records,
                    beam=beam,
                    max_len=max_len,
                    proposals=boxes,
                    seed=seed,
                )
            except ValueError as e:
                raise CommandError(str(e)) from e
            keys = ["images"] + [key for group in sorted(set(metrics)) for key in METRIC_GROUPS[group]]
            report = json_safe({key: result.metrics[key] for key in keys})
            recorder.set_metrics(report)
            payload = json.dumps(report, indent=2, sort_keys=True, allow_nan=False)
            if out:
                with open(out, "w", encoding="utf-8") as fh:
                    fh.write(payload + "\n")
                recorder.add_artifact(out, RunArtifact.Kind.METRICS)
            if decodes:
                with open(decodes, "w", encoding="utf-8") as fh:
                    for row in result.decodes:
                        fh.write(json.dumps(row.as_json(), sort_keys=True) + "\n")
                recorder.add_artifact(decodes, RunArtifact.Kind.DECODES)
        if not out:
            self.stdout.write(payload)
