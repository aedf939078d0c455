from dataclasses import replace
import math

from django.test import SimpleTestCase, override_settings, tag

from django_region_captioning.evaluation import (
    LADDER,
    decode_context,
    evaluate,
    run_ablation_ladder,
    split_benchmark,
    sweep_region_counts,
)
from django_region_captioning.model import CaptionModel, ModelDims, RegionKind
from django_region_captioning.regions import ProposalBox
from django_region_captioning.scenes import generate_scenes
from django_region_captioning.vocabulary import build_vocab


class EvaluationTestCase(SimpleTestCase):
    def setUp(self) -> None:
        self.records = generate_scenes(3, 3)
        self.vocab = build_vocab(c for r in self.records for c in r.captions)
        self.dims = ModelDims(vocab_size=len(self.vocab), word_dim=8, hidden_dim=8, channels=8, image_dim=8)
        self.model = CaptionModel.initialize(self.dims, seed=0)


class TestEvaluate(EvaluationTestCase):
    def test_metric_keys_and_ranges(self) -> None:
        result = evaluate(self.model, self.vocab, self.records, max_len=6)
        for n in (1, 2, 3, 4):
            self.assertTrue(0.0 <= result.metrics[f"bleu{n}"] <= 1.0)
            self.assertTrue(0.0 <= result.metrics[f"corpus_bleu{n}"] <= 1.0)
        self.assertTrue(0.0 <= result.metrics["attention_correctness"] <= 1.0)
        self.assertTrue(0.0 < result.metrics["uniform_attention_correctness"] < 1.0)
        self.assertLess(result.metrics["mean_logprob"], 0.0)
        self.assertEqual(result.metrics["images"], 3.0)

    def test_decodes_follow_input_order(self) -> None:
        result = evaluate(self.model, self.vocab, self.records, max_len=6)
        self.assertEqual([d.image_id for d in result.decodes], [r.id for r in self.records])
        decode = result.decodes[0]
        self.assertEqual(set(decode.as_json()), {"image_id", "caption", "logprob", "attention"})
        for dist in decode.attention:
            self.assertEqual(len(dist), 64)
            self.assertAlmostEqual(sum(dist), 1.0, places=10)

    @override_settings(REGION_CAPTIONING_WORKERS=3)
    def test_worker_threads_give_identical_results(self) -> None:
        threaded = evaluate(self.model, self.vocab, self.records, max_len=6)
        serial = evaluate(self.model, self.vocab, self.records, max_len=6, workers=1)
        self.assertEqual(threaded.metrics, serial.metrics)
        self.assertEqual(threaded.decodes, serial.decodes)

    def test_empty_records(self) -> None:
        with self.assertRaises(ValueError):
            evaluate(self.model, self.vocab, [])

    def test_scenes_without_alignments_are_not_scored(self) -> None:
        unaligned = [replace(r, alignments=tuple({} for _ in r.captions)) for r in self.records]
        result = evaluate(self.model, self.vocab, unaligned, max_len=4)
        self.assertTrue(math.isnan(result.metrics["attention_correctness"]))
        self.assertTrue(math.isnan(result.metrics["uniform_attention_correctness"]))

    @tag("slow")
    def test_untrained_attention_is_near_the_uniform_baseline(self) -> None:
        records = generate_scenes(21, 200)
        vocab = build_vocab(c for r in records for c in r.captions)
        model = CaptionModel.initialize(replace(self.dims, vocab_size=len(vocab)), seed=0)
        metrics = evaluate(model, vocab, records, max_len=1).metrics
        self.assertAlmostEqual(metrics["attention_correctness"], metrics["uniform_attention_correctness"], delta=0.05)



class TestDecodeContext(EvaluationTestCase):
    def test_oracle_proposals_when_no_file_entry(self) -> None:
        model = CaptionModel.initialize(self.dims, seed=0, region_kind=RegionKind.PROPOSALS, proposal_k=10)
        context = decode_context(model, self.records[0], proposals={})
        self.assertEqual(len(context.regions), 10)

    def test_file_proposals_clamp_k(self) -> None:
        model = CaptionModel.initialize(self.dims, seed=0, region_kind=RegionKind.PROPOSALS)
        boxes = {self.records[0].id: [ProposalBox(box=(0.0, 0.0, 32.0, 32.0), score=1.0)]}
        context = decode_context(model, self.records[0], proposals=boxes, proposal_k=5)
        self.assertEqual(len(context.regions), 1)


class TestSweep(EvaluationTestCase):
    def test_stride_sweep_region_counts(self) -> None:
        rows = sweep_region_counts(self.model, self.vocab, self.records[:1], strides=[4, 1, 8, 2], max_len=3)
        self.assertEqual([r.region_count for r in rows], [64, 16, 4, 1])
        self.assertEqual([r.parameter for r in rows], [1, 2, 4, 8])

    def test_proposal_count_sweep(self) -> None:
        model = CaptionModel.initialize(self.dims, seed=0, region_kind=RegionKind.PROPOSALS)
        rows = sweep_region_counts(model, self.vocab, self.records[:1], proposal_counts=[5, 1], max_len=3)
        self.assertEqual([r.region_count for r in rows], [1, 5])

    def test_sweep_kind_must_match_model(self) -> None:
        with self.assertRaises(ValueError):
            sweep_region_counts(self.model, self.vocab, self.records, proposal_counts=[1])
        proposals = CaptionModel.initialize(self.dims, seed=0, region_kind=RegionKind.PROPOSALS)
        with self.assertRaises(ValueError):
            sweep_region_counts(proposals, self.vocab, self.records, strides=[1])

    def test_exactly_one_sweep_axis(self) -> None:
        with self.assertRaises(ValueError):
            sweep_region_counts(self.model, self.vocab, self.records)
        with self.assertRaises(ValueError):
            sweep_region_counts(self.model, self.vocab, self.records, strides=[1], proposal_counts=[1])


class TestAblationLadder(SimpleTestCase):
    def test_ladder_order(self) -> None:
        self.assertEqual(
            [v.name for v in LADDER],
            ["baseline", "wh+wr", "wh+wr+rh", "conditional", "full", "proposals", "stn"],
        )
        self.assertEqual(LADDER[-1].warmstart_from, "full")

    def test_split(self) -> None:
        train, held_out = split_benchmark(generate_scenes(0, 10))
        self.assertEqual((len(train), len(held_out)), (8, 2))
        with self.assertRaises(ValueError):
            split_benchmark(generate_scenes(0, 1))
        with self.assertRaises(ValueError):
            split_benchmark(generate_scenes(0, 4), held_out=1.0)

    def test_unknown_variant(self) -> None:
        with self.assertRaisesMessage(ValueError, "nope"):
            run_ablation_ladder(4, [0], 1, variants=["full", "nope"])

    def test_subset_of_variants(self) -> None:
        rows, summary = run_ablation_ladder(5, [0], 1, batch_size=1, variants=["baseline"])
        self.assertEqual([(r.variant, r.seed) for r in rows], [("baseline", 0)])
        self.assertEqual(set(summary), {"baseline"})
        self.assertEqual(summary["baseline"]["bleu4"], rows[0].bleu4)

    @tag("slow")
    def test_full_ladder(self) -> None:
        rows, summary = run_ablation_ladder(10, [0, 1], 2, batch_size=2)
        self.assertEqual(len(rows), 2 * len(LADDER))
        self.assertEqual(list(summary), [v.name for v in LADDER])
        for row in rows:
            self.assertTrue(0.0 <= row.attention_correctness <= 1.0)
