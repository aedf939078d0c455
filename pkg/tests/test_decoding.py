import itertools

from django.test import SimpleTestCase, tag
import numpy as np

from django_region_captioning.attention import attend
from django_region_captioning.autodiff import Tensor
from django_region_captioning.decoding import (
    AttentionTrace,
    DecodeContext,
    beam_search,
    decode,
    decode_greedy,
    decode_sample,
    forced_trace,
)
from django_region_captioning.model import CaptionModel, ModelDims, RegionKind
from django_region_captioning.regions import ProposalBox
from django_region_captioning.scenes import generate_scenes
from django_region_captioning.vocabulary import STOP_INDEX

TINY = ModelDims(vocab_size=4, word_dim=4, hidden_dim=4, channels=8, image_dim=4)


def _context(model: CaptionModel, seed: int = 0) -> DecodeContext:
    record = generate_scenes(seed, 1)[0]
    return DecodeContext.build(model, Tensor(record.pixels()))


def _sharpen(model: CaptionModel, factor: float) -> None:
    # larger scores spread the word distribution so decoders disagree
    model.attention.theta_wh.data *= factor
    model.attention.word_embeddings.data *= factor


def _all_captions(vocab_size: int, max_len: int) -> list[tuple[int, ...]]:
    words = range(1, vocab_size)
    captions: list[tuple[int, ...]] = []
    for length in range(max_len):
        captions += [(*prefix, STOP_INDEX) for prefix in itertools.product(words, repeat=length)]
    captions += list(itertools.product(words, repeat=max_len))
    return captions


class TestGreedyAndBeam(SimpleTestCase):
    def setUp(self) -> None:
        self.model = CaptionModel.initialize(TINY, seed=0)
        _sharpen(self.model, 3.0)

    def test_beam_of_one_is_greedy_bitwise(self) -> None:
        for seed in range(4):
            context = _context(self.model, seed)
            greedy = decode_greedy(self.model, context, max_len=6)
            (beam,) = beam_search(self.model, context, k=1, max_len=6)
            self.assertEqual(beam.tokens, greedy.tokens)
            self.assertEqual(beam.log_prob, greedy.log_prob)
            for a, b in zip(beam.region_dists, greedy.region_dists):
                np.testing.assert_array_equal(a, b)

    def test_wide_beam_finds_the_exhaustive_optimum(self) -> None:
        for seed in range(3):
            context = _context(self.model, seed)
            scored = {c: forced_trace(self.model, context, c).log_prob for c in _all_captions(4, 3)}
            best = max(scored, key=lambda c: scored[c])
            top = beam_search(self.model, context, k=64, max_len=3)[0]
            self.assertEqual(top.tokens, best)
            self.assertAlmostEqual(top.log_prob, scored[best], places=12)

    def test_beam_results_are_sorted_and_distinct(self) -> None:
        hypotheses = beam_search(self.model, _context(self.model), k=5, max_len=4)
        self.assertLessEqual(len(hypotheses), 5)
        scores = [h.log_prob for h in hypotheses]
        self.assertEqual(scores, sorted(scores, reverse=True))
        self.assertEqual(len({h.tokens for h in hypotheses}), len(hypotheses))

    def test_log_prob_matches_forced_trace(self) -> None:
        context = _context(self.model, 1)
        greedy = decode_greedy(self.model, context, max_len=5)
        forced = forced_trace(self.model, context, greedy.tokens)
        self.assertAlmostEqual(forced.log_prob, greedy.log_prob, places=12)

    def test_stops_at_max_len(self) -> None:
        hypothesis = decode_greedy(self.model, _context(self.model), max_len=1)
        self.assertEqual(len(hypothesis.tokens), 1)

    def test_region_dist_per_token(self) -> None:
        context = _context(self.model, 2)
        hypothesis = decode(self.model, context, beam=2, max_len=5)
        trace = AttentionTrace.from_hypothesis(hypothesis, context.regions)
        self.assertEqual(len(trace), len(hypothesis.tokens))
        self.assertEqual(trace.geometry.shape, (64, 4, 2))
        for dist in trace.region_dists:
            self.assertAlmostEqual(float(dist.sum()), 1.0, places=12)

    def test_finished_flag(self) -> None:
        hypothesis = forced_trace(self.model, _context(self.model), [2, STOP_INDEX])
        self.assertTrue(hypothesis.finished)
        self.assertFalse(forced_trace(self.model, _context(self.model), [2]).finished)

    def test_argument_validation(self) -> None:
        context = _context(self.model)
        with self.assertRaises(ValueError):
            decode_greedy(self.model, context, max_len=0)
        with self.assertRaises(ValueError):
            beam_search(self.model, context, k=0)


class TestSampling(SimpleTestCase):
    def setUp(self) -> None:
        self.model = CaptionModel.initialize(TINY, seed=1)
        self.context = _context(self.model)

    def test_seeded(self) -> None:
        first = decode_sample(self.model, self.context, max_len=8, seed=4)
        second = decode_sample(self.model, self.context, max_len=8, seed=4)
        self.assertEqual(first.tokens, second.tokens)
        self.assertEqual(first.log_prob, second.log_prob)

    def test_low_temperature_is_greedy(self) -> None:
        greedy = decode_greedy(self.model, self.context, max_len=8)
        sampled = decode_sample(self.model, self.context, max_len=8, temperature=1e-9, seed=2)
        self.assertEqual(sampled.tokens, greedy.tokens)
        self.assertAlmostEqual(sampled.log_prob, greedy.log_prob, places=12)

    def test_log_prob_is_untempered(self) -> None:
        sampled = decode_sample(self.model, self.context, max_len=8, temperature=3.0, seed=5)
        forced = forced_trace(self.model, self.context, sampled.tokens)
        self.assertAlmostEqual(sampled.log_prob, forced.log_prob, places=12)

    def test_temperature_must_be_positive(self) -> None:
        with self.assertRaises(ValueError):
            decode_sample(self.model, self.context, temperature=0.0)

    @tag("slow")
    def test_first_token_frequencies_match_word_distribution(self) -> None:
        draws = 10_000
        probs = attend(self.context.h0, self.context.regions.descriptors, self.model.attention).word_dist.data
        rng = np.random.default_rng(11)
        tokens = [decode_sample(self.model, self.context, max_len=1, rng=rng).tokens[0] for _ in range(draws)]
        counts = np.bincount(tokens, minlength=TINY.vocab_size)
        expected = probs * draws
        chi_square = float(np.sum((counts - expected) ** 2 / expected))
        # 0.999 quantile of chi-square with 3 degrees of freedom
        self.assertLess(chi_square, 16.27)



class TestDecodeContext(SimpleTestCase):
    def test_proposal_count_clamped_to_available_boxes(self) -> None:
        model = CaptionModel.initialize(TINY, seed=0, region_kind=RegionKind.PROPOSALS)
        record = generate_scenes(0, 1)[0]
        boxes = [ProposalBox(box=(0.0, 0.0, 16.0, 16.0), score=0.5), ProposalBox(box=(8.0, 8.0, 40.0, 40.0), score=0.9)]
        context = DecodeContext.build(
            model,
            Tensor(record.pixels()),
            hires_image=Tensor(record.render(128)),
            proposals=boxes,
        )
        self.assertEqual(len(context.regions), 2)

    def test_stride_override(self) -> None:
        model = CaptionModel.initialize(TINY, seed=0)
        record = generate_scenes(0, 1)[0]
        context = DecodeContext.build(model, Tensor(record.pixels()), stride=4)
        self.assertEqual(len(context.regions), 4)
