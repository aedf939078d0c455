import math

from django.test import SimpleTestCase
import numpy as np

from django_region_captioning.metrics import (
    BleuStats,
    attention_correctness,
    bleu,
    box_mask,
    corpus_bleu,
    overlap_fractions,
    quad_masks,
    uniform_attention_correctness,
)
from django_region_captioning.regions import box_corners


class TestBleu(SimpleTestCase):
    def test_exact_match(self) -> None:
        caption = "a red circle left of a blue square".split()
        self.assertEqual(bleu(caption, [caption]), 1.0)

    def test_clipped_unigram_precision(self) -> None:
        self.assertAlmostEqual(bleu(["a", "a", "a"], [["a", "b"]], n=1), 1 / 3)

    def test_geometric_mean(self) -> None:
        score = bleu("a red circle".split(), ["a red square".split()], n=2)
        self.assertAlmostEqual(score, math.sqrt(2 / 3 * 1 / 2))

    def test_brevity_penalty(self) -> None:
        self.assertAlmostEqual(bleu(["a", "b"], [["a", "b", "c", "d"]], n=1), math.exp(-1.0))

    def test_closest_reference_length_prefers_shorter_on_ties(self) -> None:
        # lengths 2 and 4 are equally close to 3; the shorter one means no penalty
        self.assertEqual(bleu(["a", "b", "c"], [["a", "b"], ["a", "b", "c", "x"]], n=1), 1.0)

    def test_zero_precision_gives_zero(self) -> None:
        self.assertEqual(bleu(["a", "b"], [["a", "c"]], n=2), 0.0)
        self.assertEqual(bleu(["a"], [["a"]], n=2), 0.0)

    def test_multiple_references_clip_by_maximum(self) -> None:
        self.assertAlmostEqual(bleu(["a", "a"], [["a"], ["a", "a"]], n=1), 1.0)

    def test_validation(self) -> None:
        with self.assertRaises(ValueError):
            bleu([], [["a"]])
        with self.assertRaises(ValueError):
            bleu(["a"], [])
        with self.assertRaises(ValueError):
            bleu(["a"], [["a"]], n=5)


class TestCorpusBleu(SimpleTestCase):
    def test_pools_counts_before_scoring(self) -> None:
        candidates = [["a"], ["b", "c"]]
        references = [[["a"]], [["b", "d"]]]
        self.assertAlmostEqual(corpus_bleu(candidates, references, n=1), 2 / 3)

    def test_stats_are_additive(self) -> None:
        total = BleuStats.empty(2) + BleuStats.of(["a", "b"], [["a", "b"]], 2) + BleuStats.of(["c"], [["c", "d"]], 2)
        self.assertEqual(total.matches, [3, 1])
        self.assertEqual(total.totals, [3, 1])
        self.assertEqual((total.candidate_length, total.reference_length), (3, 4))

    def test_length_mismatch(self) -> None:
        with self.assertRaises(ValueError):
            corpus_bleu([["a"]], [])
        with self.assertRaises(ValueError):
            corpus_bleu([], [])


class TestMasks(SimpleTestCase):
    def test_box_mask_counts_pixel_centres(self) -> None:
        self.assertEqual(int(box_mask((0.0, 0.0, 4.0, 2.0), 8).sum()), 8)

    def test_diamond(self) -> None:
        diamond = np.array([[[0.0, 4.0], [4.0, 8.0], [8.0, 4.0], [4.0, 0.0]]])
        self.assertEqual(int(quad_masks(diamond, 8).sum()), 40)

    def test_orientation_does_not_matter(self) -> None:
        quad = box_corners(1.0, 2.0, 5.0, 7.0)[None]
        np.testing.assert_array_equal(quad_masks(quad, 8), quad_masks(quad[:, ::-1], 8))

    def test_zero_area_quad_is_empty(self) -> None:
        flat = np.array([[[2.0, 2.0], [2.0, 6.0], [2.0, 6.0], [2.0, 2.0]]])
        self.assertFalse(quad_masks(flat, 8).any())
        self.assertEqual(overlap_fractions(flat, (0.0, 0.0, 8.0, 8.0), 8)[0], 0.0)


class TestAttentionCorrectness(SimpleTestCase):
    def setUp(self) -> None:
        self.geometry = np.stack([box_corners(0, 0, 8, 4), box_corners(0, 4, 8, 8), box_corners(0, 0, 8, 8)])
        self.left = (0.0, 0.0, 8.0, 4.0)

    def test_overlap_fractions(self) -> None:
        np.testing.assert_allclose(overlap_fractions(self.geometry, self.left, 8), [1.0, 0.0, 0.5])

    def test_weighted_mass_on_box(self) -> None:
        dists = [np.array([0.5, 0.25, 0.25]), np.array([0.0, 1.0, 0.0])]
        score = attention_correctness(dists, self.geometry, {0: self.left, 1: self.left}, image_size=8)
        self.assertAlmostEqual(score, ((0.5 + 0.125) + 0.0) / 2)

    def test_one_hot_on_box_scores_one(self) -> None:
        self.assertEqual(attention_correctness([np.array([1.0, 0.0, 0.0])], self.geometry, {0: self.left}, 8), 1.0)

    def test_uniform_baseline(self) -> None:
        self.assertAlmostEqual(uniform_attention_correctness(self.geometry, {2: self.left}, 8), 0.5)

    def test_validation(self) -> None:
        with self.assertRaises(ValueError):
            attention_correctness([np.ones(3) / 3], self.geometry, {}, 8)
        with self.assertRaises(ValueError):
            attention_correctness([np.ones(3) / 3], self.geometry, {1: self.left}, 8)
