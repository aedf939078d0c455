from collections import Counter
import itertools

from django.test import SimpleTestCase, tag
import numpy as np

from django_region_captioning.regions import box_iou
from django_region_captioning.rng import DATA, INIT, substream
from django_region_captioning.scenes import (
    COLORS,
    IMAGE_SIZE,
    MAX_IOU,
    MAX_OBJECTS,
    SHAPES,
    SceneObject,
    generate_scene,
    generate_scenes,
    relation,
    scene_seeds,
    to_uint8,
)


class TestSubstream(SimpleTestCase):
    def test_streams_are_independent(self) -> None:
        self.assertNotEqual(substream(0, DATA).random(), substream(0, INIT).random())
        self.assertEqual(substream(3, DATA, 7).random(), substream(3, DATA, 7).random())
        self.assertNotEqual(substream(3, DATA, 7).random(), substream(3, DATA, 8).random())

    def test_negative_seed(self) -> None:
        with self.assertRaises(ValueError):
            substream(-1, DATA)


class TestRelation(SimpleTestCase):
    def _at(self, row: float, col: float) -> SceneObject:
        return SceneObject("circle", "red", "small", (row - 6, col - 6, row + 6, col + 6))

    def test_dominant_axis(self) -> None:
        self.assertEqual(relation(self._at(30, 10), self._at(32, 50)), ("left", "of"))
        self.assertEqual(relation(self._at(30, 50), self._at(32, 10)), ("right", "of"))
        self.assertEqual(relation(self._at(10, 30), self._at(50, 32)), ("above",))
        self.assertEqual(relation(self._at(50, 30), self._at(10, 32)), ("below",))


class TestGenerateScene(SimpleTestCase):
    def test_pure_function_of_seed(self) -> None:
        first, second = generate_scene(42), generate_scene(42)
        self.assertEqual(first, second)
        np.testing.assert_array_equal(first.image, second.image)
        self.assertFalse(np.array_equal(first.image, generate_scene(43).image))

    def test_image(self) -> None:
        scene = generate_scene(5)
        self.assertEqual(scene.image.shape, (IMAGE_SIZE, IMAGE_SIZE, 3))
        self.assertEqual(scene.image.dtype, np.uint8)
        pixels = scene.pixels()
        self.assertTrue(0.0 <= pixels.min() and pixels.max() <= 1.0)

    def test_objects_fit_and_barely_overlap(self) -> None:
        for seed in range(20):
            scene = generate_scene(seed)
            self.assertTrue(1 <= len(scene.objects) <= MAX_OBJECTS)
            for i, obj in enumerate(scene.objects):
                row0, col0, row1, col1 = obj.box
                self.assertTrue(0 <= row0 < row1 <= IMAGE_SIZE and 0 <= col0 < col1 <= IMAGE_SIZE)
                for other in scene.objects[i + 1 :]:
                    self.assertLessEqual(box_iou(obj.box, other.box), MAX_IOU)

    def test_captions_align_nouns_to_objects(self) -> None:
        for seed in range(20):
            scene = generate_scene(seed)
            self.assertEqual(len(scene.captions), 3)
            self.assertEqual(len(scene.alignments), 3)
            for caption, alignment in zip(scene.captions, scene.alignments):
                self.assertEqual(sorted(alignment.values()), list(range(len(scene.objects))))
                for token_index, object_index in alignment.items():
                    self.assertEqual(caption[token_index], scene.objects[object_index].shape)

    def test_caption_names_the_object_colour(self) -> None:
        scene = generate_scene(9)
        caption, alignment = scene.captions[0], scene.alignments[0]
        for token_index, object_index in alignment.items():
            self.assertEqual(caption[token_index - 1], scene.objects[object_index].color)

    def test_render_at_higher_resolution(self) -> None:
        scene = generate_scene(3)
        hires = scene.render(128)
        self.assertEqual(hires.shape, (128, 128, 3))
        np.testing.assert_array_equal(to_uint8(scene.render(IMAGE_SIZE)), scene.image)


class TestFlip(SimpleTestCase):
    def test_mirrors_image_boxes_and_relations(self) -> None:
        scene = next(s for s in (generate_scene(seed) for seed in range(100)) if "left" in s.captions[0])
        flipped = scene.flipped()
        np.testing.assert_array_equal(flipped.image, scene.image[:, ::-1])
        self.assertIn("right", flipped.captions[0])
        self.assertNotIn("left", flipped.captions[0])
        row0, col0, row1, col1 = scene.objects[0].box
        self.assertEqual(flipped.objects[0].box, (row0, IMAGE_SIZE - col1, row1, IMAGE_SIZE - col0))
        self.assertTrue(flipped.mirrored)
        self.assertEqual(flipped.alignments, scene.alignments)

    def test_flipped_render_matches_mirrored_image(self) -> None:
        scene = generate_scene(8)
        np.testing.assert_allclose(scene.flipped().render(IMAGE_SIZE), scene.render(IMAGE_SIZE)[:, ::-1], atol=1e-12)


class TestGenerateScenes(SimpleTestCase):
    def test_ids_and_determinism(self) -> None:
        scenes = generate_scenes(1, 3)
        self.assertEqual([s.id for s in scenes], ["000000", "000001", "000002"])
        self.assertEqual(scenes, generate_scenes(1, 3))
        self.assertEqual(scene_seeds(1, 3), [s.seed for s in scenes])

    def test_prefix_stable(self) -> None:
        self.assertEqual(scene_seeds(2, 5)[:3], scene_seeds(2, 3))

    def test_negative_count(self) -> None:
        with self.assertRaises(ValueError):
            generate_scenes(0, -1)


@tag("slow")
class TestBalance(SimpleTestCase):
    def test_every_shape_colour_pair_occurs(self) -> None:
        pairs = Counter((obj.shape, obj.color) for seed in range(1000) for obj in generate_scene(seed).objects)
        for shape, color in itertools.product(SHAPES, COLORS):
            with self.subTest(shape=shape, color=color):
                self.assertGreaterEqual(pairs[shape, color], 10)
