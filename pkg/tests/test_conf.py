from typing import ClassVar

from django.conf import settings
from django.test import SimpleTestCase, override_settings

from django_region_captioning import conf
from django_region_captioning.autodiff import Tensor
from django_region_captioning.encoder import EncoderOutput
from django_region_captioning.model import CaptionModel, ModelDims
from django_region_captioning.regions import GridProvider, RegionContext, RegionSet, StnParams
from django_region_captioning.scenes import generate_scene


class CoarseGridProvider(GridProvider):
    """Grid regions that always skip every other cell."""

    built: ClassVar[int] = 0

    def build(self, encoded: EncoderOutput, stn: StnParams | None, context: RegionContext) -> RegionSet:
        type(self).built += 1
        return super().build(encoded, stn, RegionContext(image_size=context.image_size, stride=2))


class TestRegionProviders(SimpleTestCase):
    def test_defaults(self) -> None:
        self.assertEqual(set(conf.get_region_provider_paths()), {"grid", "proposals", "stn"})
        self.assertIsInstance(conf.get_region_provider("grid"), GridProvider)

    def test_unknown_kind(self) -> None:
        with self.assertRaisesMessage(ValueError, "'boxes'"):
            conf.get_region_provider("boxes")

    @override_settings(REGION_CAPTIONING_REGION_PROVIDERS={"grid": "tests.test_conf.CoarseGridProvider"})
    def test_override_is_used_by_the_model(self) -> None:
        model = CaptionModel.initialize(ModelDims(vocab_size=5, word_dim=4, hidden_dim=4, channels=8, image_dim=4), seed=0)
        before = CoarseGridProvider.built
        regions = model.regions(model.encode(Tensor(generate_scene(0).pixels())))
        self.assertEqual(CoarseGridProvider.built, before + 1)
        self.assertEqual(len(regions), 16)

    @override_settings(REGION_CAPTIONING_REGION_PROVIDERS={"grid": "nonexistent.module.Provider"})
    def test_bad_path(self) -> None:
        with self.assertRaises(ImportError):
            conf.get_region_provider("grid")

    @override_settings(REGION_CAPTIONING_REGION_PROVIDERS=["grid"])
    def test_must_be_a_dict(self) -> None:
        with self.assertRaises(ValueError):
            conf.get_region_provider_paths()


class TestScalars(SimpleTestCase):
    @override_settings()
    def test_defaults_when_unset(self) -> None:
        del settings.REGION_CAPTIONING_WORKERS
        del settings.REGION_CAPTIONING_LOG_EVERY
        self.assertEqual(conf.get_workers(), 1)
        self.assertEqual(conf.get_log_every(), 50)
        self.assertEqual(conf.get_grad_clip_norm(), 5.0)

    @override_settings(REGION_CAPTIONING_WORKERS=4, REGION_CAPTIONING_LOG_EVERY=10, REGION_CAPTIONING_GRAD_CLIP_NORM=1)
    def test_overrides(self) -> None:
        self.assertEqual(conf.get_workers(), 4)
        self.assertEqual(conf.get_log_every(), 10)
        self.assertEqual(conf.get_grad_clip_norm(), 1.0)

    def test_invalid_values(self) -> None:
        for name, value in [
            ("REGION_CAPTIONING_WORKERS", 0),
            ("REGION_CAPTIONING_WORKERS", True),
            ("REGION_CAPTIONING_WORKERS", "2"),
            ("REGION_CAPTIONING_LOG_EVERY", -5),
        ]:
            with self.subTest(name=name, value=value), override_settings(**{name: value}), self.assertRaises(ValueError):
                conf.get_workers() if name.endswith("WORKERS") else conf.get_log_every()
        with override_settings(REGION_CAPTIONING_GRAD_CLIP_NORM=0.0), self.assertRaises(ValueError):
            conf.get_grad_clip_norm()
