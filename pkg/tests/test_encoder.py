from django.test import SimpleTestCase
import numpy as np

from django_region_captioning import ops
from django_region_captioning.autodiff import ShapeError, Tensor, grad_check
from django_region_captioning.encoder import (
    ConvStackParams,
    EncoderParams,
    conv_stack,
    encode,
    subsample_grid,
    subsampled_extent,
)
from django_region_captioning.rng import INIT, substream


class TestEncode(SimpleTestCase):
    def setUp(self) -> None:
        self.params = EncoderParams.initialize(substream(0, INIT), image_size=64, channels=32, phi_dim=48)
        self.image = Tensor(np.random.default_rng(3).uniform(size=(64, 64, 3)))

    def test_output_shapes(self) -> None:
        out = encode(self.image, self.params)
        self.assertEqual(out.gamma.shape, (8, 8, 32))
        self.assertEqual(out.phi.shape, (48,))
        self.assertIsNone(out.gamma_hires)

    def test_gamma_is_non_negative(self) -> None:
        out = encode(self.image, self.params)
        self.assertGreaterEqual(float(out.gamma.data.min()), 0.0)

    def test_hires_pathway(self) -> None:
        hires = ConvStackParams.initialize(substream(0, INIT, 5), channels=32)
        image = Tensor(np.full((128, 128, 3), 0.5))
        out = encode(self.image, self.params, hires_image=image, hires_params=hires)
        assert out.gamma_hires is not None
        self.assertEqual(out.gamma_hires.shape, (16, 16, 32))

    def test_wrong_shape_rejected(self) -> None:
        with self.assertRaises(ShapeError):
            encode(Tensor(np.zeros((32, 32, 3))), self.params)
        with self.assertRaises(ShapeError):
            encode(self.image, self.params, hires_image=Tensor(np.zeros((64, 64, 3))), hires_params=self.params.convs)

    def test_out_of_range_values_rejected(self) -> None:
        with self.assertRaises(ValueError):
            encode(Tensor(np.full((64, 64, 3), 1.5)), self.params)

    def test_initialization_is_seeded(self) -> None:
        other = EncoderParams.initialize(substream(0, INIT), image_size=64, channels=32, phi_dim=48)
        for name, tensor in self.params.named_parameters().items():
            np.testing.assert_array_equal(tensor.data, other.named_parameters()[name].data)

    def test_image_size_must_divide(self) -> None:
        with self.assertRaises(ValueError):
            EncoderParams.initialize(substream(0, INIT), image_size=60)

    def test_conv_stack_downsamples_by_eight(self) -> None:
        convs = ConvStackParams.initialize(substream(1, INIT), channels=8)
        self.assertEqual(conv_stack(Tensor(np.zeros((32, 32, 3))), convs).shape, (4, 4, 8))


class TestSubsampleGrid(SimpleTestCase):
    def setUp(self) -> None:
        self.gamma = Tensor(np.arange(8 * 8 * 2, dtype=np.float64).reshape(8, 8, 2))

    def test_stride_one_is_identity(self) -> None:
        self.assertIs(subsample_grid(self.gamma, 1), self.gamma)

    def test_region_counts(self) -> None:
        counts = {s: subsample_grid(self.gamma, s).shape[0] * subsample_grid(self.gamma, s).shape[1] for s in (1, 2, 4, 8)}
        self.assertEqual(counts, {1: 64, 2: 16, 4: 4, 8: 1})

    def test_keeps_every_stride_th_cell(self) -> None:
        kept = subsample_grid(self.gamma, 3)
        self.assertEqual(kept.shape, (3, 3, 2))
        np.testing.assert_array_equal(kept.data[1, 2], self.gamma.data[3, 6])

    def test_invalid_stride(self) -> None:
        with self.assertRaises(ValueError):
            subsample_grid(self.gamma, 0)
        with self.assertRaises(ValueError):
            subsample_grid(self.gamma, 9)

    def test_subsampled_extent(self) -> None:
        self.assertEqual([subsampled_extent(8, s) for s in (1, 2, 3, 8)], [8, 4, 3, 1])


class TestEncoderOracles(SimpleTestCase):
    def test_zero_image_gives_zero_codes(self) -> None:
        params = EncoderParams.initialize(substream(4, INIT), image_size=64, channels=32, phi_dim=48)
        out = encode(Tensor(np.zeros((64, 64, 3))), params)
        np.testing.assert_array_equal(out.gamma.data, 0.0)
        np.testing.assert_array_equal(out.phi.data, 0.0)

    def test_cells_only_see_their_receptive_field(self) -> None:
        convs = ConvStackParams.initialize(substream(5, INIT), channels=8)
        image = np.random.default_rng(6).uniform(size=(32, 32, 3))
        before = conv_stack(Tensor(image), convs).data
        image[0, 0] = 1.0 - image[0, 0]
        after = conv_stack(Tensor(image), convs).data
        # cell i sees pixels 8i-14 .. 8i+14, so pixel (0, 0) reaches cells 0 and 1 along each axis
        changed = np.abs(after - before).max(axis=2) > 0.0
        self.assertFalse(changed[2:, :].any())
        self.assertFalse(changed[:, 2:].any())
        self.assertTrue(changed[:2, :2].any())

    def test_gradients_match_central_differences(self) -> None:
        params = EncoderParams.initialize(substream(7, INIT), image_size=8, channels=2, phi_dim=3)
        image = Tensor(np.random.default_rng(8).uniform(size=(8, 8, 3)))

        def loss(conv1_b: Tensor, conv2_b: Tensor, conv3_w: Tensor, fc_w: Tensor) -> Tensor:
            params.convs.conv1_b, params.convs.conv2_b = conv1_b, conv2_b
            params.convs.conv3_w, params.fc_w = conv3_w, fc_w
            out = encode(image, params)
            return ops.add(ops.sum(ops.tanh(out.phi)), ops.sum(out.gamma))

        convs = params.convs
        result = grad_check(loss, [convs.conv1_b, convs.conv2_b, convs.conv3_w, params.fc_w])
        self.assertTrue(result.passed, f"max error {result.max_error}")
