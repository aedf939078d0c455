from collections.abc import Callable
import threading

from django.test import SimpleTestCase
import numpy as np

from django_region_captioning import ops
from django_region_captioning.autodiff import ShapeError, Tape, Tensor, apply_primitive, backward, grad_check, no_tape


def _rand(rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape))


class TestTensor(SimpleTestCase):
    def test_zero_extent_rejected(self) -> None:
        with self.assertRaises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_scalar_allowed(self) -> None:
        self.assertEqual(Tensor(2.5).shape, ())
        self.assertEqual(Tensor(2.5).item(), 2.5)

    def test_requires_grad_allocates_zero_grad(self) -> None:
        t = Tensor(np.ones((2, 2)), requires_grad=True)
        assert t.grad is not None
        np.testing.assert_array_equal(t.grad, np.zeros((2, 2)))
        self.assertIsNone(Tensor(1.0).grad)

    def test_operators_route_through_primitives(self) -> None:
        a = Tensor([1.0, 2.0])
        b = Tensor([3.0, 5.0])
        np.testing.assert_allclose((a + b).data, [4.0, 7.0])
        np.testing.assert_allclose((a - b).data, [-2.0, -3.0])
        np.testing.assert_allclose((a * b).data, [3.0, 10.0])
        np.testing.assert_allclose((b / a).data, [3.0, 2.5])
        np.testing.assert_allclose((-a).data, [-1.0, -2.0])
        self.assertEqual((a @ b).item(), 13.0)
        self.assertEqual(a.sum().item(), 3.0)


class TestApplyPrimitive(SimpleTestCase):
    def test_unknown_primitive(self) -> None:
        with self.assertRaisesMessage(ValueError, "Unknown primitive: nope"):
            apply_primitive("nope", [Tensor(1.0)])

    def test_arity_mismatch(self) -> None:
        with self.assertRaises(ShapeError):
            apply_primitive("add", [Tensor(1.0)])

    def test_matmul_shape_error_names_shapes(self) -> None:
        with self.assertRaises(ShapeError) as ctx:
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        self.assertIn("(2, 3)", str(ctx.exception))

    def test_trailing_suffix_broadcast_only(self) -> None:
        out = ops.add(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(out.data, [[1.0, 2.0, 3.0]] * 2)
        with self.assertRaises(ShapeError):
            ops.add(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0]))

    def test_no_tape_records_nothing(self) -> None:
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with no_tape():
                x * x
            self.assertEqual(len(tape.nodes), 0)
            x * x
        self.assertEqual(len(tape.nodes), 1)

    def test_constants_are_not_recorded(self) -> None:
        with Tape() as tape:
            Tensor(np.ones(3)) * Tensor(np.ones(3))
        self.assertEqual(len(tape.nodes), 0)

    def test_tape_is_thread_local(self) -> None:
        x = Tensor(np.ones(3), requires_grad=True)
        counts: list[int] = []

        def worker() -> None:
            with Tape() as inner:
                x * x
                x * x
            counts.append(len(inner.nodes))

        with Tape() as outer:
            x * x
            thread = threading.Thread(target=worker)
            thread.start()
            thread.join()
        self.assertEqual(counts, [2])
        self.assertEqual(len(outer.nodes), 1)


class TestBackward(SimpleTestCase):
    def test_quadratic(self) -> None:
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = (x * x).sum()
        grads = backward(tape, loss)
        np.testing.assert_allclose(grads[x], [2.0, -4.0, 6.0])
        assert x.grad is not None
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])

    def test_gradient_accumulates_across_passes(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = (x * x).sum()
            backward(tape, loss)
        assert x.grad is not None
        np.testing.assert_allclose(x.grad, [4.0, 8.0])

    def test_accumulate_false_leaves_grad_untouched(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = (x * x).sum()
        grads = backward(tape, loss, accumulate=False)
        np.testing.assert_allclose(grads[x], [2.0, 4.0])
        assert x.grad is not None
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_unused_leaf_gets_no_entry(self) -> None:
        x = Tensor([1.0], requires_grad=True)
        y = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = (x * x).sum()
        self.assertNotIn(y, backward(tape, loss))

    def test_non_scalar_loss_rejected(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            out = x * x
        with self.assertRaises(ShapeError):
            backward(tape, out)

    def test_reused_tensor_sums_contributions(self) -> None:
        x = Tensor(3.0, requires_grad=True)
        with Tape() as tape:
            loss = x * x * x
        self.assertAlmostEqual(float(backward(tape, loss)[x]), 27.0)


class TestKnownValues(SimpleTestCase):
    def test_bilinear_sample_corners_centre_and_clamp(self) -> None:
        feature_map = Tensor(np.array([[0.0, 2.0], [4.0, 6.0]]).reshape(2, 2, 1))
        points = Tensor(np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.5], [-5.0, -5.0]]), requires_grad=True)
        with Tape() as tape:
            samples = ops.bilinear_sample(feature_map, points)
            loss = ops.sum(samples)
        np.testing.assert_allclose(samples.data[:, 0], [0.0, 6.0, 3.0, 0.0])
        # out-of-range points clamp to the border and carry no coordinate gradient
        np.testing.assert_array_equal(backward(tape, loss)[points][3], [0.0, 0.0])

    def test_softmax_cross_entropy_gradient(self) -> None:
        logits = Tensor(np.zeros(2), requires_grad=True)
        with Tape() as tape:
            loss = -ops.log(ops.slice(ops.softmax(logits), 0))
        self.assertAlmostEqual(float(loss.data), np.log(2.0))
        np.testing.assert_allclose(backward(tape, loss)[logits], [-0.5, 0.5])


class TestGradCheck(SimpleTestCase):
    """Central-difference checks of every primitive on random instances."""

    trials = 20

    def setUp(self) -> None:
        self.rng = np.random.default_rng(1234)

    def _check(self, make: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]) -> None:
        for _ in range(self.trials):
            f, inputs = make(self.rng)
            result = grad_check(f, inputs, eps=1e-5, tol=1e-4)
            self.assertTrue(result.passed, f"max error {result.max_error}")

    def _weighted(self, rng: np.random.Generator, f: Callable[..., Tensor]) -> Callable[..., Tensor]:
        # a random projection so every output coordinate matters
        cache: dict[tuple[int, ...], Tensor] = {}

        def scalar(*xs: Tensor) -> Tensor:
            out = f(*xs)
            if out.shape not in cache:
                cache[out.shape] = Tensor(rng.uniform(-1.0, 1.0, size=out.shape))
            return ops.sum(ops.mul(out, cache[out.shape]))

        return scalar

    def test_elementwise_binary(self) -> None:
        for op in (ops.add, ops.sub, ops.mul):
            self._check(lambda rng, op=op: (self._weighted(rng, op), [_rand(rng, 3, 4), _rand(rng, 4)]))
        self._check(lambda rng: (self._weighted(rng, ops.div), [_rand(rng, 3, 4), _rand(rng, 4, low=0.5, high=2.0)]))

    def test_matmul(self) -> None:
        self._check(lambda rng: (self._weighted(rng, ops.matmul), [_rand(rng, 3, 4), _rand(rng, 4, 2)]))
        self._check(lambda rng: (self._weighted(rng, ops.matmul), [_rand(rng, 3, 4), _rand(rng, 4)]))
        self._check(lambda rng: (self._weighted(rng, ops.matmul), [_rand(rng, 4), _rand(rng, 4, 2)]))

    def test_unary(self) -> None:
        for op in (ops.sigmoid, ops.tanh, ops.exp):
            self._check(lambda rng, op=op: (self._weighted(rng, op), [_rand(rng, 5)]))
        self._check(lambda rng: (self._weighted(rng, ops.log), [_rand(rng, 5, low=0.2, high=2.0)]))

    def test_relu_away_from_kink(self) -> None:
        def make(rng: np.random.Generator) -> tuple[Callable[..., Tensor], list[Tensor]]:
            values = rng.uniform(0.1, 1.0, size=6) * rng.choice([-1.0, 1.0], size=6)
            return self._weighted(rng, ops.relu), [Tensor(values)]

        self._check(make)

    def test_softmax(self) -> None:
        self._check(lambda rng: (self._weighted(rng, ops.softmax), [_rand(rng, 3, 4)]))
        self._check(lambda rng: (self._weighted(rng, lambda x: ops.softmax(x, axis=1)), [_rand(rng, 3, 4)]))

    def test_reductions(self) -> None:
        self._check(lambda rng: (self._weighted(rng, lambda x: ops.sum(x, axis=0)), [_rand(rng, 3, 4)]))
        self._check(lambda rng: (self._weighted(rng, lambda x: ops.max(x, axis=1)), [_rand(rng, 3, 4)]))
        self._check(lambda rng: (self._weighted(rng, ops.max), [_rand(rng, 3, 4)]))

    def test_structural(self) -> None:
        self._check(lambda rng: (self._weighted(rng, lambda a, b: ops.concat([a, b])), [_rand(rng, 3), _rand(rng, 2)]))
        self._check(lambda rng: (self._weighted(rng, lambda a, b: ops.stack([a, b])), [_rand(rng, 3), _rand(rng, 3)]))
        self._check(lambda rng: (self._weighted(rng, lambda x: ops.gather(x, [2, 0, 2])), [_rand(rng, 4, 3)]))
        self._check(lambda rng: (self._weighted(rng, lambda x: ops.slice(x, (slice(None, None, 2), 1))), [_rand(rng, 5, 3)]))
        self._check(lambda rng: (self._weighted(rng, lambda x: ops.reshape(x, (2, 6))), [_rand(rng, 3, 4)]))
        self._check(lambda rng: (self._weighted(rng, ops.transpose), [_rand(rng, 3, 4)]))

    def test_conv2d(self) -> None:
        self.trials = 5
        for stride, padding in ((1, 0), (2, 2), (1, 1)):
            self._check(
                lambda rng, s=stride, p=padding: (
                    self._weighted(rng, lambda x, k: ops.conv2d(x, k, stride=s, padding=p)),
                    [_rand(rng, 6, 6, 2), _rand(rng, 3, 3, 2, 3)],
                )
            )

    def test_max_pool_region(self) -> None:
        self._check(lambda rng: (self._weighted(rng, lambda x: ops.max_pool_region(x, (1, 0, 3, 2))), [_rand(rng, 4, 4, 3)]))

    def test_bilinear_sample(self) -> None:
        def make(rng: np.random.Generator) -> tuple[Callable[..., Tensor], list[Tensor]]:
            points = rng.uniform(0.1, 3.9, size=(6, 2))
            # keep away from integer coordinates where the interpolant has kinks
            points = np.floor(points) + np.clip(points - np.floor(points), 0.1, 0.9)
            return self._weighted(rng, ops.bilinear_sample), [_rand(rng, 5, 5, 2), Tensor(points)]

        self._check(make)


class TestGradCheckValidation(SimpleTestCase):
    def test_eps_range(self) -> None:
        with self.assertRaises(ValueError):
            grad_check(lambda x: ops.sum(x), [Tensor([1.0])], eps=1e-2)

    def test_non_scalar(self) -> None:
        with self.assertRaises(ShapeError):
            grad_check(lambda x: x, [Tensor([1.0, 2.0])])

    def test_non_finite_forward(self) -> None:
        # log at a non-positive input is not finite
        with self.assertRaises(ValueError):
            grad_check(lambda x: ops.sum(ops.log(x)), [Tensor([-1.0])])
