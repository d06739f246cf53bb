import unittest

import numpy as np

from ssdepth.diffcore import Graph, Tensor, backward, forward_op, inject_fault, no_grad, OP_KINDS
from ssdepth.diffcore import ops
from ssdepth.errors import DomainError, NonFiniteError, ShapeError


def leaf(value: object) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


class TestForward(unittest.TestCase):

    def test_add(self) -> None:
        out = forward_op('add', [Tensor([1.0, 2.0]), Tensor([3.0, 4.0])])
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_sigmoid_at_zero(self) -> None:
        self.assertEqual(forward_op('sigmoid', [Tensor(0.0)]).item(), 0.5)

    def test_sigmoid_is_stable_for_large_inputs(self) -> None:
        out = ops.sigmoid(Tensor([-800.0, 800.0]))
        np.testing.assert_allclose(out.data, [0.0, 1.0])

    def test_conv2d_identity_kernel(self) -> None:
        rng = np.random.default_rng(0)
        image = Tensor(rng.random((2, 3, 5, 6)))
        kernel = np.zeros((3, 3, 3, 3))
        for c in range(3):
            kernel[c, c, 1, 1] = 1.0
        out = forward_op('conv2d', [image, Tensor(kernel)], padding=1)
        np.testing.assert_allclose(out.data, image.data)

    def test_conv2d_output_size(self) -> None:
        out = ops.conv2d(Tensor(np.ones((1, 2, 7, 9))), Tensor(np.ones((4, 2, 3, 3))), stride=2, padding=1)
        self.assertEqual(out.shape, (1, 4, 4, 5))
        self.assertEqual(ops.conv_output_size(7, 3, 2, 1), 4)

    def test_avgpool_constant(self) -> None:
        out = ops.avgpool2d(Tensor(np.full((1, 1, 4, 5), 0.25)))
        self.assertEqual(out.shape, (1, 1, 2, 3))
        np.testing.assert_allclose(out.data, 0.25)

    def test_pad_replicate(self) -> None:
        x = Tensor(np.arange(6.0).reshape(1, 1, 2, 3))
        out = ops.pad_replicate(x)
        self.assertEqual(out.shape, (1, 1, 4, 5))
        np.testing.assert_array_equal(out.data[0, 0, 0], [0, 0, 1, 2, 2])
        np.testing.assert_array_equal(out.data[0, 0, 3], [3, 3, 4, 5, 5])

    def test_bilinear_sample_at_pixel_centers_and_midpoints(self) -> None:
        image = Tensor(np.arange(12.0).reshape(1, 1, 3, 4))
        grid = Tensor(np.array([[[[0.0, 0.0], [3.0, 2.0], [1.5, 0.0], [1.0, 0.5]]]]))
        out = ops.bilinear_sample(image, grid)
        np.testing.assert_allclose(out.data.reshape(-1), [0.0, 11.0, 1.5, 3.0])

    def test_bilinear_sample_edge_clamp(self) -> None:
        image = Tensor(np.arange(12.0).reshape(1, 1, 3, 4))
        grid = Tensor(np.array([[[[-2.0, 1.0], [7.0, 1.0]]]]))
        out = ops.bilinear_sample(image, grid)
        np.testing.assert_allclose(out.data.reshape(-1), [4.0, 7.0])

    def test_concat_and_slice(self) -> None:
        a = Tensor(np.ones((2, 1, 3)))
        b = Tensor(np.zeros((2, 2, 3)))
        out = ops.concat([a, b], axis=1)
        self.assertEqual(out.shape, (2, 3, 3))
        np.testing.assert_array_equal(ops.slice(out, 1, 0, 1).data, a.data)

    def test_minimum_and_clamp(self) -> None:
        np.testing.assert_array_equal(ops.minimum(Tensor([1.0, 5.0]), Tensor([2.0, 3.0])).data, [1.0, 3.0])
        np.testing.assert_array_equal(ops.clamp(Tensor([-2.0, 0.5, 3.0]), 0.0, 1.0).data, [0.0, 0.5, 1.0])

    def test_cosine_similarity(self) -> None:
        a = Tensor(np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]]).T[None])
        b = Tensor(np.array([[3.0, 0.0], [0.0, -1.0], [1.0, 1.0]]).T[None])
        np.testing.assert_allclose(ops.cosine_similarity(a, b, axis=1).data, [[1.0, -1.0, 0.0]])

    def test_upsample_and_permute(self) -> None:
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        up = ops.upsample2x(x)
        self.assertEqual(up.shape, (1, 1, 4, 4))
        np.testing.assert_array_equal(up.data[0, 0, :, 0], [0, 0, 2, 2])
        self.assertEqual(ops.permute(up, (0, 2, 3, 1)).shape, (1, 4, 4, 1))

    def test_rodrigues_values(self) -> None:
        theta = np.array([0.0, 0.5, 2.0])
        out = ops.rodrigues(Tensor(theta ** 2)).data
        safe = np.where(theta > 0, theta, 1.0)
        expected_a = np.where(theta > 0, np.sin(safe) / safe, 1.0)
        expected_b = np.where(theta > 0, (1 - np.cos(safe)) / safe ** 2, 0.5)
        np.testing.assert_allclose(out[:, 0], expected_a, atol=1e-12)
        np.testing.assert_allclose(out[:, 1], expected_b, atol=1e-12)
        tiny = ops.rodrigues(Tensor([1e-16])).data
        np.testing.assert_allclose(tiny[0], [1.0, 0.5], atol=1e-12)

    def test_every_kind_dispatches(self) -> None:
        for kind in OP_KINDS:
            if kind == 'concat':
                continue
            self.assertIsNotNone(ops._DISPATCH.get(kind), kind)

    def test_unknown_kind(self) -> None:
        with self.assertRaises(ValueError):
            forward_op('fft', [Tensor([1.0])])


class TestErrors(unittest.TestCase):

    def test_shape_mismatch_names_op(self) -> None:
        with self.assertRaises(ShapeError) as ctx:
            ops.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
        self.assertEqual(ctx.exception.op, 'add')
        self.assertEqual(ctx.exception.shapes, ((2,), (3,)))
        self.assertIn('add', str(ctx.exception))

    def test_trailing_broadcast_is_allowed(self) -> None:
        out = ops.mul(Tensor(np.ones((2, 3))), Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data[1], [1.0, 2.0, 3.0])

    def test_domain_errors(self) -> None:
        with self.assertRaises(DomainError):
            ops.log(Tensor([1.0, 0.0]))
        with self.assertRaises(DomainError):
            ops.div(Tensor([1.0]), Tensor([0.0]))
        with self.assertRaises(DomainError):
            ops.sqrt(Tensor([-1.0]))

    def test_exp_overflow(self) -> None:
        with self.assertRaises(NonFiniteError):
            ops.exp(Tensor([1000.0]))

    def test_matmul_shape(self) -> None:
        with self.assertRaises(ShapeError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestBackward(unittest.TestCase):

    def test_square(self) -> None:
        x = leaf(3.0)
        grads = backward(x * x)
        self.assertEqual(float(grads[x]), 6.0)

    def test_product(self) -> None:
        x, y = leaf(2.0), leaf(5.0)
        grads = backward(x * y)
        self.assertEqual(float(grads[x]), 5.0)
        self.assertEqual(float(grads[y]), 2.0)

    def test_shared_subexpression_accumulates(self) -> None:
        x = leaf([1.0, 2.0])
        y = ops.exp(x)
        grads = backward(ops.sum(y * y + y))
        np.testing.assert_allclose(grads[x], 2 * np.exp(2 * x.data) + np.exp(x.data))

    def test_backward_is_linear(self) -> None:
        x = leaf(np.random.default_rng(0).uniform(0.5, 1.5, (3, 4)))

        def f() -> Tensor:
            return ops.sum(ops.exp(x) * x)

        def g() -> Tensor:
            return ops.sum(ops.sigmoid(x * 2.0))

        combined = backward(f() * 0.7 + g() * -2.5)[x]
        np.testing.assert_allclose(combined, 0.7 * backward(f())[x] - 2.5 * backward(g())[x], rtol=1e-12, atol=1e-12)

    def test_non_scalar_output(self) -> None:
        with self.assertRaises(ShapeError):
            backward(leaf([1.0, 2.0]) * 2.0)

    def test_unreachable_leaf_has_zero_gradient(self) -> None:
        x, unused = leaf([1.0, 2.0]), leaf(np.ones((2, 2)))
        grads = backward(ops.sum(x))
        np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))
        self.assertNotIn(unused, grads)

    def test_broadcast_gradient_is_reduced(self) -> None:
        x = leaf(np.ones((2, 1, 3)))
        grads = backward(ops.sum(ops.broadcast(x, (4, 2, 5, 3))))
        np.testing.assert_array_equal(grads[x], np.full((2, 1, 3), 20.0))

    def test_sqrt_subgradient_at_zero(self) -> None:
        x = leaf([0.0, 4.0])
        grads = backward(ops.sum(ops.sqrt(x)))
        np.testing.assert_allclose(grads[x], [0.0, 0.25])

    def test_minimum_ties_route_to_first(self) -> None:
        a, b = leaf([1.0]), leaf([1.0])
        grads = backward(ops.sum(ops.minimum(a, b)))
        self.assertEqual(float(grads[a][0]), 1.0)
        self.assertEqual(float(grads[b][0]), 0.0)

    def test_graph_is_topological(self) -> None:
        x = leaf([1.0, 2.0])
        out = ops.sum(ops.exp(x) * x)
        graph = Graph.trace(out)
        for position, entry in enumerate(graph.records):
            for parent in entry.input_ids:
                self.assertLess(parent, position)
        self.assertIs(graph.records[-1].output, out)
        self.assertEqual(graph.leaves(), [x])

    def test_no_grad_records_nothing(self) -> None:
        x = leaf([1.0])
        with no_grad():
            y = x * 2.0
        self.assertFalse(y.requires_grad)
        self.assertTrue(y.is_leaf)

    def test_detach(self) -> None:
        x = leaf([1.0])
        y = (x * 3.0).detach()
        self.assertFalse(y.requires_grad)
        grads = backward(ops.sum(x + y))
        self.assertEqual(float(grads[x][0]), 1.0)

    def test_inject_fault_scales_one_kind(self) -> None:
        x = leaf([2.0])
        with inject_fault('exp'):
            faulty = backward(ops.sum(ops.exp(x)))[x]
        clean = backward(ops.sum(ops.exp(x)))[x]
        self.assertNotAlmostEqual(float(faulty[0]), float(clean[0]))
        with inject_fault('log'):
            untouched = backward(ops.sum(ops.exp(x)))[x]
        self.assertEqual(float(untouched[0]), float(clean[0]))
