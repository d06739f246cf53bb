import unittest

import numpy as np

from ssdepth import gradsuite
from ssdepth.diffcore import Tensor, inject_fault, ops
from ssdepth.diffcore.gradcheck import gradient_check, rel_error


class TestGradientCheck(unittest.TestCase):

    def test_sum_exp(self) -> None:
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(-1.0, 1.0, 8), requires_grad=True)
        report = gradient_check(lambda: ops.sum(ops.exp(x)), [x], step=1e-3, tol=1e-4, name='sum-exp')
        self.assertTrue(report.passed, str(report))
        self.assertEqual(report.n_coords, 8)
        self.assertLess(report.max_rel_err, 1e-4)

    def test_bilinear_mean(self) -> None:
        rng = np.random.default_rng(1)
        image = Tensor(rng.random((1, 2, 5, 6)), requires_grad=True)
        u = rng.integers(0, 5, (1, 3, 4)) + rng.uniform(0.1, 0.9, (1, 3, 4))
        v = rng.integers(0, 4, (1, 3, 4)) + rng.uniform(0.1, 0.9, (1, 3, 4))
        grid = Tensor(np.stack([u, v], axis=-1), requires_grad=True)
        report = gradient_check(lambda: ops.mean(ops.bilinear_sample(image, grid)), [image, grid])
        self.assertTrue(report.passed, str(report))

    def test_samples_at_most_max_coords(self) -> None:
        x = Tensor(np.linspace(0.5, 1.5, 500), requires_grad=True)
        report = gradient_check(lambda: ops.sum(x * x * x), [x], max_coords=100)
        self.assertEqual(report.n_coords, 100)
        self.assertTrue(report.passed, str(report))

    def test_leaves_are_restored(self) -> None:
        data = np.array([0.3, -0.2, 0.7])
        x = Tensor(data.copy(), requires_grad=True)
        gradient_check(lambda: ops.sum(ops.sigmoid(x)), [x])
        np.testing.assert_array_equal(x.data, data)

    def test_non_finite_output_fails_with_location(self) -> None:
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        report = gradient_check(lambda: ops.sum(x * float('inf')), [x])
        self.assertFalse(report.passed)
        self.assertIn('non-finite', report.failure)

    def test_injected_fault_fails(self) -> None:
        x = Tensor(np.array([0.3, -0.4, 0.5]), requires_grad=True)
        with inject_fault('exp'):
            report = gradient_check(lambda: ops.sum(ops.exp(x)), [x])
        self.assertFalse(report.passed)
        self.assertIn('FAIL', str(report))

    def test_rejects_bad_step(self) -> None:
        x = Tensor(np.array([1.0]), requires_grad=True)
        with self.assertRaises(ValueError):
            gradient_check(lambda: ops.sum(x), [x], step=0.0)

    def test_rel_error_floor(self) -> None:
        self.assertEqual(rel_error(0.0, 0.0), 0.0)
        self.assertAlmostEqual(rel_error(1.0, 0.5), 0.5)


class TestGradientSuite(unittest.TestCase):

    def test_every_case_passes(self) -> None:
        for report in gradsuite.run_suite():
            self.assertTrue(report.passed, str(report))
            self.assertGreaterEqual(report.n_coords, 100, report.name)

    def test_pose_network_end_to_end(self) -> None:
        self.assertIn('posenet', gradsuite.case_names())
        clean = gradsuite.run_case('posenet', seed=3)
        self.assertTrue(clean.passed, str(clean))
        (faulty,) = gradsuite.run_suite(['posenet'], fault=['conv2d'])
        self.assertFalse(faulty.passed)

    def test_covers_every_op_kind(self) -> None:
        from ssdepth.diffcore import OP_KINDS
        self.assertEqual(set(gradsuite.OP_CASES), set(OP_KINDS))

    def test_fault_names_the_op(self) -> None:
        reports = gradsuite.run_suite(['relu', 'sigmoid'], fault=['relu'])
        failed = [r.name for r in reports if not r.passed]
        self.assertEqual(failed, ['relu'])

    def test_unknown_case(self) -> None:
        with self.assertRaises(ValueError):
            gradsuite.run_case('fft')
