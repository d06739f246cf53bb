import unittest

import numpy as np

from ssdepth.camgeom import Intrinsics, Pose, PoseBatch
from ssdepth.diffcore import Tensor, backward
from ssdepth.errors import DomainError, GeometryError, ShapeError
from ssdepth.losses import *


def images(seed: int, shape: tuple = (2, 3, 8, 8)) -> Tensor:
    return Tensor(np.random.default_rng(seed).random(shape))


class TestPhotometric(unittest.TestCase):

    def test_ssim_of_identical_images_is_one(self) -> None:
        a = images(0)
        np.testing.assert_allclose(ssim(a, a).data, 1.0, atol=1e-12)

    def test_ssim_of_constant_images(self) -> None:
        a = Tensor(np.full((1, 1, 4, 4), 0.3))
        b = Tensor(np.full((1, 1, 4, 4), 0.7))
        expected = (2 * 0.3 * 0.7 + SSIM_C1) / (0.3 ** 2 + 0.7 ** 2 + SSIM_C1)
        np.testing.assert_allclose(ssim(a, b).data, expected, atol=1e-9)
        pe = photometric_error(a, b).data
        np.testing.assert_allclose(pe, ALPHA / 2.0 * (1.0 - expected) + (1.0 - ALPHA) * 0.4, atol=1e-9)

    def test_ssim_of_inverted_checkerboard_is_negative(self) -> None:
        board = (np.indices((8, 8)).sum(axis=0) % 2).astype(np.float64)[None, None]
        self.assertLess(float(ssim(Tensor(board), Tensor(1.0 - board)).data.mean()), 0.0)

    def test_pe_of_identical_images_is_zero(self) -> None:
        a = images(1)
        pe = photometric_error(a, a)
        self.assertEqual(pe.shape, (2, 1, 8, 8))
        np.testing.assert_allclose(pe.data, 0.0, atol=1e-12)

    def test_pe_is_bounded(self) -> None:
        pe = photometric_error(images(2), images(3)).data
        self.assertTrue(np.all(pe >= 0.0))
        self.assertTrue(np.all(pe <= 1.0))

    def test_pe_is_symmetric(self) -> None:
        a, b = images(20), images(21)
        np.testing.assert_allclose(photometric_error(a, b).data, photometric_error(b, a).data, rtol=0, atol=1e-15)

    def test_pe_shape_mismatch(self) -> None:
        with self.assertRaises(ShapeError):
            photometric_error(images(0), images(0, (2, 3, 8, 4)))

    def test_min_reprojection_takes_best_warp(self) -> None:
        target = images(4)
        valid = np.ones((2, 1, 8, 8), dtype=bool)
        best, any_valid = min_reprojection(target, [(images(5), valid), (target, valid)])
        np.testing.assert_allclose(best.data, 0.0, atol=1e-12)
        self.assertTrue(any_valid.all())
        for image in (images(5), target):
            pe = photometric_error(target, image).data
            self.assertTrue(np.all(best.data <= pe))

    def test_single_warp_is_its_pe_map(self) -> None:
        target, other = images(17), images(18)
        best, _ = min_reprojection(target, [(other, np.ones((2, 1, 8, 8), dtype=bool))])
        np.testing.assert_array_equal(best.data, photometric_error(target, other).data)

    def test_invalid_pixels_are_ignored(self) -> None:
        target = images(6)
        good = np.ones((2, 1, 8, 8), dtype=bool)
        good[:, :, :, 0] = False
        none = np.zeros_like(good)
        best, any_valid = min_reprojection(target, [(target, good), (images(7), none)])
        np.testing.assert_allclose(best.data[:, :, :, 1:], 0.0, atol=1e-12)
        np.testing.assert_array_equal(best.data[:, :, :, 0], INVALID_PENALTY)
        np.testing.assert_array_equal(any_valid, good)

    def test_reprojection_loss_averages_valid_pixels(self) -> None:
        target = images(8)
        other = images(9)
        valid = np.zeros((2, 1, 8, 8), dtype=bool)
        valid[0] = True
        loss, masked = reprojection_loss(target, [(other, valid)])
        expected = photometric_error(target, other).data[0].mean()
        self.assertAlmostEqual(loss.item(), expected, places=12)
        np.testing.assert_array_equal(masked.data[1], 0.0)

    def test_reprojection_loss_with_nothing_valid(self) -> None:
        target = images(10)
        with self.assertRaises(GeometryError):
            reprojection_loss(target, [(target, np.zeros((2, 1, 8, 8), dtype=bool))])

    def test_requires_a_warp(self) -> None:
        with self.assertRaises(ValueError):
            min_reprojection(images(0), [])


class TestDistillation(unittest.TestCase):

    def test_equal_depths(self) -> None:
        depth = Tensor(np.full((1, 1, 4, 4), 3.0))
        np.testing.assert_array_equal(distillation_loss(depth, depth).data, 0.0)

    def test_scale_normalised(self) -> None:
        teacher = Tensor(np.random.default_rng(0).uniform(0.5, 40.0, (1, 1, 4, 4)))
        student = Tensor(teacher.data * 1.1)
        np.testing.assert_allclose(distillation_loss(student, teacher).data, 0.1, atol=1e-12)

    def test_non_positive_depth(self) -> None:
        good = Tensor(np.ones((1, 1, 2, 2)))
        bad = Tensor(np.array([[[[1.0, 0.0], [1.0, 1.0]]]]))
        with self.assertRaises(DomainError):
            distillation_loss(good, bad)
        with self.assertRaises(DomainError):
            distillation_loss(bad, good)

    def test_teacher_loss_normalises_by_kept_pixels(self) -> None:
        values = np.arange(16.0).reshape(1, 1, 4, 4)
        keep = np.zeros((1, 1, 4, 4), dtype=bool)
        keep[0, 0, 0, :2] = True
        mask = TeacherMask(keep, np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 4)))
        self.assertAlmostEqual(teacher_loss(mask, Tensor(values)).item(), 0.5)
        self.assertAlmostEqual(mask.coverage, 2 / 16)

    def test_teacher_loss_matches_masked_mean(self) -> None:
        rng = np.random.default_rng(19)
        values = rng.random((2, 1, 6, 6))
        for keep in (rng.random((2, 1, 6, 6)) < 0.4, np.ones((2, 1, 6, 6), dtype=bool)):
            mask = TeacherMask(keep, np.zeros_like(values), np.zeros_like(values))
            self.assertAlmostEqual(teacher_loss(mask, Tensor(values)).item(), values[keep].mean(), places=12)

    def test_empty_mask_gives_zero_loss_and_gradient(self) -> None:
        student = Tensor(np.full((1, 1, 4, 4), 2.0), requires_grad=True)
        teacher = Tensor(np.full((1, 1, 4, 4), 3.0))
        empty = np.zeros((1, 1, 4, 4), dtype=bool)
        mask = TeacherMask(empty, np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 4)))
        loss = teacher_loss(mask, distillation_loss(student, teacher))
        self.assertEqual(loss.item(), 0.0)
        np.testing.assert_array_equal(backward(loss)[student], 0.0)

    def test_teacher_loss_shape(self) -> None:
        mask = TeacherMask(np.ones((1, 1, 2, 2), dtype=bool), np.zeros(1), np.zeros(1))
        with self.assertRaises(ShapeError):
            teacher_loss(mask, Tensor(np.ones((1, 1, 4, 4))))


class TestTeacherMask(unittest.TestCase):

    def setUp(self) -> None:
        rng = np.random.default_rng(11)
        self.K = Intrinsics(16.0, 16.0, 7.5, 7.5, 16, 16)
        self.target = Tensor(rng.random((1, 3, 16, 16)))
        self.adjacent = [Tensor(rng.random((1, 3, 16, 16))) for _ in range(2)]
        self.poses = [
            PoseBatch.from_poses([Pose(np.zeros(3), np.array([0.1, 0.0, 0.0]))]),
            PoseBatch.from_poses([Pose(np.zeros(3), np.array([-0.1, 0.0, 0.0]))]),
        ]
        self.depth = Tensor(rng.uniform(2.0, 8.0, (1, 1, 16, 16)))

    def test_ties_are_kept_by_default(self) -> None:
        mask = teacher_mask(self.target, self.adjacent, self.depth, self.depth, self.poses, self.K)
        self.assertTrue(mask.mask.all())
        np.testing.assert_array_equal(mask.student_pe, mask.teacher_pe)

    def test_inverted_convention_drops_ties(self) -> None:
        mask = teacher_mask(
            self.target, self.adjacent, self.depth, self.depth, self.poses, self.K, KEEP_TEACHER_WORSE
        )
        self.assertFalse(mask.mask.any())

    def test_literal_spelling_drops_ties(self) -> None:
        mask = teacher_mask(self.target, self.adjacent, self.depth, self.depth, self.poses, self.K, 'eq5-literal')
        self.assertFalse(mask.mask.any())
        self.assertEqual(MASK_ALIASES['eq5-literal'], KEEP_TEACHER_WORSE)

    def test_conventions_are_complementary(self) -> None:
        student = Tensor(self.depth.data * 1.7)
        keep = teacher_mask(self.target, self.adjacent, student, self.depth, self.poses, self.K)
        drop = teacher_mask(
            self.target, self.adjacent, student, self.depth, self.poses, self.K, KEEP_TEACHER_WORSE
        )
        np.testing.assert_array_equal(keep.mask, ~drop.mask)

    def test_unknown_convention(self) -> None:
        with self.assertRaises(ValueError):
            teacher_mask(self.target, self.adjacent, self.depth, self.depth, self.poses, self.K, 'strict')

    def test_pose_count(self) -> None:
        with self.assertRaises(ValueError):
            teacher_mask(self.target, self.adjacent, self.depth, self.depth, self.poses[:1], self.K)


class TestSemanticAndSmoothness(unittest.TestCase):

    def test_identical_features(self) -> None:
        features = images(12, (2, 5, 3, 3))
        self.assertAlmostEqual(semantic_loss(features, features).item(), 0.0, places=12)

    def test_orthogonal_features(self) -> None:
        a = Tensor(np.array([1.0, 0.0, 2.0, 0.0]).reshape(1, 4, 1, 1))
        b = Tensor(np.array([0.0, 3.0, 0.0, 1.0]).reshape(1, 4, 1, 1))
        self.assertEqual(semantic_loss(a, b).item(), 1.0)

    def test_opposite_features(self) -> None:
        features = images(13, (1, 4, 2, 2))
        self.assertAlmostEqual(semantic_loss(features, Tensor(-features.data)).item(), 2.0, places=12)

    def test_semantic_loss_range(self) -> None:
        rng = np.random.default_rng(22)
        for _ in range(20):
            a = Tensor(rng.normal(size=(2, 6, 3, 4)))
            b = Tensor(rng.normal(size=(2, 6, 3, 4)))
            value = semantic_loss(a, b).item()
            self.assertGreaterEqual(value, 0.0)
            self.assertLessEqual(value, 2.0)

    def test_constant_disparity_is_smooth(self) -> None:
        disparity = Tensor(np.full((1, 1, 6, 6), 0.3))
        self.assertEqual(smoothness_loss(disparity, images(14, (1, 3, 6, 6))).item(), 0.0)

    def test_smoothness_is_scale_invariant(self) -> None:
        disparity = images(15, (1, 1, 6, 6)).data + 0.5
        image = images(16, (1, 3, 6, 6))
        a = smoothness_loss(Tensor(disparity), image).item()
        b = smoothness_loss(Tensor(disparity * 4.0), image).item()
        self.assertAlmostEqual(a, b, places=12)
        self.assertGreater(a, 0.0)


class TestCombine(unittest.TestCase):

    def test_weighted_sum(self) -> None:
        terms = {'photometric': Tensor(0.4), 'semantic': Tensor(0.2), 'smoothness': Tensor(5.0)}
        report = combine_losses(terms, {'photometric': 1.0, 'semantic': 0.1, 'smoothness': 0.0})
        self.assertAlmostEqual(report.total.item(), 0.42)
        self.assertTrue(report.check_decomposition())
        self.assertEqual(report.terms['smoothness'], 5.0)

    def test_all_zero_weights(self) -> None:
        report = combine_losses({'semantic': Tensor(0.7)}, {'semantic': 0.0})
        self.assertEqual(report.total.item(), 0.0)

    def test_rejects_unknown_and_negative(self) -> None:
        with self.assertRaises(ValueError):
            combine_losses({'depth': Tensor(1.0)}, {'depth': 1.0})
        with self.assertRaises(ValueError):
            combine_losses({'semantic': Tensor(1.0)}, {'semantic': -1.0})
        with self.assertRaises(ValueError):
            combine_losses({}, {})
