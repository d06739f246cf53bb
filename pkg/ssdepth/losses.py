"""Photometric, distillation, masking and feature-alignment losses.

Images are ``(N, C, H, W)`` tensors in [0, 1]; per-pixel maps are
``(N, 1, H, W)``; validity masks are boolean ``(N, 1, H, W)`` arrays.
"""
import logging

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ssdepth.camgeom import Intrinsics, PoseBatch, synthesize_view
from ssdepth.diffcore import ops
from ssdepth.diffcore.tensor import FloatArray, Tensor, constant, no_grad
from ssdepth.errors import DomainError, GeometryError, ShapeError

logger = logging.getLogger(__name__)

ALPHA = 0.85
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# stands in for pe at pixels a warp cannot see; pe itself never exceeds 1
INVALID_PENALTY = 10.0

KEEP_TEACHER_REASONABLE = 'keep-teacher-reasonable'
KEEP_TEACHER_WORSE = 'keep-teacher-worse'
MASK_CONVENTIONS = (KEEP_TEACHER_REASONABLE, KEEP_TEACHER_WORSE)
# accepted spelling of the literal inequality
MASK_ALIASES = {'eq5-literal': KEEP_TEACHER_WORSE}

TERM_NAMES = ('photometric', 'distill', 'teacher', 'semantic', 'smoothness')

Warp = Tuple[Tensor, np.ndarray]


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape or a.ndim != 4:
        raise ShapeError(op, [a.shape, b.shape])


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel SSIM over 3x3 windows with 1-pixel replicate padding."""
    _check_same('ssim', a, b)
    pa = ops.pad_replicate(a, 1)
    pb = ops.pad_replicate(b, 1)
    mu_a = ops.avgpool2d(pa)
    mu_b = ops.avgpool2d(pb)
    mu_ab = mu_a * mu_b
    mu_a_sq = mu_a * mu_a
    mu_b_sq = mu_b * mu_b
    sigma_a = ops.avgpool2d(pa * pa) - mu_a_sq
    sigma_b = ops.avgpool2d(pb * pb) - mu_b_sq
    sigma_ab = ops.avgpool2d(pa * pb) - mu_ab

    numerator = (mu_ab * 2.0 + SSIM_C1) * (sigma_ab * 2.0 + SSIM_C2)
    denominator = (mu_a_sq + mu_b_sq + SSIM_C1) * (sigma_a + sigma_b + SSIM_C2)
    return numerator / denominator


def photometric_error(a: Tensor, b: Tensor) -> Tensor:
    """``(alpha/2)(1 - SSIM) + (1 - alpha)|a - b|`` averaged over channels."""
    _check_same('photometric_error', a, b)
    per_channel = (1.0 - ssim(a, b)) * (ALPHA / 2.0) + ops.abs(a - b) * (1.0 - ALPHA)
    return ops.mean(per_channel, axis=1, keepdims=True)


def min_reprojection(target: Tensor, warps: Sequence[Warp]) -> Tuple[Tensor, np.ndarray]:
    """Pixelwise minimum of pe over warps, ignoring pixels a warp cannot see.

    Returns the minimum map and the mask of pixels valid in at least one warp.
    Pixels valid nowhere hold :data:`INVALID_PENALTY`.
    """
    if not warps:
        raise ValueError('min_reprojection: at least one warp is required')
    best: Optional[Tensor] = None
    any_valid = np.zeros((target.shape[0], 1) + target.shape[2:], dtype=bool)
    for image, valid in warps:
        if valid.shape != any_valid.shape:
            raise ShapeError('min_reprojection', [valid.shape, any_valid.shape])
        keep = constant(valid.astype(np.float64), target)
        pe = photometric_error(target, image) * keep + (1.0 - keep) * INVALID_PENALTY
        best = pe if best is None else ops.minimum(best, pe)
        any_valid |= valid
    assert best is not None
    return best, any_valid


def reprojection_loss(target: Tensor, warps: Sequence[Warp]) -> Tuple[Tensor, Tensor]:
    """Mean of the min-reprojection map over pixels valid in at least one warp."""
    best, any_valid = min_reprojection(target, warps)
    count = int(any_valid.sum())
    if count == 0:
        raise GeometryError('reprojection_loss: no pixel is valid in any warp')
    keep = constant(any_valid.astype(np.float64), best)
    masked = best * keep
    return ops.sum(masked) / float(count), masked


def distillation_loss(student: Tensor, teacher: Tensor) -> Tensor:
    """Scale-normalised depth difference ``|D_s - D_t| / D_t``."""
    _check_same('distillation_loss', student, teacher)
    if np.any(teacher.data <= 0):
        raise DomainError('distillation_loss', 'teacher depth must be strictly positive')
    if np.any(student.data <= 0):
        raise DomainError('distillation_loss', 'student depth must be strictly positive')
    return ops.abs(student - teacher) / teacher


@dataclass
class TeacherMask:
    mask: np.ndarray
    student_pe: FloatArray
    teacher_pe: FloatArray

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())


def teacher_mask(
    target: Tensor,
    adjacent: Sequence[Tensor],
    student_depth: Tensor,
    teacher_depth: Tensor,
    teacher_poses: Sequence[PoseBatch],
    K: Intrinsics,
    convention: str = KEEP_TEACHER_REASONABLE,
) -> TeacherMask:
    """Compare how well student and teacher depth explain the original frames.

    Both depths are warped with the teacher's poses. The default convention
    keeps pixels where the teacher's reprojection error is no worse than the
    student's (ties kept); ``keep-teacher-worse`` (also accepted as
    ``eq5-literal``) keeps the opposite set.
    """
    convention = MASK_ALIASES.get(convention, convention)
    if convention not in MASK_CONVENTIONS:
        raise ValueError(f"Unknown mask convention: '{convention}'")
    if len(adjacent) != len(teacher_poses):
        raise ValueError('teacher_mask: one pose per adjacent frame is required')

    with no_grad():
        ds = student_depth.detach()
        dt = teacher_depth.detach()
        s_warps = [synthesize_view(src, ds, pose, K) for src, pose in zip(adjacent, teacher_poses)]
        t_warps = [synthesize_view(src, dt, pose, K) for src, pose in zip(adjacent, teacher_poses)]
        s_pe, _ = min_reprojection(target, s_warps)
        t_pe, _ = min_reprojection(target, t_warps)

    if convention == KEEP_TEACHER_REASONABLE:
        mask = t_pe.data <= s_pe.data
    else:
        mask = t_pe.data > s_pe.data
    return TeacherMask(mask, s_pe.data, t_pe.data)


def teacher_loss(mask: TeacherMask, distill_map: Tensor) -> Tensor:
    """Masked distillation loss normalised by the number of kept pixels."""
    if mask.mask.shape != distill_map.shape:
        raise ShapeError('teacher_loss', [mask.mask.shape, distill_map.shape])
    count = int(mask.mask.sum())
    keep = constant(mask.mask.astype(np.float64), distill_map)
    return ops.sum(distill_map * keep) / float(max(count, 1))


def semantic_loss(student_features: Tensor, reference_features: Tensor) -> Tensor:
    """One minus mean per-pixel cosine similarity of ``(N, D, H, W)`` features."""
    if student_features.ndim != 4 or student_features.shape[1] < 1:
        raise ShapeError('semantic_loss', [student_features.shape, reference_features.shape])
    cos = ops.cosine_similarity(student_features, reference_features, axis=1)
    return 1.0 - ops.mean(cos)


def smoothness_loss(disparity: Tensor, image: Tensor) -> Tensor:
    """Edge-aware first-order smoothness of mean-normalised disparity."""
    if disparity.ndim != 4 or disparity.shape[1] != 1 or disparity.shape[2:] != image.shape[2:]:
        raise ShapeError('smoothness_loss', [disparity.shape, image.shape])
    n, _, h, w = disparity.shape
    norm = disparity / ops.broadcast(ops.mean(disparity, axis=(2, 3), keepdims=True), disparity.shape)

    pixels = image.data
    edge_x = np.exp(-np.abs(pixels[..., :, 1:] - pixels[..., :, :-1]).mean(axis=1, keepdims=True))
    edge_y = np.exp(-np.abs(pixels[..., 1:, :] - pixels[..., :-1, :]).mean(axis=1, keepdims=True))

    grad_x = ops.abs(ops.slice(norm, 3, 1, w) - ops.slice(norm, 3, 0, w - 1))
    grad_y = ops.abs(ops.slice(norm, 2, 1, h) - ops.slice(norm, 2, 0, h - 1))
    return ops.mean(grad_x * constant(edge_x, norm)) + ops.mean(grad_y * constant(edge_y, norm))


@dataclass
class LossReport:
    total: Tensor
    terms: Dict[str, float]
    weights: Dict[str, float]
    maps: Dict[str, FloatArray] = field(default_factory=dict)

    def weighted_sum(self) -> float:
        return float(sum(self.weights.get(name, 0.0) * value for name, value in self.terms.items()))

    def check_decomposition(self, tol: float = 1e-9) -> bool:
        total = self.total.item()
        return abs(total - self.weighted_sum()) <= tol * max(1.0, abs(total))


def combine_losses(
    terms: Mapping[str, Tensor],
    weights: Mapping[str, float],
    maps: Optional[Mapping[str, FloatArray]] = None,
) -> LossReport:
    """Weighted sum of scalar loss terms; zero-weight terms are logged only."""
    if not terms:
        raise ValueError('combine_losses: no loss terms')
    for name in terms:
        if name not in TERM_NAMES:
            raise ValueError(f"Unknown loss term: '{name}'")
        if weights.get(name, 0.0) < 0:
            raise ValueError(f"Loss weight for '{name}' must be non-negative")

    contributions: List[Tensor] = [terms[name] * float(weights[name]) for name in terms if weights.get(name, 0.0) > 0]
    if contributions:
        total = contributions[0]
        for part in contributions[1:]:
            total = total + part
    else:
        first = next(iter(terms.values()))
        total = first * 0.0

    values = {name: terms[name].item() for name in terms}
    used = {name: float(weights.get(name, 0.0)) for name in terms}
    return LossReport(total, values, used, dict(maps or {}))
