"""Pinhole geometry and differentiable view synthesis.

A :class:`Pose` ``P_{t->s}`` maps points from camera ``t`` coordinates into
camera ``s`` coordinates: ``p_s = R p_t + t``. A camera that physically moves
by ``c`` (no rotation) therefore carries the transform ``t = -c``.

Batched tensors follow the ``(N, C, H, W)`` layout; depth maps are
``(N, 1, H, W)`` z-depths (distance along the optical axis, not ray length).
"""
import logging

from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from ssdepth.diffcore import ops
from ssdepth.diffcore.tensor import FloatArray, Tensor, constant
from ssdepth.errors import DomainError, ShapeError

logger = logging.getLogger(__name__)

# closed-form exponential map below this angle degrades, use first order
SMALL_ANGLE = 1e-8

DEFAULT_Z_MIN = 1e-3


def skew(w: FloatArray) -> FloatArray:
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def so3_exp(w: FloatArray) -> FloatArray:
    w = np.asarray(w, dtype=np.float64)
    angle = float(np.linalg.norm(w))
    if angle < SMALL_ANGLE:
        return np.identity(3) + skew(w)
    axis = w / angle
    s, c = np.sin(angle), np.cos(angle)
    return c * np.identity(3) + s * skew(axis) + (1.0 - c) * np.outer(axis, axis)


def so3_log(R: FloatArray) -> FloatArray:
    R = np.asarray(R, dtype=np.float64)
    cos_angle = max(-1.0, min(1.0, 0.5 * (np.trace(R) - 1.0)))
    angle = float(np.arccos(cos_angle))
    if angle < SMALL_ANGLE:
        skew_w = 0.5 * (R - R.T)
        return np.array([skew_w[2, 1], skew_w[0, 2], skew_w[1, 0]])
    if np.pi - angle < 1e-6:
        # near a half turn: axis from the symmetric part
        sym = 0.5 * (R + np.identity(3))
        k = int(np.argmax(np.diag(sym)))
        axis = sym[:, k] / np.sqrt(max(sym[k, k], 1e-300))
        return angle * axis / np.linalg.norm(axis)
    skew_w = (angle / (2.0 * np.sin(angle))) * (R - R.T)
    return np.array([skew_w[2, 1], skew_w[0, 2], skew_w[1, 0]])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"Intrinsics: focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"Intrinsics: invalid image size {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"Intrinsics: principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")

    def matrix(self) -> FloatArray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def inverse_matrix(self) -> FloatArray:
        return np.array([
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ])

    def pixel_grid(self) -> FloatArray:
        """``(H, W, 2)`` array of integer pixel coordinates ``(u, v)``."""
        v, u = np.meshgrid(np.arange(self.height, dtype=np.float64), np.arange(self.width, dtype=np.float64), indexing='ij')
        return np.stack([u, v], axis=-1)

    def rays(self) -> FloatArray:
        """``(3, H, W)`` back-projected rays ``K^-1 (u, v, 1)``."""
        grid = self.pixel_grid()
        x = (grid[..., 0] - self.cx) / self.fx
        y = (grid[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'fx': self.fx,
            'fy': self.fy,
            'cx': self.cx,
            'cy': self.cy,
            'width': self.width,
            'height': self.height,
        }

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'Intrinsics':
        return cls(
            float(values['fx']),
            float(values['fy']),
            float(values['cx']),
            float(values['cy']),
            int(values['width']),
            int(values['height']),
        )


@dataclass(frozen=True, eq=False)
class Pose:
    rotvec: FloatArray = field(default_factory=lambda: np.zeros(3))
    translation: FloatArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        rotvec = np.asarray(self.rotvec, dtype=np.float64).reshape(-1)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rotvec.shape != (3,) or translation.shape != (3,):
            raise ShapeError('Pose', [rotvec.shape, translation.shape])
        object.__setattr__(self, 'rotvec', rotvec)
        object.__setattr__(self, 'translation', translation)

    @classmethod
    def identity(cls) -> 'Pose':
        return cls()

    @classmethod
    def from_matrix(cls, rotation: FloatArray, translation: FloatArray) -> 'Pose':
        return cls(so3_log(rotation), translation)

    @classmethod
    def from_params(cls, params: Sequence[float]) -> 'Pose':
        values = np.asarray(params, dtype=np.float64).reshape(-1)
        if values.shape != (6,):
            raise ShapeError('Pose.from_params', [values.shape], 'expected 6 values')
        return cls(values[:3], values[3:])

    @property
    def rotation(self) -> FloatArray:
        return so3_exp(self.rotvec)

    def to_params(self) -> FloatArray:
        return np.concatenate([self.rotvec, self.translation])

    def matrix(self) -> FloatArray:
        out = np.identity(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points: FloatArray) -> FloatArray:
        """Transform ``(..., 3)`` points."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse(self) -> 'Pose':
        R = self.rotation
        return Pose.from_matrix(R.T, -R.T @ self.translation)

    def compose(self, other: 'Pose') -> 'Pose':
        """``self ∘ other``: apply ``other`` first."""
        R = self.rotation @ other.rotation
        return Pose.from_matrix(R, self.rotation @ other.translation + self.translation)

    def __repr__(self) -> str:
        return f"Pose(rotvec={self.rotvec.tolist()}, translation={self.translation.tolist()})"


class PoseBatch:
    """Rotations ``(N, 3, 3)`` and translations ``(N, 3)`` as graph tensors."""
    R: Tensor
    t: Tensor

    def __init__(self, R: Tensor, t: Tensor):
        if R.ndim != 3 or R.shape[1:] != (3, 3) or t.shape != (R.shape[0], 3):
            raise ShapeError('PoseBatch', [R.shape, t.shape])
        self.R = R
        self.t = t

    def __len__(self) -> int:
        return self.R.shape[0]

    @classmethod
    def from_poses(cls, poses: Sequence[Pose], dtype: Any = np.float64) -> 'PoseBatch':
        R = np.stack([p.rotation for p in poses]).astype(dtype)
        t = np.stack([p.translation for p in poses]).astype(dtype)
        return cls(Tensor(R), Tensor(t))

    @classmethod
    def from_params(cls, params: Tensor) -> 'PoseBatch':
        """Differentiable ``(N, 6)`` axis-angle + translation to rotation matrices."""
        if params.ndim != 2 or params.shape[1] != 6:
            raise ShapeError('PoseBatch.from_params', [params.shape], 'expected (N, 6)')
        n = params.shape[0]
        w = ops.slice(params, 1, 0, 3)
        t = ops.slice(params, 1, 3, 6)
        wx, wy, wz = (ops.slice(w, 1, i, i + 1) for i in range(3))
        zero = constant(np.zeros((n, 1)), params)
        rows = [
            ops.concat([zero, -wz, wy], axis=1),
            ops.concat([wz, zero, -wx], axis=1),
            ops.concat([-wy, wx, zero], axis=1),
        ]
        K = ops.reshape(ops.concat(rows, axis=1), (n, 3, 3))
        coef = ops.rodrigues(ops.sum(w * w, axis=1))
        a = ops.broadcast(ops.reshape(ops.slice(coef, 1, 0, 1), (n, 1, 1)), (n, 3, 3))
        b = ops.broadcast(ops.reshape(ops.slice(coef, 1, 1, 2), (n, 1, 1)), (n, 3, 3))
        eye = constant(np.identity(3), params)
        R = eye + a * K + b * ops.matmul(K, K)
        return cls(R, t)

    def to_poses(self) -> List[Pose]:
        return [Pose.from_matrix(self.R.data[i], self.t.data[i]) for i in range(len(self))]


@dataclass
class SampleGrid:
    coords: Tensor
    valid: np.ndarray


def backproject(depth: Tensor, K: Intrinsics) -> Tensor:
    """``(N, 1, H, W)`` depth to ``(N, 3, H, W)`` camera-frame points."""
    if depth.ndim != 4 or depth.shape[1] != 1 or depth.shape[2:] != (K.height, K.width):
        raise ShapeError('backproject', [depth.shape, (K.height, K.width)])
    if np.any(depth.data <= 0):
        raise DomainError('backproject', 'depth must be strictly positive')
    n = depth.shape[0]
    rays = constant(K.rays(), depth)
    return ops.broadcast(depth, (n, 3, K.height, K.width)) * rays


def project(points: Tensor, poses: PoseBatch, K: Intrinsics, z_min: float = DEFAULT_Z_MIN) -> SampleGrid:
    if points.ndim != 4 or points.shape[1] != 3 or points.shape[0] != len(poses):
        raise ShapeError('project', [points.shape, poses.R.shape])
    n, _, h, w = points.shape
    flat = ops.reshape(points, (n, 3, h * w))
    moved = ops.matmul(poses.R, flat) + ops.broadcast(ops.reshape(poses.t, (n, 3, 1)), (n, 3, h * w))
    x = ops.slice(moved, 1, 0, 1)
    y = ops.slice(moved, 1, 1, 2)
    z = ops.slice(moved, 1, 2, 3)

    in_front = z.data > z_min
    keep = constant(in_front.astype(np.float64), z)
    # behind-camera pixels divide by 1 and are flagged invalid
    z_safe = z * keep + (1.0 - keep)
    u = x / z_safe * K.fx + K.cx
    v = y / z_safe * K.fy + K.cy

    coords = ops.permute(ops.reshape(ops.concat([u, v], axis=1), (n, 2, h, w)), (0, 2, 3, 1))
    ud, vd = coords.data[..., 0], coords.data[..., 1]
    valid = (
        in_front.reshape(n, h, w)
        & (ud >= 0) & (ud <= K.width - 1)
        & (vd >= 0) & (vd <= K.height - 1)
    )
    return SampleGrid(coords, valid)


def synthesize_view(
    source: Tensor,
    depth: Tensor,
    poses: PoseBatch,
    K: Intrinsics,
    z_min: float = DEFAULT_Z_MIN,
) -> Tuple[Tensor, np.ndarray]:
    """Reconstruct the target view by sampling ``source`` through ``depth`` and ``poses``.

    Returns the warped ``(N, C, H, W)`` image and a boolean ``(N, 1, H, W)``
    validity mask. Invalid pixels hold an edge-clamped sample.
    """
    if source.ndim != 4 or source.shape[2:] != (K.height, K.width) or source.shape[0] != depth.shape[0]:
        raise ShapeError('synthesize_view', [source.shape, depth.shape])
    grid = project(backproject(depth, K), poses, K, z_min)
    warped = ops.bilinear_sample(source, grid.coords)
    return warped, grid.valid[:, None]
