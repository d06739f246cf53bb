"""Synthetic-scene oracle.

A scene is a textured height field ``Z(x, y)`` expressed in the reference
(middle) camera frame: a base plane tilted so that the bottom of the image is
closer, plus smooth Gaussian bumps. Frames are rendered by ray casting the
surface from each camera, so ground-truth depth and ego-motion are exact.

On disk a split is ``<root>/<split>/<id>/`` holding ``frame_{prev,curr,next}.png``
(8-bit RGB), ``depth.f32`` (little-endian float32, row-major) and ``meta.json``.
"""
import dataclasses
import json
import logging
import os

from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Sequence, Tuple

import numpy as np

from PIL import Image

from ssdepth.camgeom import Intrinsics, Pose
from ssdepth.config import distance_field, parallel_map
from ssdepth.diffcore.tensor import FloatArray
from ssdepth.errors import ConfigError, DatasetError, GeometryError
from ssdepth.streams import SeedStreams

logger = logging.getLogger(__name__)

DAY_CLEAR = 'day-clear'
NIGHT = 'night'
RAIN = 'rain'
CONDITIONS = (DAY_CLEAR, NIGHT, RAIN)

FRAME_NAMES = ('prev', 'curr', 'next')
SPLIT_CODES = {'train': 0, 'val-day': 1}

# value-noise octaves: lattice spacing in meters and blend weight
TEXTURE_OCTAVES = ((0.5, 0.45), (1.0, 0.35), (2.0, 0.2))
# share of each colour channel taken from the luminance noise
SHARED_TEXTURE = 0.6

MARCH_STEP = 0.05
BISECT_ITERATIONS = 48
OCCLUSION_TOLERANCE = 0.01
MAX_ATTEMPTS = 20
# every full tile of a rendered frame must carry at least this much RGB variance
TEXTURE_TILE = 8
MIN_TILE_VARIANCE = 1e-3


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 48
    focal: float = 48.0
    base_depth: float = distance_field(6.0)
    tilt: float = 0.25
    bumps: int = 6
    bump_amplitude: float = distance_field(1.2)
    bump_sigma_min: float = distance_field(0.8)
    bump_sigma_max: float = distance_field(1.6)
    z_near: float = distance_field(0.5)
    z_far: float = distance_field(80.0)
    forward_min: float = distance_field(0.1)
    forward_max: float = distance_field(0.3)
    lateral: float = distance_field(0.05)
    yaw: float = 0.02
    min_visible: float = 0.8
    max_occluded: float = 0.02

    def __post_init__(self) -> None:
        if self.width < 16 or self.height < 16:
            raise ConfigError(f"image size {self.width}x{self.height} is too small")
        if self.focal <= 0:
            raise ConfigError(f"focal must be positive, got {self.focal}")
        if self.z_near < 0.5:
            raise ConfigError(f"z_near must be at least 0.5 m, got {self.z_near}")
        if not self.z_near < self.base_depth < self.z_far:
            raise ConfigError(f"base_depth {self.base_depth} outside ({self.z_near}, {self.z_far})")
        if self.bumps < 0 or self.bump_amplitude < 0 or self.tilt < 0:
            raise ConfigError('bump count, bump amplitude and tilt must be non-negative')
        if not 0 < self.bump_sigma_min <= self.bump_sigma_max:
            raise ConfigError(f"invalid bump sigma range {self.bump_sigma_min}..{self.bump_sigma_max}")
        if not 0 <= self.forward_min <= self.forward_max or self.lateral < 0 or self.yaw < 0:
            raise ConfigError('invalid motion ranges')
        if not 0 < self.min_visible <= 1 or not 0 <= self.max_occluded < 1:
            raise ConfigError('visibility thresholds must be fractions')

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(
            self.focal,
            self.focal,
            (self.width - 1) / 2.0,
            (self.height - 1) / 2.0,
            self.width,
            self.height,
        )

    def extent(self) -> float:
        """Half-width in meters of the lateral region the cameras can see."""
        far = self.base_depth + self.bump_amplitude
        return 1.5 * far * max(self.width, self.height) / (2.0 * self.focal) + self.forward_max


def smoothstep(t: FloatArray) -> FloatArray:
    return t * t * (3.0 - 2.0 * t)


class ValueNoise:
    """Smoothstep-interpolated random lattice over a square region."""
    spacing: float
    origin: float
    lattice: FloatArray

    def __init__(self, rng: np.random.Generator, spacing: float, half_extent: float):
        self.spacing = spacing
        self.origin = -half_extent
        cells = int(np.ceil(2.0 * half_extent / spacing)) + 2
        self.lattice = rng.uniform(0.0, 1.0, size=(cells, cells))

    def __call__(self, x: FloatArray, y: FloatArray) -> FloatArray:
        cells = self.lattice.shape[0]
        gx = np.clip((x - self.origin) / self.spacing, 0.0, cells - 1.000001)
        gy = np.clip((y - self.origin) / self.spacing, 0.0, cells - 1.000001)
        ix = np.floor(gx).astype(np.int64)
        iy = np.floor(gy).astype(np.int64)
        fx = smoothstep(gx - ix)
        fy = smoothstep(gy - iy)
        lat = self.lattice
        top = lat[iy, ix] * (1 - fx) + lat[iy, ix + 1] * fx
        bottom = lat[iy + 1, ix] * (1 - fx) + lat[iy + 1, ix + 1] * fx
        return np.asarray(top * (1 - fy) + bottom * fy)


class Scene:
    config: SceneConfig
    centers: FloatArray
    amplitudes: FloatArray
    sigmas: FloatArray
    octaves: List[List[ValueNoise]]

    def __init__(
        self,
        config: SceneConfig,
        centers: FloatArray,
        amplitudes: FloatArray,
        sigmas: FloatArray,
        octaves: List[List[ValueNoise]],
    ):
        self.config = config
        self.centers = centers
        self.amplitudes = amplitudes
        self.sigmas = sigmas
        self.octaves = octaves

    def surface(self, x: FloatArray, y: FloatArray) -> FloatArray:
        z = self.config.base_depth - self.config.tilt * y
        for (cx, cy), amplitude, sigma in zip(self.centers, self.amplitudes, self.sigmas):
            z = z + amplitude * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * sigma * sigma))
        return np.asarray(z, dtype=np.float64)

    def texture(self, x: FloatArray, y: FloatArray) -> FloatArray:
        """RGB albedo in [0, 1] at lateral position ``(x, y)``."""
        layers = []
        for channel in range(4):
            value = np.zeros_like(x)
            for (_, weight), noise in zip(TEXTURE_OCTAVES, self.octaves[channel]):
                value = value + weight * noise(x, y)
            layers.append(value)
        shared = layers[0]
        rgb = [SHARED_TEXTURE * shared + (1.0 - SHARED_TEXTURE) * own for own in layers[1:]]
        return np.clip(np.stack(rgb, axis=-1), 0.0, 1.0)


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Deterministic scene for ``(config, seed)``; GeometryError if it leaves the depth range."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE7E]))
    half = config.extent()
    centers = np.stack([
        rng.uniform(-0.6 * half, 0.6 * half, size=config.bumps),
        rng.uniform(-0.45 * half, 0.45 * half, size=config.bumps),
    ], axis=-1)
    amplitudes = rng.uniform(-config.bump_amplitude, config.bump_amplitude, size=config.bumps)
    sigmas = rng.uniform(config.bump_sigma_min, config.bump_sigma_max, size=config.bumps)
    octaves = [[ValueNoise(rng, spacing, half + spacing) for spacing, _ in TEXTURE_OCTAVES] for _ in range(4)]
    scene = Scene(config, centers, amplitudes, sigmas, octaves)

    grid = np.linspace(-half, half, 121)
    gx, gy = np.meshgrid(grid, grid)
    z = scene.surface(gx, gy)
    if z.min() < config.z_near or z.max() > config.z_far:
        raise GeometryError(f"scene depth range [{z.min():.3f}, {z.max():.3f}] leaves [{config.z_near}, {config.z_far}]")
    return scene


@dataclass
class Render:
    image: FloatArray
    depth: FloatArray
    points: FloatArray


def render(scene: Scene, pose: Pose, K: Intrinsics) -> Render:
    """Ray cast the height field from the camera whose frame is ``pose`` applied to reference coordinates.

    ``depth`` is the z-depth in that camera; ``points`` are the hits in the
    reference frame.
    """
    R = pose.rotation
    origin = -R.T @ pose.translation
    directions = np.einsum('ij,jhw->hwi', R.T, K.rays())

    def gap(lam: FloatArray) -> FloatArray:
        p = origin + lam[..., None] * directions
        return p[..., 2] - scene.surface(p[..., 0], p[..., 1])

    lower = np.full((K.height, K.width), MARCH_STEP)
    if np.any(gap(lower) >= 0):
        raise GeometryError('camera is inside or below the surface')
    upper = lower.copy()
    found = np.zeros_like(lower, dtype=bool)
    far = 2.0 * scene.config.z_far
    lam = lower.copy()
    while not found.all():
        lam = np.where(found, lam, lam + MARCH_STEP)
        crossed = (~found) & (gap(lam) >= 0)
        upper = np.where(crossed, lam, upper)
        lower = np.where(crossed, lam - MARCH_STEP, lower)
        found |= crossed
        if np.any(lam > far):
            raise GeometryError('ray left the scene without hitting the surface')

    for _ in range(BISECT_ITERATIONS):
        mid = 0.5 * (lower + upper)
        above = gap(mid) >= 0
        upper = np.where(above, mid, upper)
        lower = np.where(above, lower, mid)
    lam = 0.5 * (lower + upper)

    points = origin + lam[..., None] * directions
    if pose.translation.any() or pose.rotvec.any():
        depth = lam
    else:
        # reference camera: depth is the surface height itself
        depth = scene.surface(points[..., 0], points[..., 1])
    image = scene.texture(points[..., 0], points[..., 1])
    return Render(image, np.asarray(depth), points)


@dataclass
class SampleTriplet:
    frames: Tuple[FloatArray, FloatArray, FloatArray]
    K: Intrinsics
    gt_depth: FloatArray
    gt_poses: Tuple[Pose, Pose]
    condition: str = DAY_CLEAR
    id: str = ''
    seed: int = 0

    @property
    def current(self) -> FloatArray:
        return self.frames[1]

    def quantized(self) -> 'SampleTriplet':
        """What a round trip through 8-bit PNG and float32 depth yields."""
        frames = tuple(quantize_image(f) for f in self.frames)
        depth = self.gt_depth.astype('<f4').astype(np.float64)
        return dataclasses.replace(self, frames=frames, gt_depth=depth)  # type: ignore[arg-type]


def quantize_image(image: FloatArray) -> FloatArray:
    return np.asarray(to_uint8(image), dtype=np.float64) / 255.0


def to_uint8(image: FloatArray) -> np.ndarray:
    return np.asarray(np.round(np.clip(image, 0.0, 1.0) * 255.0), dtype=np.uint8)


def _reproject(points: FloatArray, pose: Pose, K: Intrinsics) -> Tuple[FloatArray, FloatArray, FloatArray]:
    p = pose.apply(points)
    z = p[..., 2]
    safe = np.where(z > 1e-6, z, 1.0)
    return K.fx * p[..., 0] / safe + K.cx, K.fy * p[..., 1] / safe + K.cy, z


def _bilinear(image: FloatArray, u: FloatArray, v: FloatArray) -> FloatArray:
    h, w = image.shape
    u = np.clip(u, 0, w - 1)
    v = np.clip(v, 0, h - 1)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    fu, fv = u - u0, v - v0
    top = image[v0, u0] * (1 - fu) + image[v0, u0 + 1] * fu
    bottom = image[v0 + 1, u0] * (1 - fu) + image[v0 + 1, u0 + 1] * fu
    return np.asarray(top * (1 - fv) + bottom * fv)


def check_visibility(reference: Render, other: Render, pose: Pose, K: Intrinsics) -> Tuple[float, float]:
    """Fraction of reference pixels visible in the other view and the occluded fraction of those."""
    u, v, z = _reproject(reference.points, pose, K)
    inside = (z > 1e-6) & (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
    visible = float(inside.mean())
    if not inside.any():
        return visible, 1.0
    seen = _bilinear(other.depth, u[inside], v[inside])
    occluded = np.abs(seen - z[inside]) > OCCLUSION_TOLERANCE * z[inside]
    return visible, float(occluded.mean())


def check_texture(image: FloatArray, tile: int = TEXTURE_TILE, min_variance: float = MIN_TILE_VARIANCE) -> float:
    """Smallest per-tile RGB variance over the full ``tile x tile`` tiles of an image.

    The variance of a tile is summed over channels. Raises GeometryError when
    a tile falls below ``min_variance``.
    """
    h, w = image.shape[0] // tile, image.shape[1] // tile
    if h == 0 or w == 0:
        raise GeometryError(f"image {image.shape[:2]} has no full {tile}x{tile} tile")
    tiles = image[:h * tile, :w * tile].reshape(h, tile, w, tile, -1)
    variance = tiles.var(axis=(1, 3)).sum(axis=-1)
    lowest = float(variance.min())
    if lowest < min_variance:
        row, col = np.unravel_index(int(variance.argmin()), variance.shape)
        raise GeometryError(f"textureless tile at ({row}, {col}): variance {lowest:.2e} < {min_variance:.0e}")
    return lowest


def render_triplet(
    scene: Scene,
    motion: Tuple[Pose, Pose],
    K: Intrinsics,
    triplet_id: str = '',
    seed: int = 0,
) -> SampleTriplet:
    """Render ``(prev, curr, next)`` with ``motion = (P_{t->t-1}, P_{t->t+1})``."""
    reference = render(scene, Pose.identity(), K)
    others = [render(scene, pose, K) for pose in motion]
    for label, pose, other in zip(('prev', 'next'), motion, others):
        visible, occluded = check_visibility(reference, other, pose, K)
        if visible < scene.config.min_visible:
            raise GeometryError(f"{label} frame sees only {visible:.1%} of the reference view")
        if occluded > scene.config.max_occluded:
            raise GeometryError(f"{label} frame has {occluded:.1%} occluded pixels")
    for frame in (reference, *others):
        check_texture(frame.image)
    frames = (others[0].image, reference.image, others[1].image)
    return SampleTriplet(frames, K, reference.depth, (motion[0], motion[1]), DAY_CLEAR, triplet_id, seed)


def _camera_pose(center: FloatArray, yaw: float) -> Pose:
    # camera at ``center`` turned by ``yaw`` about the vertical axis
    orientation = Pose(np.array([0.0, yaw, 0.0])).rotation
    return Pose.from_matrix(orientation.T, -orientation.T @ center)


def random_motion(rng: np.random.Generator, config: SceneConfig) -> Tuple[Pose, Pose]:
    """Forward-driving motion ``(P_{t->t-1}, P_{t->t+1})`` at constant velocity."""
    speed = rng.uniform(config.forward_min, config.forward_max)
    lateral = rng.uniform(-config.lateral, config.lateral)
    yaw = rng.uniform(-config.yaw, config.yaw)
    step = np.array([lateral, 0.0, speed])
    return _camera_pose(-step, -yaw), _camera_pose(step, yaw)


def generate_triplet(config: SceneConfig, streams: SeedStreams, split: str, index: int) -> SampleTriplet:
    """Retry scene and motion draws until a triplet passes the visibility checks."""
    code = SPLIT_CODES.get(split, len(SPLIT_CODES))
    K = config.intrinsics()
    for attempt in range(MAX_ATTEMPTS):
        rng = streams.generator('data', code, index, attempt)
        scene_seed = int(rng.integers(0, 2 ** 31 - 1))
        try:
            scene = generate_scene(config, scene_seed)
            motion = random_motion(rng, config)
            triplet = render_triplet(scene, motion, K, f'{split}-{index:05d}', scene_seed)
        except GeometryError as e:
            logger.warning('rejected %s triplet %d attempt %d: %s', split, index, attempt, e)
            continue
        return triplet.quantized()
    raise GeometryError(f"no valid triplet for {split} index {index} after {MAX_ATTEMPTS} attempts")


def generate_split(config: SceneConfig, streams: SeedStreams, split: str, n: int) -> List[SampleTriplet]:
    if n < 1:
        raise ValueError(f"split size must be positive, got {n}")
    triplets = parallel_map(lambda i: generate_triplet(config, streams, split, i), list(range(n)))
    logger.info('generated %d %s triplets', n, split)
    return triplets


def triplet_dir(root: str, split: str, triplet_id: str) -> str:
    return os.path.join(root, split, triplet_id)


def write_png(path: str, image: FloatArray) -> None:
    Image.fromarray(to_uint8(image), mode='RGB').save(path, format='PNG')


def read_png(path: str) -> FloatArray:
    with Image.open(path) as handle:
        data = np.asarray(handle.convert('RGB'), dtype=np.float64)
    return data / 255.0


def write_triplet(root: str, split: str, triplet: SampleTriplet) -> str:
    path = triplet_dir(root, split, triplet.id)
    os.makedirs(path, exist_ok=True)
    for name, frame in zip(FRAME_NAMES, triplet.frames):
        write_png(os.path.join(path, f'frame_{name}.png'), frame)
    triplet.gt_depth.astype('<f4').tofile(os.path.join(path, 'depth.f32'))
    meta = {
        'id': triplet.id,
        'condition': triplet.condition,
        'seed': triplet.seed,
        'intrinsics': triplet.K.to_dict(),
        'poses': {
            'prev': triplet.gt_poses[0].to_params().tolist(),
            'next': triplet.gt_poses[1].to_params().tolist(),
        },
    }
    with open(os.path.join(path, 'meta.json'), 'w', encoding='utf8') as handle:
        json.dump(meta, handle, indent=2, sort_keys=True)
        handle.write('\n')
    return path


def read_triplet(path: str) -> SampleTriplet:
    try:
        with open(os.path.join(path, 'meta.json'), 'r', encoding='utf8') as handle:
            meta: Dict[str, Any] = json.load(handle)
        K = Intrinsics.from_dict(meta['intrinsics'])
        frames = tuple(read_png(os.path.join(path, f'frame_{name}.png')) for name in FRAME_NAMES)
        depth = np.fromfile(os.path.join(path, 'depth.f32'), dtype='<f4')
    except (OSError, KeyError, ValueError) as e:
        raise DatasetError(f"unreadable triplet at {path}: {e}")
    if depth.size != K.width * K.height:
        raise DatasetError('depth size mismatch', [path])
    for frame in frames:
        if frame.shape != (K.height, K.width, 3):
            raise DatasetError('frame size mismatch', [path])
    poses = (Pose.from_params(meta['poses']['prev']), Pose.from_params(meta['poses']['next']))
    return SampleTriplet(
        (frames[0], frames[1], frames[2]),
        K,
        depth.astype(np.float64).reshape(K.height, K.width),
        poses,
        str(meta['condition']),
        str(meta['id']),
        int(meta['seed']),
    )


def write_split(root: str, split: str, triplets: Sequence[SampleTriplet]) -> None:
    for triplet in triplets:
        write_triplet(root, split, triplet)
    logger.info('wrote %d triplets to %s', len(triplets), os.path.join(root, split))


class Dataset:
    """Read-only handle over one split directory."""
    root: str
    split: str
    ids: List[str]

    def __init__(self, root: str, split: str):
        self.root = root
        self.split = split
        path = os.path.join(root, split)
        if not os.path.isdir(path):
            raise DatasetError(f"missing split directory {path}")
        self.ids = sorted(e for e in os.listdir(path) if os.path.isdir(os.path.join(path, e)))
        if not self.ids:
            raise DatasetError(f"split directory {path} is empty")

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[SampleTriplet]:
        for triplet_id in self.ids:
            yield self.load(triplet_id)

    def load(self, triplet_id: str) -> SampleTriplet:
        if triplet_id not in self.ids:
            raise DatasetError(f"unknown id in split {self.split}", [triplet_id])
        return read_triplet(triplet_dir(self.root, self.split, triplet_id))

    def load_all(self) -> List[SampleTriplet]:
        return parallel_map(self.load, self.ids)

    @property
    def frame_shape(self) -> Tuple[int, int]:
        first = self.load(self.ids[0])
        return first.K.height, first.K.width
