"""Depth-preserving condition translation and the clean/translated mixing schedule.

Built-in degradations are deterministic image-space stand-ins for generated
night and rain frames. Frames produced elsewhere can be registered with
:func:`ingest_external` from ``<dir>/<id>/<condition>/frame_{prev,curr,next}.png``.
"""
import dataclasses
import logging
import os
import zlib

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from PIL import Image

from ssdepth.diffcore.tensor import FloatArray
from ssdepth.errors import ConditionError, DatasetError
from ssdepth.synthscene import (
    DAY_CLEAR,
    FRAME_NAMES,
    NIGHT,
    RAIN,
    Dataset,
    SampleTriplet,
    read_png,
    write_png,
)

logger = logging.getLogger(__name__)

UNIFORM_PER_CONDITION = 'uniform-per-condition'
MOSTLY_UNCHANGED = 'mostly-unchanged'
SCHEDULE_MODES = (UNIFORM_PER_CONDITION, MOSTLY_UNCHANGED)
# accepted spelling of the literal keep-probability reading
SCHEDULE_ALIASES = {'paper-literal': MOSTLY_UNCHANGED}

Frames = Tuple[FloatArray, FloatArray, FloatArray]


def _seed_sequence(seed: int, condition: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(condition.encode('utf8')), *extra])


def box_blur(image: FloatArray) -> FloatArray:
    """3x3 mean filter with edge replication over an ``(H, W, C)`` image."""
    h, w = image.shape[:2]
    padded = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode='edge')
    out = np.zeros_like(image)
    for i in range(3):
        for j in range(3):
            out += padded[i:i + h, j:j + w]
    return out / 9.0


class Degradation:
    """Image-space condition effect with parameters shared across a triplet.

    ``shared`` draws the per-triplet layout (glare, streaks) from the seed;
    ``apply`` adds per-frame noise on top.
    """
    name: str = ''

    def shared(self, rng: np.random.Generator, shape: Tuple[int, int]) -> FloatArray:
        raise NotImplementedError('Degradation::shared()')

    def apply(self, image: FloatArray, layer: FloatArray, rng: np.random.Generator) -> FloatArray:
        raise NotImplementedError('Degradation::apply()')

    def frames(self, frames: Sequence[FloatArray], seed: int) -> List[FloatArray]:
        shape = frames[0].shape[:2]
        layer = self.shared(np.random.default_rng(_seed_sequence(seed, self.name)), (shape[0], shape[1]))
        out = []
        for index, frame in enumerate(frames):
            rng = np.random.default_rng(_seed_sequence(seed, self.name, index + 1))
            out.append(np.clip(self.apply(frame, layer, rng), 0.0, 1.0))
        return out


@dataclass(frozen=True)
class NightDegradation(Degradation):
    name: str = NIGHT
    gamma: float = 2.2
    gain: float = 0.25
    noise: float = 0.02
    glare_count: Tuple[int, int] = (1, 3)
    glare_radius: Tuple[float, float] = (2.0, 5.0)
    glare_intensity: Tuple[float, float] = (0.3, 0.8)

    def shared(self, rng: np.random.Generator, shape: Tuple[int, int]) -> FloatArray:
        h, w = shape
        v, u = np.mgrid[0:h, 0:w].astype(np.float64)
        layer = np.zeros(shape)
        for _ in range(int(rng.integers(self.glare_count[0], self.glare_count[1] + 1))):
            cu, cv = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
            radius = rng.uniform(*self.glare_radius)
            strength = rng.uniform(*self.glare_intensity)
            layer += strength * np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2.0 * radius * radius))
        return layer

    def apply(self, image: FloatArray, layer: FloatArray, rng: np.random.Generator) -> FloatArray:
        dark = (np.power(np.clip(image, 0.0, 1.0), self.gamma) + layer[..., None]) * self.gain
        # sensor noise is in output intensity units
        return dark + rng.normal(0.0, self.noise, size=image.shape)


@dataclass(frozen=True)
class RainDegradation(Degradation):
    name: str = RAIN
    contrast: float = 0.7
    noise: float = 0.01
    streak_coverage: float = 0.03
    streak_length: Tuple[int, int] = (4, 8)
    streak_alpha: float = 0.5
    streak_value: float = 0.9

    def shared(self, rng: np.random.Generator, shape: Tuple[int, int]) -> FloatArray:
        h, w = shape
        mask = np.zeros(shape)
        target = self.streak_coverage * h * w
        while mask.sum() < target:
            length = int(rng.integers(self.streak_length[0], self.streak_length[1] + 1))
            u0, v0 = int(rng.integers(0, w)), int(rng.integers(0, h))
            for k in range(length):
                u, v = u0 + k // 2, v0 + k
                if 0 <= u < w and 0 <= v < h:
                    mask[v, u] = 1.0
        return mask

    def apply(self, image: FloatArray, layer: FloatArray, rng: np.random.Generator) -> FloatArray:
        mean = image.mean(axis=(0, 1), keepdims=True)
        flat = mean + self.contrast * (image - mean)
        blurred = box_blur(flat)
        alpha = self.streak_alpha * layer[..., None]
        streaked = (1.0 - alpha) * blurred + alpha * self.streak_value
        return streaked + rng.normal(0.0, self.noise, size=image.shape)


DEFAULT_DEGRADATIONS: Dict[str, Degradation] = {
    NIGHT: NightDegradation(),
    RAIN: RainDegradation(),
}


@dataclass(frozen=True)
class ConditionSet:
    conditions: Tuple[str, ...] = (NIGHT, RAIN)
    degradations: Dict[str, Degradation] = field(default_factory=lambda: dict(DEFAULT_DEGRADATIONS))

    def __post_init__(self) -> None:
        if not self.conditions:
            raise ValueError('ConditionSet: at least one condition is required')
        if len(set(self.conditions)) != len(self.conditions):
            raise ValueError(f"ConditionSet: duplicate conditions in {self.conditions}")
        for tag in self.conditions:
            if tag == DAY_CLEAR or tag not in self.degradations:
                raise ConditionError(tag, 'not a known challenging condition')

    @classmethod
    def parse(cls, text: str) -> 'ConditionSet':
        return cls(tuple(t.strip() for t in text.split(',') if t.strip()))

    def degradation(self, tag: str) -> Degradation:
        if tag not in self.conditions:
            raise ConditionError(tag, f"not in condition set {self.conditions}")
        return self.degradations[tag]

    def __len__(self) -> int:
        return len(self.conditions)


@dataclass(frozen=True)
class MixSchedule:
    p_unchanged: float
    conditions: Tuple[str, ...]
    probabilities: Tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.conditions) != len(self.probabilities):
            raise ValueError('MixSchedule: one probability per condition is required')
        if self.p_unchanged < 0 or any(p < 0 for p in self.probabilities):
            raise ValueError('MixSchedule: probabilities must be non-negative')
        if abs(self.p_unchanged + sum(self.probabilities) - 1.0) > 1e-12:
            raise ValueError('MixSchedule: probabilities must sum to 1')

    def outcomes(self) -> List[Tuple[str, float]]:
        return [(DAY_CLEAR, self.p_unchanged)] + list(zip(self.conditions, self.probabilities))


def build_schedule(conditions: ConditionSet, mode: str = UNIFORM_PER_CONDITION) -> MixSchedule:
    """Outcome probabilities for ``|C|`` conditions.

    ``uniform-per-condition`` gives every outcome ``1/(|C|+1)``;
    ``mostly-unchanged`` (also accepted as ``paper-literal``) keeps the clean
    sample with ``|C|/(|C|+1)`` and splits the rest evenly.
    """
    n = len(conditions)
    mode = SCHEDULE_ALIASES.get(mode, mode)
    if mode == UNIFORM_PER_CONDITION:
        p_unchanged = 1.0 / (n + 1)
    elif mode == MOSTLY_UNCHANGED:
        p_unchanged = n / (n + 1)
    else:
        raise ValueError(f"Unknown schedule mode: '{mode}'")
    share = (1.0 - p_unchanged) / n
    return MixSchedule(p_unchanged, conditions.conditions, tuple(share for _ in range(n)))


def draw_outcome(schedule: MixSchedule, rng: np.random.Generator) -> str:
    draw = rng.random()
    cumulative = 0.0
    outcomes = schedule.outcomes()
    for tag, probability in outcomes:
        cumulative += probability
        if draw < cumulative:
            return tag
    # rounding in the cumulative sum
    return [tag for tag, p in outcomes if p > 0][-1]


def degrade(image: FloatArray, condition: str, seed: int, conditions: Optional[ConditionSet] = None) -> FloatArray:
    """Degrade one ``(H, W, 3)`` image; deterministic per ``(image, condition, seed)``."""
    conditions = conditions or ConditionSet(tuple(DEFAULT_DEGRADATIONS))
    return conditions.degradation(condition).frames([image], seed)[0]


def degrade_triplet(
    sample: SampleTriplet,
    condition: str,
    seed: int,
    conditions: Optional[ConditionSet] = None,
) -> SampleTriplet:
    """All three frames degraded with one shared layout; depth and poses untouched."""
    conditions = conditions or ConditionSet(tuple(DEFAULT_DEGRADATIONS))
    frames = conditions.degradation(condition).frames(list(sample.frames), seed)
    return dataclasses.replace(
        sample,
        frames=(frames[0], frames[1], frames[2]),
        condition=condition,
        gt_depth=sample.gt_depth.copy(),
    )


class TranslatedOverlay:
    """Externally translated frames keyed by ``(id, condition)``."""
    root: str
    entries: Dict[Tuple[str, str], str]

    def __init__(self, root: str = '', entries: Optional[Dict[Tuple[str, str], str]] = None):
        self.root = root
        self.entries = dict(entries or {})

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: Tuple[str, str]) -> bool:
        return key in self.entries

    def ids(self) -> List[str]:
        return sorted({triplet_id for triplet_id, _ in self.entries})

    def frames(self, triplet_id: str, condition: str) -> Frames:
        path = self.entries[(triplet_id, condition)]
        prev, curr, nxt = (read_png(os.path.join(path, f'frame_{name}.png')) for name in FRAME_NAMES)
        return prev, curr, nxt


def ingest_external(directory: str, dataset: Dataset, conditions: Optional[ConditionSet] = None) -> TranslatedOverlay:
    """Register ``<directory>/<id>/<condition>/frame_*.png`` against ``dataset``.

    Every entry is validated before anything is registered; offending entries
    are listed in the raised :class:`DatasetError`.
    """
    conditions = conditions or ConditionSet(tuple(DEFAULT_DEGRADATIONS))
    if not os.path.isdir(directory) or not os.listdir(directory):
        logger.info('no external overlay at %s, using built-in degradations', directory)
        return TranslatedOverlay(directory)

    height, width = dataset.frame_shape
    known = set(dataset.ids)
    entries: Dict[Tuple[str, str], str] = {}
    offenders: List[str] = []
    for triplet_id in sorted(os.listdir(directory)):
        id_dir = os.path.join(directory, triplet_id)
        if not os.path.isdir(id_dir):
            continue
        if triplet_id not in known:
            offenders.append(f'{triplet_id} (unknown id)')
            continue
        for condition in sorted(os.listdir(id_dir)):
            cond_dir = os.path.join(id_dir, condition)
            if not os.path.isdir(cond_dir):
                continue
            label = f'{triplet_id}/{condition}'
            if condition not in conditions.conditions:
                offenders.append(f'{label} (unknown condition)')
                continue
            problem = _check_overlay_frames(cond_dir, width, height)
            if problem:
                offenders.append(f'{label} ({problem})')
                continue
            entries[(triplet_id, condition)] = cond_dir

    if offenders:
        raise DatasetError('invalid external overlay entries', offenders)
    logger.info('registered %d external overlay entries from %s', len(entries), directory)
    return TranslatedOverlay(directory, entries)


def _check_overlay_frames(path: str, width: int, height: int) -> str:
    for name in FRAME_NAMES:
        frame = os.path.join(path, f'frame_{name}.png')
        if not os.path.isfile(frame):
            return f'missing frame_{name}.png'
        try:
            with Image.open(frame) as handle:
                size = handle.size
        except OSError:
            return f'unreadable frame_{name}.png'
        if size != (width, height):
            return f'frame_{name}.png is {size[0]}x{size[1]}, expected {width}x{height}'
    return ''


def write_overlay(directory: str, samples: Sequence[SampleTriplet], conditions: ConditionSet, seed: int) -> int:
    """Export built-in degradations in the external overlay layout."""
    count = 0
    for index, sample in enumerate(samples):
        for condition in conditions.conditions:
            degraded = degrade_triplet(sample, condition, seed + index, conditions)
            path = os.path.join(directory, sample.id, condition)
            os.makedirs(path, exist_ok=True)
            for name, frame in zip(FRAME_NAMES, degraded.frames):
                write_png(os.path.join(path, f'frame_{name}.png'), frame)
            count += 1
    logger.info('wrote %d overlay entries to %s', count, directory)
    return count


def mix_sample(
    sample: SampleTriplet,
    schedule: MixSchedule,
    rng: np.random.Generator,
    conditions: Optional[ConditionSet] = None,
    overlay: Optional[TranslatedOverlay] = None,
) -> SampleTriplet:
    """Draw one outcome; translated outcomes replace all three frames consistently.

    External overlay frames take precedence over built-in degradation for the
    drawn condition. Depth and poses are carried over untouched.
    """
    if sample.condition != DAY_CLEAR:
        raise ConditionError(sample.condition, 'mixing expects day-clear samples')
    outcome = draw_outcome(schedule, rng)
    seed = int(rng.integers(0, 2 ** 31 - 1))
    if outcome == DAY_CLEAR:
        return dataclasses.replace(sample, gt_depth=sample.gt_depth.copy())
    if overlay is not None and (sample.id, outcome) in overlay:
        return dataclasses.replace(
            sample,
            frames=overlay.frames(sample.id, outcome),
            condition=outcome,
            gt_depth=sample.gt_depth.copy(),
        )
    conditions = conditions or ConditionSet(schedule.conditions)
    return degrade_triplet(sample, outcome, seed, conditions)
