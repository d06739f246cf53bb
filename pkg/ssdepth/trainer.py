"""Two-phase self-training.

The teacher (depth and pose nets) learns from clean day-clear triplets with the
min-reprojection photometric loss. The student depth net then sees mixed
clean/translated inputs and is supervised by the frozen teacher's depth on the
original frames, masked where the teacher explains the adjacent frames no
better than the student, plus a feature-alignment term against a frozen
reference encoder.
"""
import csv
import logging
import math
import os

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, TextIO

import numpy as np

from ssdepth.camgeom import DEFAULT_Z_MIN, Intrinsics, PoseBatch, synthesize_view
from ssdepth.config import config_hash, distance_field
from ssdepth.diffcore import ops
from ssdepth.diffcore.tensor import FloatArray, Tensor, backward, no_grad
from ssdepth.errors import CheckpointError, ConditionError, ConfigError, NonFiniteError, SsdError
from ssdepth.losses import (
    KEEP_TEACHER_REASONABLE,
    MASK_ALIASES,
    MASK_CONVENTIONS,
    LossReport,
    TERM_NAMES,
    combine_losses,
    distillation_loss,
    reprojection_loss,
    semantic_loss,
    smoothness_loss,
    teacher_loss,
    teacher_mask,
)
from ssdepth.nets import DepthNet, Network, PoseNet, prefixed, read_ssdf, unprefixed, write_ssdf
from ssdepth.optim import Optimizer, ParamGroup, make_optimizer
from ssdepth.streams import SeedStreams
from ssdepth.synthscene import DAY_CLEAR, SampleTriplet
from ssdepth.translate import SCHEDULE_ALIASES, SCHEDULE_MODES, UNIFORM_PER_CONDITION, ConditionSet, TranslatedOverlay, build_schedule, mix_sample

logger = logging.getLogger(__name__)

TEACHER = 'teacher'
STUDENT = 'student'

LOG_COLUMNS = ('step', 'epoch') + ('total',) + TERM_NAMES + ('lr',)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr_depth: float = 1e-3
    lr_pose: float = 1e-3
    w_photometric: float = 1.0
    w_teacher: float = 1.0
    w_semantic: float = 0.1
    w_smoothness: float = 1e-3
    student_smoothness: bool = False
    schedule_mode: str = UNIFORM_PER_CONDITION
    conditions: str = 'night,rain'
    seed: int = 0
    depth_min: float = distance_field(0.1)
    depth_max: float = distance_field(80.0)
    optimizer: str = 'adamw'
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    momentum: float = 0.9
    precision: str = 'float64'
    mask_convention: str = KEEP_TEACHER_REASONABLE
    distill_mode: str = 'teacher'
    student_init: str = 'teacher'
    semantic_reference: str = 'teacher'
    z_min: float = distance_field(DEFAULT_Z_MIN)

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        for name in ('lr_depth', 'lr_pose', 'w_photometric', 'w_teacher', 'w_semantic', 'w_smoothness', 'weight_decay'):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 < self.depth_min < self.depth_max:
            raise ConfigError(f"invalid depth bounds {self.depth_min}..{self.depth_max}")
        if self.z_min <= 0:
            raise ConfigError(f"z_min must be positive, got {self.z_min}")
        choices = {
            'schedule_mode': SCHEDULE_MODES + tuple(SCHEDULE_ALIASES),
            'optimizer': ('adamw', 'sgd'),
            'precision': ('float64', 'float32'),
            'mask_convention': MASK_CONVENTIONS + tuple(MASK_ALIASES),
            'distill_mode': ('teacher', 'plain'),
            'student_init': ('teacher', 'random'),
            'semantic_reference': ('teacher', 'initial'),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {', '.join(allowed)}, got '{getattr(self, name)}'")
        try:
            ConditionSet.parse(self.conditions)
        except ValueError as e:
            raise ConfigError(f"bad conditions '{self.conditions}': {e}")

    @property
    def dtype(self) -> Any:
        return np.float32 if self.precision == 'float32' else np.float64

    def loss_weights(self) -> Dict[str, float]:
        return {
            'photometric': self.w_photometric,
            'distill': self.w_teacher,
            'teacher': self.w_teacher,
            'semantic': self.w_semantic,
            'smoothness': self.w_smoothness,
        }


@dataclass
class Checkpoint:
    role: str
    depth: Dict[str, FloatArray]
    pose: Optional[Dict[str, FloatArray]] = None
    optimizer: Dict[str, FloatArray] = field(default_factory=dict)
    epoch: int = 0
    config_hash: str = ''
    depth_min: float = 0.1
    depth_max: float = 80.0

    def validate(self) -> None:
        if self.role not in (TEACHER, STUDENT):
            raise CheckpointError(f"unknown checkpoint role '{self.role}'")
        if not self.depth:
            raise CheckpointError('checkpoint has no depth network')
        for name, value in list(self.depth.items()) + list((self.pose or {}).items()):
            if not np.all(np.isfinite(value)):
                raise CheckpointError(f"checkpoint parameter '{name}' is not finite")

    def depth_net(self) -> DepthNet:
        net = DepthNet(np.random.default_rng(0), self.depth_min, self.depth_max)
        net.load_state_dict(self.depth)
        return net

    def pose_net(self) -> PoseNet:
        if self.pose is None:
            raise CheckpointError(f"{self.role} checkpoint carries no pose network")
        net = PoseNet(np.random.default_rng(0))
        net.load_state_dict(self.pose)
        return net

    def save(self, path: str) -> None:
        arrays = prefixed('depth', self.depth)
        if self.pose is not None:
            arrays.update(prefixed('pose', self.pose))
        arrays.update(prefixed('optim', self.optimizer))
        metadata = {
            'role': self.role,
            'epoch': self.epoch,
            'config_hash': self.config_hash,
            'depth_min': self.depth_min,
            'depth_max': self.depth_max,
            'has_pose': self.pose is not None,
        }
        with open(path, 'wb') as handle:
            write_ssdf(handle, arrays, metadata)

    @classmethod
    def load(cls, path: str) -> 'Checkpoint':
        try:
            with open(path, 'rb') as handle:
                arrays, metadata = read_ssdf(handle)
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}")
        try:
            checkpoint = cls(
                str(metadata['role']),
                unprefixed('depth', arrays),
                unprefixed('pose', arrays) if metadata['has_pose'] else None,
                unprefixed('optim', arrays),
                int(metadata['epoch']),
                str(metadata['config_hash']),
                float(metadata['depth_min']),
                float(metadata['depth_max']),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"bad checkpoint metadata in {path}: {e}")
        checkpoint.validate()
        return checkpoint


class LossLog:
    """Per-step loss rows, optionally streamed to a CSV file."""
    rows: List[Dict[str, Any]]
    _handle: Optional[TextIO]
    _writer: Optional[Any]

    def __init__(self, path: Optional[str] = None):
        self.rows = []
        self._handle = None
        self._writer = None
        if path:
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)
            self._handle = open(path, 'w', newline='', encoding='utf8')
            self._writer = csv.writer(self._handle)
            self._writer.writerow(LOG_COLUMNS)

    def append(self, step: int, epoch: int, report: LossReport, lr: float) -> None:
        row: Dict[str, Any] = {'step': step, 'epoch': epoch, 'total': report.total.item(), 'lr': lr}
        row.update(report.terms)
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow([_render_cell(row.get(c)) for c in LOG_COLUMNS])

    def epoch_means(self) -> List[float]:
        epochs = sorted({r['epoch'] for r in self.rows})
        return [float(np.mean([r['total'] for r in self.rows if r['epoch'] == e])) for e in epochs]

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None
            self._writer = None


def _render_cell(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class Batch:
    prev: Tensor
    curr: Tensor
    next: Tensor

    @classmethod
    def from_triplets(cls, triplets: Sequence[SampleTriplet], dtype: Any = np.float64) -> 'Batch':
        def stack(index: int) -> Tensor:
            images = np.stack([t.frames[index] for t in triplets]).transpose(0, 3, 1, 2)
            return Tensor(images, dtype=dtype)

        return cls(stack(0), stack(1), stack(2))


def batches(order: Sequence[int], size: int) -> List[List[int]]:
    return [list(order[i:i + size]) for i in range(0, len(order), size)]


def _check_intrinsics(triplets: Sequence[SampleTriplet]) -> Intrinsics:
    if not triplets:
        raise ValueError('training needs at least one triplet')
    K = triplets[0].K
    for t in triplets:
        if t.K != K:
            raise SsdError(f"triplet {t.id} has different intrinsics")
    return K


def teacher_batch_loss(
    depth_net: DepthNet,
    pose_net: PoseNet,
    batch: Batch,
    K: Intrinsics,
    config: TrainConfig,
) -> LossReport:
    depth, _ = depth_net.forward(batch.curr)
    pose_prev = pose_net.forward(batch.curr, batch.prev)
    pose_next = pose_net.forward(batch.curr, batch.next)
    warps = [
        synthesize_view(batch.prev, depth, pose_prev, K, config.z_min),
        synthesize_view(batch.next, depth, pose_next, K, config.z_min),
    ]
    photometric, reprojection_map = reprojection_loss(batch.curr, warps)
    terms = {'photometric': photometric}
    if config.w_smoothness > 0:
        terms['smoothness'] = smoothness_loss(1.0 / depth, batch.curr)
    return combine_losses(terms, config.loss_weights(), {'reprojection': reprojection_map.data})


@dataclass
class FrozenTeacher:
    depth: DepthNet
    pose: PoseNet
    reference: DepthNet


def student_batch_loss(
    student: DepthNet,
    frozen: FrozenTeacher,
    original: Batch,
    mixed: Batch,
    K: Intrinsics,
    config: TrainConfig,
) -> LossReport:
    """Teacher-masked distillation plus feature alignment for one batch.

    Pseudo ground truth, poses and reference features come from the original
    day-clear frames; only the student sees the mixed frames.
    """
    with no_grad():
        teacher_depth, _ = frozen.depth.forward(original.curr)
        poses: List[PoseBatch] = [
            frozen.pose.forward(original.curr, original.prev),
            frozen.pose.forward(original.curr, original.next),
        ]
        reference = frozen.reference.encode(original.curr)

    student_depth, features = student.forward(mixed.curr)
    mask = teacher_mask(
        original.curr,
        [original.prev, original.next],
        student_depth,
        teacher_depth,
        poses,
        K,
        config.mask_convention,
    )
    distill_map = distillation_loss(student_depth, teacher_depth)
    terms: Dict[str, Tensor] = {}
    if config.distill_mode == 'teacher':
        terms['teacher'] = teacher_loss(mask, distill_map)
    else:
        terms['distill'] = ops.mean(distill_map)
    terms['semantic'] = semantic_loss(features, reference)
    if config.student_smoothness and config.w_smoothness > 0:
        terms['smoothness'] = smoothness_loss(1.0 / student_depth, mixed.curr)
    return combine_losses(terms, config.loss_weights(), {'mask': mask.mask, 'distill': distill_map.data})


def _run_epochs(
    n: int,
    config: TrainConfig,
    streams: SeedStreams,
    optimizer: Optimizer,
    step_loss: Any,
    log: LossLog,
    role: str,
) -> None:
    step = 0
    for epoch in range(config.epochs):
        order = streams.generator('shuffle', epoch).permutation(n)
        for indices in batches([int(i) for i in order], config.batch_size):
            report: LossReport = step_loss(indices)
            total = report.total.item()
            if not math.isfinite(total):
                raise NonFiniteError(f'step {step}', 'loss')
            if not report.check_decomposition():
                raise SsdError(f"step {step}: loss total {total} disagrees with weighted terms {report.weighted_sum()}")
            lr = optimizer.current_lr('depth')
            optimizer.step(backward(report.total))
            log.append(step, epoch, report, lr)
            logger.debug('%s step %d: %s', role, step, report.terms)
            step += 1
        means = {
            name: float(np.mean([r[name] for r in log.rows if r['epoch'] == epoch and name in r]))
            for name in ('total',) + TERM_NAMES
            if any(name in r for r in log.rows if r['epoch'] == epoch)
        }
        logger.info('%s epoch %d/%d: %s lr=%.3g', role, epoch + 1, config.epochs, means, optimizer.current_lr('depth'))


def _groups(config: TrainConfig, depth_net: Network, pose_net: Optional[Network]) -> List[ParamGroup]:
    groups = [ParamGroup('depth', list(depth_net.parameters()), config.lr_depth)]
    if pose_net is not None:
        groups.append(ParamGroup('pose', list(pose_net.parameters()), config.lr_pose))
    return groups


def _optimizer(config: TrainConfig, groups: List[ParamGroup], n: int) -> Optimizer:
    steps = config.epochs * math.ceil(n / config.batch_size)
    return make_optimizer(
        config.optimizer,
        groups,
        steps,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        weight_decay=config.weight_decay,
        momentum=config.momentum,
    )


def train_teacher(triplets: Sequence[SampleTriplet], config: TrainConfig, log: Optional[LossLog] = None) -> Checkpoint:
    """Self-supervised depth and pose training on day-clear triplets."""
    for t in triplets:
        if t.condition != DAY_CLEAR:
            raise ConditionError(t.condition, f"teacher training expects day-clear samples, got {t.id}")
    K = _check_intrinsics(triplets)
    streams = SeedStreams(config.seed)
    depth_net = DepthNet(streams.generator('init', 0), config.depth_min, config.depth_max)
    pose_net = PoseNet(streams.generator('init', 1))
    depth_net.astype(config.dtype)
    pose_net.astype(config.dtype)
    optimizer = _optimizer(config, _groups(config, depth_net, pose_net), len(triplets))
    log = log if log is not None else LossLog()

    def step_loss(indices: List[int]) -> LossReport:
        batch = Batch.from_triplets([triplets[i] for i in indices], config.dtype)
        return teacher_batch_loss(depth_net, pose_net, batch, K, config)

    logger.info('training teacher on %d triplets for %d epochs', len(triplets), config.epochs)
    _run_epochs(len(triplets), config, streams, optimizer, step_loss, log, TEACHER)
    return Checkpoint(
        TEACHER,
        {k: v.astype(np.float64) for k, v in depth_net.state_dict().items()},
        {k: v.astype(np.float64) for k, v in pose_net.state_dict().items()},
        optimizer.state_dict(),
        config.epochs,
        config_hash(config),
        config.depth_min,
        config.depth_max,
    )


def freeze_teacher(teacher: Checkpoint, config: TrainConfig, student: DepthNet) -> FrozenTeacher:
    depth = teacher.depth_net()
    pose = teacher.pose_net()
    if config.semantic_reference == 'teacher':
        reference = depth
    else:
        reference = student.clone()
    for net in (depth, pose, reference):
        net.astype(config.dtype)
        net.set_trainable(False)
    return FrozenTeacher(depth, pose, reference)


def train_student(
    triplets: Sequence[SampleTriplet],
    teacher: Checkpoint,
    config: TrainConfig,
    overlay: Optional[TranslatedOverlay] = None,
    log: Optional[LossLog] = None,
) -> Checkpoint:
    """Distil the frozen teacher into a student that sees mixed clean/translated frames."""
    teacher.validate()
    if teacher.role != TEACHER or teacher.pose is None:
        raise CheckpointError('student training needs a teacher checkpoint with a pose network')
    for t in triplets:
        if t.condition != DAY_CLEAR:
            raise ConditionError(t.condition, f"student training mixes day-clear samples, got {t.id}")
    K = _check_intrinsics(triplets)
    streams = SeedStreams(config.seed)

    if config.student_init == 'teacher':
        student = teacher.depth_net()
    else:
        student = DepthNet(streams.generator('init', 2), teacher.depth_min, teacher.depth_max)
    student.astype(config.dtype)
    student.set_trainable(True)
    frozen = freeze_teacher(teacher, config, student)

    conditions = ConditionSet.parse(config.conditions)
    schedule = build_schedule(conditions, config.schedule_mode)
    mix_rng = streams.stream('degrade')
    optimizer = _optimizer(config, _groups(config, student, None), len(triplets))
    log = log if log is not None else LossLog()

    def step_loss(indices: List[int]) -> LossReport:
        chosen = [triplets[i] for i in indices]
        mixed = [mix_sample(t, schedule, mix_rng, conditions, overlay) for t in chosen]
        return student_batch_loss(
            student,
            frozen,
            Batch.from_triplets(chosen, config.dtype),
            Batch.from_triplets(mixed, config.dtype),
            K,
            config,
        )

    logger.info('training student on %d triplets for %d epochs (%s)', len(triplets), config.epochs, schedule)
    _run_epochs(len(triplets), config, streams, optimizer, step_loss, log, STUDENT)
    return Checkpoint(
        STUDENT,
        {k: v.astype(np.float64) for k, v in student.state_dict().items()},
        None,
        optimizer.state_dict(),
        config.epochs,
        config_hash(config),
        teacher.depth_min,
        teacher.depth_max,
    )
