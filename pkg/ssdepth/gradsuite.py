"""Finite-difference checks for every differentiable op and loss.

Inputs are drawn away from the non-differentiable points of ``abs``, ``relu``,
``clamp``, ``minimum`` and integer sample coordinates so that the central
differences never straddle a kink.
"""
import logging

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ssdepth import losses, nets
from ssdepth.camgeom import Intrinsics, PoseBatch, synthesize_view
from ssdepth.diffcore import ops
from ssdepth.diffcore.gradcheck import DEFAULT_COORDS, DEFAULT_STEP, DEFAULT_TOL, GradReport, gradient_check
from ssdepth.diffcore.tensor import Tensor, constant, inject_fault

logger = logging.getLogger(__name__)

Builder = Callable[[], Tensor]
Case = Tuple[Builder, List[Tensor]]
CaseFactory = Callable[[np.random.Generator], Case]

# elementwise op leaves hold more than DEFAULT_COORDS entries
OP_SHAPE = (10, 12)


def leaf(data: np.ndarray, name: str = '') -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def uniform(rng: np.random.Generator, shape: Tuple[int, ...], low: float = -1.0, high: float = 1.0) -> Tensor:
    return leaf(rng.uniform(low, high, shape))


def away_from(rng: np.random.Generator, shape: Tuple[int, ...], point: float, low: float, high: float) -> np.ndarray:
    """Values whose distance from ``point`` lies in ``[low, high]``, random side."""
    sign = rng.choice([-1.0, 1.0], size=shape)
    return np.asarray(point + sign * rng.uniform(low, high, shape))


def _scalarize(rng: np.random.Generator, shape: Tuple[int, ...]) -> Callable[[Tensor], Tensor]:
    weights = rng.uniform(0.5, 1.5, shape)

    def reduce(out: Tensor) -> Tensor:
        return ops.sum(out * constant(weights, out))

    return reduce


def _unary(fn: Callable[[Tensor], Tensor], data: Callable[[np.random.Generator], np.ndarray]) -> CaseFactory:
    def factory(rng: np.random.Generator) -> Case:
        x = leaf(data(rng))
        reduce = _scalarize(rng, fn(x).shape)
        return (lambda: reduce(fn(x))), [x]

    return factory


def _binary(fn: Callable[[Tensor, Tensor], Tensor], data: Callable[[np.random.Generator], Tuple[np.ndarray, np.ndarray]]) -> CaseFactory:
    def factory(rng: np.random.Generator) -> Case:
        a_data, b_data = data(rng)
        a, b = leaf(a_data), leaf(b_data)
        reduce = _scalarize(rng, fn(a, b).shape)
        return (lambda: reduce(fn(a, b))), [a, b]

    return factory


def _pair(shape: Tuple[int, ...], low: float = -1.0, high: float = 1.0) -> Callable[[np.random.Generator], Tuple[np.ndarray, np.ndarray]]:
    return lambda rng: (rng.uniform(low, high, shape), rng.uniform(low, high, shape))


def _minimum_data(rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    a = rng.uniform(-1.0, 1.0, OP_SHAPE)
    return a, a + away_from(rng, OP_SHAPE, 0.0, 0.2, 0.5)


def _divisor_data(rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    return rng.uniform(-1.0, 1.0, OP_SHAPE), away_from(rng, OP_SHAPE, 0.0, 0.5, 1.5)


def _conv_case(rng: np.random.Generator) -> Case:
    x = uniform(rng, (2, 3, 6, 7))
    w = uniform(rng, (4, 3, 3, 3), -0.5, 0.5)
    b = uniform(rng, (4,), -0.1, 0.1)
    reduce = _scalarize(rng, ops.conv2d(x, w, b, stride=2, padding=1).shape)
    return (lambda: reduce(ops.conv2d(x, w, b, stride=2, padding=1))), [x, w, b]


def _bilinear_case(rng: np.random.Generator) -> Case:
    h, w = 8, 9
    image = uniform(rng, (1, 2, h, w), 0.0, 1.0)
    u = rng.integers(0, w - 1, (1, 6, 5)) + rng.uniform(0.1, 0.9, (1, 6, 5))
    v = rng.integers(0, h - 1, (1, 6, 5)) + rng.uniform(0.1, 0.9, (1, 6, 5))
    grid = leaf(np.stack([u, v], axis=-1))
    reduce = _scalarize(rng, (1, 2, 6, 5))
    return (lambda: reduce(ops.bilinear_sample(image, grid))), [image, grid]


def _concat_case(rng: np.random.Generator) -> Case:
    a = uniform(rng, (4, 5, 6))
    b = uniform(rng, (4, 1, 6))
    reduce = _scalarize(rng, (4, 6, 6))
    return (lambda: reduce(ops.concat([a, b], axis=1))), [a, b]


def _cosine_case(rng: np.random.Generator) -> Case:
    a = uniform(rng, (1, 4, 5, 6))
    b = uniform(rng, (1, 4, 5, 6))
    reduce = _scalarize(rng, (1, 5, 6))
    return (lambda: reduce(ops.cosine_similarity(a, b, axis=1))), [a, b]


OP_CASES: Dict[str, CaseFactory] = {
    'add': _binary(ops.add, _pair(OP_SHAPE)),
    'sub': _binary(ops.sub, _pair(OP_SHAPE)),
    'mul': _binary(ops.mul, _pair(OP_SHAPE)),
    'div': _binary(ops.div, _divisor_data),
    'neg': _unary(ops.neg, lambda rng: rng.uniform(-1.0, 1.0, OP_SHAPE)),
    'exp': _unary(ops.exp, lambda rng: rng.uniform(-1.0, 1.0, (120,))),
    'log': _unary(ops.log, lambda rng: rng.uniform(0.5, 2.0, OP_SHAPE)),
    'sqrt': _unary(ops.sqrt, lambda rng: rng.uniform(0.5, 2.0, OP_SHAPE)),
    'abs': _unary(ops.abs, lambda rng: away_from(rng, OP_SHAPE, 0.0, 0.2, 1.0)),
    'pow': _unary(lambda x: ops.pow(x, 2.5), lambda rng: rng.uniform(0.5, 1.5, OP_SHAPE)),
    'sigmoid': _unary(ops.sigmoid, lambda rng: rng.uniform(-2.0, 2.0, OP_SHAPE)),
    'relu': _unary(ops.relu, lambda rng: away_from(rng, OP_SHAPE, 0.0, 0.2, 1.0)),
    'minimum': _binary(ops.minimum, _minimum_data),
    'mean': _unary(lambda x: ops.mean(x, axis=1, keepdims=True), lambda rng: rng.uniform(-1.0, 1.0, (4, 5, 6))),
    'sum': _unary(lambda x: ops.sum(x, axis=(0, 2)), lambda rng: rng.uniform(-1.0, 1.0, (4, 5, 6))),
    'matmul': _binary(ops.matmul, lambda rng: (rng.uniform(-1, 1, (3, 6, 8)), rng.uniform(-1, 1, (8, 14)))),
    'conv2d': _conv_case,
    'avgpool2d': _unary(ops.avgpool2d, lambda rng: rng.uniform(0.0, 1.0, (1, 3, 6, 7))),
    'pad_replicate': _unary(ops.pad_replicate, lambda rng: rng.uniform(0.0, 1.0, (1, 3, 6, 7))),
    'bilinear_sample': _bilinear_case,
    'concat': _concat_case,
    'reshape': _unary(lambda x: ops.reshape(x, (20, 6)), lambda rng: rng.uniform(-1.0, 1.0, (4, 5, 6))),
    'broadcast': _unary(lambda x: ops.broadcast(x, (5, 3, 24)), lambda rng: rng.uniform(-1.0, 1.0, (5, 1, 24))),
    'cosine_similarity': _cosine_case,
    'clamp': _unary(
        lambda x: ops.clamp(x, -1.0, 1.0),
        lambda rng: np.where(rng.random(OP_SHAPE) < 0.5, away_from(rng, OP_SHAPE, 0.0, 0.0, 0.9), away_from(rng, OP_SHAPE, 0.0, 1.1, 2.0)),
    ),
    'slice': _unary(lambda x: ops.slice(x, 2, 1, 4), lambda rng: rng.uniform(-1.0, 1.0, (4, 6, 5))),
    'permute': _unary(lambda x: ops.permute(x, (0, 2, 3, 1)), lambda rng: rng.uniform(-1.0, 1.0, (2, 3, 4, 5))),
    'upsample2x': _unary(ops.upsample2x, lambda rng: rng.uniform(-1.0, 1.0, (2, 3, 4, 5))),
    'rodrigues': _unary(ops.rodrigues, lambda rng: rng.uniform(0.05, 2.0, (120,))),
}


def ramp_image(n: int, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Per-channel linear intensity ramps; bilinear sampling of them has no kinks."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    channels = []
    for _ in range(3):
        a, b = rng.uniform(0.01, 0.025, 2)
        channels.append(0.1 + a * u + b * v)
    return np.broadcast_to(np.stack(channels), (n, 3, height, width)).copy()


def _warp_inputs(rng: np.random.Generator) -> Tuple[Intrinsics, np.ndarray, np.ndarray, Tensor, Tensor]:
    K = Intrinsics(16.0, 16.0, 7.5, 5.5, 16, 12)
    source = ramp_image(1, 12, 16, rng)
    target = source + 0.2 + rng.uniform(0.0, 0.05, source.shape)
    depth = leaf(rng.uniform(4.0, 6.0, (1, 1, 12, 16)))
    # backward motion keeps every warped coordinate inside the frame
    params = leaf(np.array([[0.005, -0.005, 0.004, 0.01, 0.01, 0.3]]))
    return K, source, target, depth, params


def _warp_case(rng: np.random.Generator) -> Case:
    K, source, target, depth, params = _warp_inputs(rng)
    src = Tensor(source)
    reduce = _scalarize(rng, source.shape)

    def build() -> Tensor:
        warped, _ = synthesize_view(src, depth, PoseBatch.from_params(params), K)
        return reduce(warped)

    return build, [depth, params]


def _reprojection_case(rng: np.random.Generator) -> Case:
    K, source, target, depth, params = _warp_inputs(rng)
    other = PoseBatch.from_params(Tensor(np.array([[-0.004, 0.005, -0.003, -0.01, 0.01, 0.45]])))
    src = Tensor(source)
    # the darker second source loses the pixelwise minimum everywhere by a wide margin
    darker = Tensor(source - 0.1)
    tgt = Tensor(target)

    def build() -> Tensor:
        warps = [
            synthesize_view(src, depth, PoseBatch.from_params(params), K),
            synthesize_view(darker, depth, other, K),
        ]
        loss, _ = losses.reprojection_loss(tgt, warps)
        return loss

    return build, [depth, params]


def _pose_case(rng: np.random.Generator) -> Case:
    params = leaf(np.concatenate([rng.uniform(-0.3, 0.3, (20, 3)), rng.uniform(-1, 1, (20, 3))], axis=1))
    reduce_r = _scalarize(rng, (20, 3, 3))
    reduce_t = _scalarize(rng, (20, 3))

    def build() -> Tensor:
        batch = PoseBatch.from_params(params)
        return reduce_r(batch.R) + reduce_t(batch.t)

    return build, [params]


def _posenet_case(rng: np.random.Generator) -> Case:
    """Frame pair through the pose network to rotation and translation.

    Trunk weights are non-negative and scaled by their fan-in with positive
    biases, so every relu stays in its linear region under perturbation.
    """
    net = nets.PoseNet(rng)
    for name, tensor in net.parameters():
        if name.startswith('head'):
            tensor.data = rng.uniform(-1.0, 1.0, tensor.shape)
        elif name.endswith('.weight'):
            fan_in = int(np.prod(tensor.shape[1:]))
            tensor.data = rng.uniform(0.0, 2.0 / fan_in, tensor.shape)
        else:
            tensor.data = rng.uniform(0.05, 0.1, tensor.shape)
    first = uniform(rng, (1, 3, 16, 16), 0.2, 0.8)
    second = Tensor(rng.uniform(0.2, 0.8, (1, 3, 16, 16)))
    reduce_r = _scalarize(rng, (1, 3, 3))
    reduce_t = _scalarize(rng, (1, 3))

    def build() -> Tensor:
        pose = net.forward(first, second)
        return reduce_r(pose.R) + reduce_t(pose.t)

    params = dict(net.parameters())
    return build, [first, params['enc1.weight'], params['enc4.weight'], params['head.weight'], params['head.bias']]


def _ssim_case(rng: np.random.Generator) -> Case:
    a = uniform(rng, (1, 3, 5, 6), 0.0, 1.0)
    b = uniform(rng, (1, 3, 5, 6), 0.0, 1.0)
    reduce = _scalarize(rng, a.shape)
    return (lambda: reduce(losses.ssim(a, b))), [a, b]


def _photometric_case(rng: np.random.Generator) -> Case:
    a_data = rng.uniform(0.3, 0.7, (1, 3, 5, 6))
    a = leaf(a_data)
    b = leaf(a_data + away_from(rng, a_data.shape, 0.0, 0.1, 0.3))
    reduce = _scalarize(rng, (1, 1, 5, 6))
    return (lambda: reduce(losses.photometric_error(a, b))), [a, b]


def _depth_pair(rng: np.random.Generator, shape: Tuple[int, ...]) -> Tuple[Tensor, Tensor]:
    teacher = rng.uniform(2.0, 8.0, shape)
    student = teacher * (1.0 + away_from(rng, shape, 0.0, 0.1, 0.3))
    return leaf(student), leaf(teacher)


def _distillation_case(rng: np.random.Generator) -> Case:
    student, teacher = _depth_pair(rng, (1, 1, 10, 12))
    reduce = _scalarize(rng, student.shape)
    return (lambda: reduce(losses.distillation_loss(student, teacher))), [student, teacher]


def _teacher_loss_case(rng: np.random.Generator) -> Case:
    student, teacher = _depth_pair(rng, (1, 1, 10, 12))
    keep = rng.random(student.shape) < 0.6
    mask = losses.TeacherMask(keep, np.zeros(student.shape), np.zeros(student.shape))
    return (lambda: losses.teacher_loss(mask, losses.distillation_loss(student, teacher))), [student]


def _semantic_case(rng: np.random.Generator) -> Case:
    student = uniform(rng, (1, 4, 5, 6))
    reference = Tensor(rng.uniform(-1.0, 1.0, (1, 4, 5, 6)))
    return (lambda: losses.semantic_loss(student, reference)), [student]


def _smoothness_case(rng: np.random.Generator) -> Case:
    v, u = np.mgrid[0:10, 0:12].astype(np.float64)
    disparity = leaf((1.0 + 0.1 * u + 0.1 * v + rng.uniform(0.0, 0.02, (10, 12)))[None, None])
    image = Tensor(rng.uniform(0.0, 1.0, (1, 3, 10, 12)))
    return (lambda: losses.smoothness_loss(disparity, image)), [disparity]


LOSS_CASES: Dict[str, CaseFactory] = {
    'pose_from_params': _pose_case,
    'posenet': _posenet_case,
    'synthesize_view': _warp_case,
    'ssim': _ssim_case,
    'photometric_error': _photometric_case,
    'reprojection_loss': _reprojection_case,
    'distillation_loss': _distillation_case,
    'teacher_loss': _teacher_loss_case,
    'semantic_loss': _semantic_case,
    'smoothness_loss': _smoothness_case,
}


def case_names() -> List[str]:
    return list(OP_CASES) + list(LOSS_CASES)


def run_case(
    name: str,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    max_coords: int = DEFAULT_COORDS,
) -> GradReport:
    factory = OP_CASES.get(name) or LOSS_CASES.get(name)
    if factory is None:
        raise ValueError(f"Unknown gradient case: '{name}'")
    rng = np.random.default_rng(seed)
    f, leaves = factory(rng)
    return gradient_check(f, leaves, step, tol, max_coords, rng, name)


def run_suite(
    names: Optional[Sequence[str]] = None,
    seed: int = 0,
    fault: Sequence[str] = (),
    tol: float = DEFAULT_TOL,
) -> List[GradReport]:
    """Check every case (or ``names``); ``fault`` corrupts those op kinds' backward passes."""
    reports = []
    with inject_fault(*fault):
        for name in names or case_names():
            report = run_case(name, seed, tol=tol)
            logger.info('%s', report)
            reports.append(report)
    return reports
