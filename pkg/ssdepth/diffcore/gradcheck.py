import logging

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ssdepth.diffcore.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-3
DEFAULT_TOL = 1e-4
DEFAULT_COORDS = 100

# relative-error denominator floor
REL_FLOOR = 1e-8


@dataclass(frozen=True)
class GradReport:
    name: str
    max_rel_err: float
    passed: bool
    n_coords: int
    worst: Optional[Tuple[int, Tuple[int, ...]]] = None
    failure: str = ''

    def __str__(self) -> str:
        status = 'PASS' if self.passed else 'FAIL'
        text = f"{status} {self.name or '<unnamed>'}: max_rel_err={self.max_rel_err:.3e} over {self.n_coords} coords"
        if self.worst is not None:
            leaf, index = self.worst
            text += f" (worst at leaf {leaf} index {index})"
        if self.failure:
            text += f" [{self.failure}]"
        return text


def _evaluate(f: Callable[[], Tensor]) -> float:
    with no_grad():
        return f().item()


def _numeric(f: Callable[[], Tensor], leaf: Tensor, flat_index: int, step: float) -> float:
    flat = leaf.data.reshape(-1)
    original = float(flat[flat_index])
    values = []
    for offset in (-2.0, -1.0, 1.0, 2.0):
        flat[flat_index] = original + offset * step
        values.append(_evaluate(f))
    flat[flat_index] = original
    f_m2, f_m1, f_p1, f_p2 = values
    # fourth-order central stencil
    return (f_m2 - 8.0 * f_m1 + 8.0 * f_p1 - f_p2) / (12.0 * step)


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def gradient_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    max_coords: int = DEFAULT_COORDS,
    rng: Optional[np.random.Generator] = None,
    name: str = '',
) -> GradReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` rebuilds the graph from the current contents of ``leaves``; leaf
    buffers are perturbed in place and restored after each evaluation. Up to
    ``max_coords`` coordinates per leaf are sampled (all of them for smaller
    leaves).
    """
    if step <= 0:
        raise ValueError(f"gradient_check: step must be positive, got {step}")
    if rng is None:
        rng = np.random.default_rng(0)

    output = f()
    if output.size != 1:
        raise ValueError(f"gradient_check: builder must produce a scalar, got shape {output.shape}")
    if not np.isfinite(output.item()):
        return GradReport(name, float('inf'), False, 0, failure='non-finite output')

    grads = backward(output)
    analytic = [np.array(grads[leaf], copy=True).reshape(-1) for leaf in leaves]

    worst_err = 0.0
    worst: Optional[Tuple[int, Tuple[int, ...]]] = None
    n_coords = 0
    for leaf_index, leaf in enumerate(leaves):
        if not np.all(np.isfinite(analytic[leaf_index])):
            bad = int(np.flatnonzero(~np.isfinite(analytic[leaf_index]))[0])
            location = (leaf_index, tuple(int(i) for i in np.unravel_index(bad, leaf.shape)))
            return GradReport(name, float('inf'), False, n_coords, location, 'non-finite analytic gradient')

        size = leaf.size
        coords: List[int] = list(range(size)) if size <= max_coords else sorted(
            int(i) for i in rng.choice(size, max_coords, replace=False)
        )
        for flat_index in coords:
            numeric = _numeric(f, leaf, flat_index, step)
            location = (leaf_index, tuple(int(i) for i in np.unravel_index(flat_index, leaf.shape)))
            if not np.isfinite(numeric):
                return GradReport(name, float('inf'), False, n_coords, location, 'non-finite numeric gradient')
            err = rel_error(float(analytic[leaf_index][flat_index]), numeric)
            n_coords += 1
            if err > worst_err or worst is None:
                worst_err, worst = err, location

    report = GradReport(name, worst_err, worst_err < tol, n_coords, worst)
    logger.debug('%s', report)
    return report
