import logging

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ssdepth.diffcore.tensor import FloatArray, Gradients, Tensor
from ssdepth.errors import CheckpointError, NonFiniteError

logger = logging.getLogger(__name__)


@dataclass
class ParamGroup:
    name: str
    params: List[Tuple[str, Tensor]]
    lr: float


class Optimizer:
    """Per-group learning rates with an optional linear decay to zero."""
    groups: List[ParamGroup]
    total_steps: int
    step_count: int
    state: Dict[str, FloatArray]

    def __init__(self, groups: Sequence[ParamGroup], total_steps: int = 0):
        names = [g.name for g in groups]
        if len(set(names)) != len(names):
            raise ValueError(f"Optimizer: duplicate parameter groups {names}")
        for group in groups:
            if group.lr < 0:
                raise ValueError(f"Optimizer: negative learning rate for group '{group.name}'")
        self.groups = list(groups)
        self.total_steps = total_steps
        self.step_count = 0
        self.state = {}

    def lr_scale(self) -> float:
        if self.total_steps <= 0:
            return 1.0
        return max(0.0, 1.0 - self.step_count / self.total_steps)

    def current_lr(self, group: str) -> float:
        for g in self.groups:
            if g.name == group:
                return g.lr * self.lr_scale()
        raise KeyError(group)

    def _update(self, key: str, param: Tensor, grad: FloatArray, lr: float) -> FloatArray:
        raise NotImplementedError('Optimizer::_update()')

    def step(self, grads: Gradients) -> None:
        """Apply one update to every parameter, or to none if any update is non-finite."""
        scale = self.lr_scale()
        previous = dict(self.state)
        pending: List[Tuple[Tensor, FloatArray]] = []
        for group in self.groups:
            lr = group.lr * scale
            for name, param in group.params:
                key = f'{group.name}/{name}'
                updated = self._update(key, param, grads[param], lr)
                if not np.all(np.isfinite(updated)):
                    self.state = previous
                    raise NonFiniteError(f'step {self.step_count}', f'parameter {key}')
                pending.append((param, updated))
        for param, updated in pending:
            param.data = np.ascontiguousarray(updated, dtype=param.dtype)
        self.step_count += 1

    def state_dict(self) -> Dict[str, FloatArray]:
        out = {name: value.copy() for name, value in self.state.items()}
        out['step'] = np.array([float(self.step_count)])
        return out

    def load_state_dict(self, state: Dict[str, FloatArray]) -> None:
        if 'step' not in state:
            raise CheckpointError('optimizer state has no step counter')
        self.step_count = int(state['step'].reshape(-1)[0])
        self.state = {name: np.array(value, copy=True) for name, value in state.items() if name != 'step'}


class AdamW(Optimizer):
    """Adaptive moments with decoupled weight decay."""
    beta1: float
    beta2: float
    eps: float
    weight_decay: float

    def __init__(
        self,
        groups: Sequence[ParamGroup],
        total_steps: int = 0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
    ):
        super().__init__(groups, total_steps)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay

    def _update(self, key: str, param: Tensor, grad: FloatArray, lr: float) -> FloatArray:
        m = self.state.get(f'm/{key}', np.zeros_like(param.data, dtype=np.float64))
        v = self.state.get(f'v/{key}', np.zeros_like(param.data, dtype=np.float64))
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self.state[f'm/{key}'] = m
        self.state[f'v/{key}'] = v
        k = self.step_count + 1
        m_hat = m / (1.0 - self.beta1 ** k)
        v_hat = v / (1.0 - self.beta2 ** k)
        decayed = param.data * (1.0 - lr * self.weight_decay)
        return np.asarray(decayed - lr * m_hat / (np.sqrt(v_hat) + self.eps))


class SGD(Optimizer):
    momentum: float
    weight_decay: float

    def __init__(
        self,
        groups: Sequence[ParamGroup],
        total_steps: int = 0,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
    ):
        super().__init__(groups, total_steps)
        self.momentum = momentum
        self.weight_decay = weight_decay

    def _update(self, key: str, param: Tensor, grad: FloatArray, lr: float) -> FloatArray:
        buf = self.state.get(f'buf/{key}', np.zeros_like(param.data, dtype=np.float64))
        buf = self.momentum * buf + grad
        self.state[f'buf/{key}'] = buf
        decayed = param.data * (1.0 - lr * self.weight_decay)
        return np.asarray(decayed - lr * buf)


def make_optimizer(
    kind: str,
    groups: Sequence[ParamGroup],
    total_steps: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-2,
    momentum: float = 0.9,
) -> Optimizer:
    if kind == 'adamw':
        return AdamW(groups, total_steps, beta1, beta2, eps, weight_decay)
    if kind == 'sgd':
        return SGD(groups, total_steps, momentum, weight_decay)
    raise ValueError(f"Unknown optimizer: '{kind}'")
