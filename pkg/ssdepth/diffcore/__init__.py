from ssdepth.diffcore.tensor import (
    Gradients,
    Graph,
    GraphRecord,
    Node,
    Tensor,
    as_tensor,
    backward,
    constant,
    inject_fault,
    is_grad_enabled,
    no_grad,
)
from ssdepth.diffcore.ops import OP_KINDS, forward_op
from ssdepth.diffcore.gradcheck import GradReport, gradient_check

__all__ = [
    'Gradients',
    'Graph',
    'GraphRecord',
    'Node',
    'Tensor',
    'as_tensor',
    'backward',
    'constant',
    'inject_fault',
    'is_grad_enabled',
    'no_grad',
    'OP_KINDS',
    'forward_op',
    'GradReport',
    'gradient_check',
]
