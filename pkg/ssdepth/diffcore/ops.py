"""Differentiable ops.

Elementwise binary ops accept equal shapes, a 0-d scalar on either side, or
trailing-dimension expansion (the smaller shape equals the trailing dims of the
larger one). Every other shape change goes through :func:`broadcast` or
:func:`reshape` so shape mistakes surface as :class:`ShapeError`.

Image-like tensors are laid out ``(N, C, H, W)``; sampling grids are
``(N, H, W, 2)`` continuous pixel coordinates ``(u, v)``.
"""
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ssdepth.diffcore.tensor import FloatArray, Scalar, Tensor, record
from ssdepth.errors import DomainError, NonFiniteError, ShapeError

Operand = Union[Tensor, Scalar]
Axis = Union[None, int, Sequence[int]]

OP_KINDS = (
    'add',
    'sub',
    'mul',
    'div',
    'neg',
    'exp',
    'log',
    'sqrt',
    'abs',
    'pow',
    'sigmoid',
    'relu',
    'minimum',
    'mean',
    'sum',
    'matmul',
    'conv2d',
    'avgpool2d',
    'pad_replicate',
    'bilinear_sample',
    'concat',
    'reshape',
    'broadcast',
    'cosine_similarity',
    'clamp',
    'slice',
    'permute',
    'upsample2x',
    'rodrigues',
)

# below this angle the exponential-map coefficients use their series
RODRIGUES_SERIES_ANGLE = 1e-3


def _operands(op: str, a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        ta, tb = a, b
    elif isinstance(a, Tensor):
        ta, tb = a, Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor):
        ta, tb = Tensor(a, dtype=b.dtype), b
    else:
        raise TypeError(f"{op}: at least one operand must be a Tensor")

    sa, sb = ta.shape, tb.shape
    if sa == sb or ta.ndim == 0 or tb.ndim == 0:
        return ta, tb
    small, large = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) < len(large) and large[len(large) - len(small):] == small:
        return ta, tb
    raise ShapeError(op, [sa, sb], 'only scalar or trailing-dimension expansion is supported')


def _reduce(grad: FloatArray, shape: Tuple[int, ...]) -> FloatArray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=grad.dtype).reshape(())
    lead = grad.ndim - len(shape)
    return np.asarray(grad.sum(axis=tuple(range(lead))), dtype=grad.dtype).reshape(shape)


def _axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _check_finite(op: str, data: FloatArray) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)


def add(a: Operand, b: Operand) -> Tensor:
    ta, tb = _operands('add', a, b)

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        return [_reduce(g, ta.shape), _reduce(g, tb.shape)]

    return record('add', ta.data + tb.data, [ta, tb], backward)


def sub(a: Operand, b: Operand) -> Tensor:
    ta, tb = _operands('sub', a, b)

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        return [_reduce(g, ta.shape), _reduce(-g, tb.shape)]

    return record('sub', ta.data - tb.data, [ta, tb], backward)


def mul(a: Operand, b: Operand) -> Tensor:
    ta, tb = _operands('mul', a, b)

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        return [_reduce(g * tb.data, ta.shape), _reduce(g * ta.data, tb.shape)]

    return record('mul', ta.data * tb.data, [ta, tb], backward)


def div(a: Operand, b: Operand) -> Tensor:
    ta, tb = _operands('div', a, b)
    if np.any(tb.data == 0):
        raise DomainError('div', 'division by zero')
    out = ta.data / tb.data
    _check_finite('div', out)

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        return [
            _reduce(g / tb.data, ta.shape),
            _reduce(-g * ta.data / (tb.data * tb.data), tb.shape),
        ]

    return record('div', out, [ta, tb], backward)


def neg(a: Tensor) -> Tensor:
    return record('neg', -a.data, [a], lambda g: [-g])


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    _check_finite('exp', out)
    return record('exp', out, [a], lambda g: [g * out])


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError('log', 'log of non-positive value')
    return record('log', np.log(a.data), [a], lambda g: [g / a.data])


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError('sqrt', 'square root of negative value')
    out = np.sqrt(a.data)

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        # subgradient 0 at exactly zero
        safe = np.where(out > 0, out, 1.0)
        return [np.where(out > 0, 0.5 * g / safe, 0.0).astype(g.dtype)]

    return record('sqrt', out, [a], backward)


def abs(a: Tensor) -> Tensor:
    return record('abs', np.abs(a.data), [a], lambda g: [g * np.sign(a.data)])


def pow(a: Tensor, exponent: float) -> Tensor:
    integral = float(exponent).is_integer()
    if not integral and np.any(a.data < 0):
        raise DomainError('pow', f'non-integer exponent {exponent} of negative value')
    if exponent < 1 and exponent != 0 and np.any(a.data == 0):
        raise DomainError('pow', f'exponent {exponent} of zero has no derivative')
    out = np.power(a.data, exponent)
    _check_finite('pow', out)

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        return [g * exponent * np.power(a.data, exponent - 1)]

    return record('pow', out, [a], backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return record('sigmoid', out, [a], lambda g: [g * out * (1.0 - out)])


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return record('relu', np.where(positive, a.data, 0.0).astype(a.dtype), [a], lambda g: [g * positive])


def minimum(a: Operand, b: Operand) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    ta, tb = _operands('minimum', a, b)
    pick_a = ta.data <= tb.data

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        return [_reduce(g * pick_a, ta.shape), _reduce(g * ~pick_a, tb.shape)]

    return record('minimum', np.minimum(ta.data, tb.data), [ta, tb], backward)


def _expand_reduced(g: FloatArray, shape: Tuple[int, ...], axes: Tuple[int, ...], keepdims: bool) -> FloatArray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims), dtype=a.dtype)

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        return [np.array(_expand_reduced(g, a.shape, axes, keepdims))]

    return record('sum', out, [a], backward)


def mean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError('mean', [a.shape], 'mean over an empty axis')
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims), dtype=a.dtype)

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        return [np.array(_expand_reduced(g, a.shape, axes, keepdims)) / count]

    return record('mean', out, [a], backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul', [a.shape, b.shape])
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError('matmul', [a.shape, b.shape], 'batch dimensions differ')

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if ga.ndim > a.ndim:
            ga = ga.reshape(-1, *a.shape).sum(axis=0)
        if gb.ndim > b.ndim:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return [ga, gb]

    return record('matmul', np.matmul(a.data, b.data), [a, b], backward)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x: FloatArray, kh: int, kw: int, stride: int, ho: int, wo: int) -> FloatArray:
    n, c = x.shape[:2]
    sn, sc, sh, sw = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return patches.reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding, ``(N, C, H, W) * (Co, C, kh, kw)``."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError('conv2d', [x.shape, weight.shape])
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError('conv2d', [weight.shape, bias.shape], 'bias must match output channels')
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride {stride} or padding {padding}")

    n, c, h, w = x.shape
    co, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError('conv2d', [x.shape, weight.shape], 'kernel larger than padded input')

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(np.ascontiguousarray(padded), kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(co, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(n, co, ho, wo)

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        gflat = g.reshape(n, co, ho * wo)
        gw = np.matmul(gflat, np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(wmat.T, gflat).reshape(n, c, kh, kw, ho, wo)
        gpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        gx = gpad[:, :, padding:padding + h, padding:padding + w]
        grads: List[Optional[FloatArray]] = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(gflat.sum(axis=(0, 2)))
        return grads

    inputs = [x, weight] if bias is None else [x, weight, bias]
    return record('conv2d', out, inputs, backward)


def avgpool2d(x: Tensor) -> Tensor:
    """3x3 average pooling, stride 1, valid region only."""
    if x.ndim < 2 or x.shape[-1] < 3 or x.shape[-2] < 3:
        raise ShapeError('avgpool2d', [x.shape], 'needs at least 3x3 spatial extent')
    h, w = x.shape[-2:]
    ho, wo = h - 2, w - 2
    out = np.zeros(x.shape[:-2] + (ho, wo), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            out += x.data[..., i:i + ho, j:j + wo]
    out /= 9.0

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        gx = np.zeros_like(x.data)
        share = g / 9.0
        for i in range(3):
            for j in range(3):
                gx[..., i:i + ho, j:j + wo] += share
        return [gx]

    return record('avgpool2d', out, [x], backward)


def pad_replicate(x: Tensor, width: int = 1) -> Tensor:
    """Edge-replicating padding of the last two axes."""
    if x.ndim < 2 or width < 0:
        raise ShapeError('pad_replicate', [x.shape])
    p = width
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    out = np.pad(x.data, pad_spec, mode='edge')
    h, w = x.shape[-2:]

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        rows = g[..., p:p + h, :].copy()
        for k in range(p):
            rows[..., 0, :] += g[..., k, :]
            rows[..., h - 1, :] += g[..., p + h + k, :]
        gx = rows[..., p:p + w].copy()
        for k in range(p):
            gx[..., 0] += rows[..., k]
            gx[..., w - 1] += rows[..., p + w + k]
        return [gx]

    return record('pad_replicate', out, [x], backward)


def _lower_cell(coord: FloatArray, size: int) -> FloatArray:
    # exact integer k uses the cell [k-1, k]
    return np.clip(np.ceil(coord) - 1, 0, max(size - 2, 0))


def bilinear_sample(image: Tensor, grid: Tensor) -> Tensor:
    """Sample ``image`` (N, C, H, W) at pixel coordinates ``grid`` (N, Ho, Wo, 2).

    Coordinates outside the frame are clamped to the border (edge-clamp) and
    get zero gradient. At exact integer coordinates the interpolation cell is
    the lower-index one, so the coordinate sub-gradient is the left (u) and
    lower-index (v) one-sided slope.
    """
    if image.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] != image.shape[0]:
        raise ShapeError('bilinear_sample', [image.shape, grid.shape])
    n, c, h, w = image.shape
    _, ho, wo, _ = grid.shape
    if h < 2 or w < 2:
        raise ShapeError('bilinear_sample', [image.shape, grid.shape], 'image must be at least 2x2')

    u = grid.data[..., 0].reshape(n, -1)
    v = grid.data[..., 1].reshape(n, -1)
    inside_u = (u >= 0) & (u <= w - 1)
    inside_v = (v >= 0) & (v <= h - 1)
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    u0 = _lower_cell(uc, w)
    v0 = _lower_cell(vc, h)
    fu = uc - u0
    fv = vc - v0
    u0i = u0.astype(np.int64)
    v0i = v0.astype(np.int64)

    flat = image.data.reshape(n, c, h * w)
    offsets = [(0, 0), (0, 1), (1, 0), (1, 1)]

    def gather(dv: int, du: int) -> FloatArray:
        index = (v0i + dv) * w + (u0i + du)
        return np.take_along_axis(flat, np.broadcast_to(index[:, None, :], (n, c, index.shape[1])), axis=2)

    i00, i01, i10, i11 = (gather(dv, du) for dv, du in offsets)
    wu = fu[:, None, :]
    wv = fv[:, None, :]
    out = (1 - wv) * ((1 - wu) * i00 + wu * i01) + wv * ((1 - wu) * i10 + wu * i11)

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        gflat = g.reshape(n, c, -1)
        weights = {
            (0, 0): (1 - wv) * (1 - wu),
            (0, 1): (1 - wv) * wu,
            (1, 0): wv * (1 - wu),
            (1, 1): wv * wu,
        }
        gimg = np.zeros((c, n * h * w), dtype=g.dtype)
        base = (np.arange(n) * h * w)[:, None]
        for (dv, du), weight in weights.items():
            index = ((v0i + dv) * w + (u0i + du) + base).reshape(-1)
            contrib = np.swapaxes(gflat * weight, 0, 1).reshape(c, -1)
            for ch in range(c):
                gimg[ch] += np.bincount(index, weights=contrib[ch], minlength=n * h * w)
        gimage = np.swapaxes(gimg.reshape(c, n, h, w), 0, 1)

        du_val = (1 - wv) * (i01 - i00) + wv * (i11 - i10)
        dv_val = (1 - wu) * (i10 - i00) + wu * (i11 - i01)
        gu = (gflat * du_val).sum(axis=1) * inside_u
        gv = (gflat * dv_val).sum(axis=1) * inside_v
        ggrid = np.stack([gu.reshape(n, ho, wo), gv.reshape(n, ho, wo)], axis=-1)
        return [np.ascontiguousarray(gimage), ggrid.astype(g.dtype)]

    return record('bilinear_sample', out.reshape(n, c, ho, wo), [image, grid], backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError('concat', [], 'nothing to concatenate')
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError('concat', [x.shape for x in tensors], f'axis {axis}')
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        return [np.ascontiguousarray(part) for part in np.split(g, bounds, axis=ax)]

    return record('concat', np.concatenate([t.data for t in tensors], axis=ax), list(tensors), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError('reshape', [a.shape, tuple(shape)])
    return record('reshape', out, [a], lambda g: [g.reshape(a.shape)])


def broadcast(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast to ``shape``."""
    target = tuple(shape)
    try:
        out = np.broadcast_to(a.data, target)
    except ValueError:
        raise ShapeError('broadcast', [a.shape, target])

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        lead = len(target) - a.ndim
        reduced = g.sum(axis=tuple(range(lead))) if lead else g
        squeeze = tuple(i for i, d in enumerate(a.shape) if d == 1 and target[lead + i] != 1)
        if squeeze:
            reduced = reduced.sum(axis=squeeze, keepdims=True)
        return [np.asarray(reduced, dtype=g.dtype).reshape(a.shape)]

    return record('broadcast', np.array(out), [a], backward)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """Cosine similarity along ``axis``; zero-norm vectors give 0."""
    if a.shape != b.shape:
        raise ShapeError('cosine_similarity', [a.shape, b.shape])
    ax = axis % a.ndim
    dot = (a.data * b.data).sum(axis=ax)
    na = np.sqrt((a.data * a.data).sum(axis=ax))
    nb = np.sqrt((b.data * b.data).sum(axis=ax))
    valid = (na > 0) & (nb > 0)
    na_safe = np.where(valid, na, 1.0)
    nb_safe = np.where(valid, nb, 1.0)
    cos = np.where(valid, dot / (na_safe * nb_safe), 0.0).astype(a.dtype)

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        scale = np.expand_dims(np.where(valid, g / (na_safe * nb_safe), 0.0), ax)
        cos_e = np.expand_dims(cos, ax)
        ga = scale * (b.data - cos_e * a.data * np.expand_dims(nb_safe / na_safe, ax))
        gb = scale * (a.data - cos_e * b.data * np.expand_dims(na_safe / nb_safe, ax))
        return [ga.astype(g.dtype), gb.astype(g.dtype)]

    return record('cosine_similarity', cos, [a, b], backward)


def clamp(a: Tensor, low: float, high: float) -> Tensor:
    if low > high:
        raise ValueError(f"clamp: low {low} exceeds high {high}")
    passing = (a.data >= low) & (a.data <= high)
    return record('clamp', np.clip(a.data, low, high), [a], lambda g: [g * passing])


def slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError('slice', [a.shape], f'range {start}:{stop} on axis {axis}')
    index: List[Any] = [np.s_[:]] * a.ndim
    index[ax] = np.s_[start:stop]
    key = tuple(index)

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        full = np.zeros_like(a.data)
        full[key] = g
        return [full]

    return record('slice', np.ascontiguousarray(a.data[key]), [a], backward)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    order = tuple(axes)
    if sorted(order) != list(range(a.ndim)):
        raise ShapeError('permute', [a.shape], f'axes {order}')
    inverse = tuple(int(i) for i in np.argsort(order))
    out = np.ascontiguousarray(np.transpose(a.data, order))
    return record('permute', out, [a], lambda g: [np.ascontiguousarray(np.transpose(g, inverse))])


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    if a.ndim < 2:
        raise ShapeError('upsample2x', [a.shape])
    out = np.repeat(np.repeat(a.data, 2, axis=-2), 2, axis=-1)
    h, w = a.shape[-2:]

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        return [g.reshape(g.shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1))]

    return record('upsample2x', out, [a], backward)


def _rodrigues_values(s: FloatArray) -> Tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
    small = s < RODRIGUES_SERIES_ANGLE ** 2
    theta = np.sqrt(np.where(small, 1.0, s))
    sin, cos = np.sin(theta), np.cos(theta)
    theta2 = theta * theta
    a_closed = sin / theta
    b_closed = (1.0 - cos) / theta2
    da_closed = (theta * cos - sin) / (2.0 * theta2 * theta)
    db_closed = (theta * sin - 2.0 * (1.0 - cos)) / (2.0 * theta2 * theta2)
    a_series = 1.0 - s / 6.0 + s * s / 120.0
    b_series = 0.5 - s / 24.0 + s * s / 720.0
    da_series = -1.0 / 6.0 + s / 60.0
    db_series = -1.0 / 24.0 + s / 360.0
    return (
        np.where(small, a_series, a_closed),
        np.where(small, b_series, b_closed),
        np.where(small, da_series, da_closed),
        np.where(small, db_series, db_closed),
    )


def rodrigues(theta_sq: Tensor) -> Tensor:
    """Exponential-map coefficients of a squared rotation angle.

    Returns ``theta_sq.shape + (2,)`` holding ``A = sin(t)/t`` and
    ``B = (1 - cos(t))/t**2`` so that ``R = I + A K + B K^2`` with ``K`` the
    skew matrix of the axis-angle vector.
    """
    if np.any(theta_sq.data < 0):
        raise DomainError('rodrigues', 'squared angle must be non-negative')
    a, b, da, db = _rodrigues_values(theta_sq.data)
    out = np.stack([a, b], axis=-1).astype(theta_sq.dtype)

    def backward(g: FloatArray) -> List[Optional[FloatArray]]:
        return [(g[..., 0] * da + g[..., 1] * db).astype(g.dtype)]

    return record('rodrigues', out, [theta_sq], backward)


_DISPATCH: Dict[str, Callable[..., Tensor]] = {
    'add': add,
    'sub': sub,
    'mul': mul,
    'div': div,
    'neg': neg,
    'exp': exp,
    'log': log,
    'sqrt': sqrt,
    'abs': abs,
    'pow': pow,
    'sigmoid': sigmoid,
    'relu': relu,
    'minimum': minimum,
    'mean': mean,
    'sum': sum,
    'matmul': matmul,
    'conv2d': conv2d,
    'avgpool2d': avgpool2d,
    'pad_replicate': pad_replicate,
    'bilinear_sample': bilinear_sample,
    'reshape': reshape,
    'broadcast': broadcast,
    'cosine_similarity': cosine_similarity,
    'clamp': clamp,
    'slice': slice,
    'permute': permute,
    'upsample2x': upsample2x,
    'rodrigues': rodrigues,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **params: Any) -> Tensor:
    """Apply the op named ``kind``; ``concat`` takes all inputs as one list."""
    if kind == 'concat':
        return concat(inputs, **params)
    if kind not in _DISPATCH:
        raise ValueError(f"Unknown op kind: '{kind}'")
    return _DISPATCH[kind](*inputs, **params)


def stack(values: Sequence[Tensor]) -> Tensor:
    """Concatenate equally shaped tensors along a new trailing axis."""
    expanded = [reshape(v, v.shape + (1,)) for v in values]
    return concat(expanded, axis=-1)
