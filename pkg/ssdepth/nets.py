"""Small convolutional depth and pose networks plus the SSDF array container."""
import io
import json
import logging
import struct

from typing import Any, BinaryIO, Dict, Iterator, List, Optional, Tuple, TypeVar

import numpy as np

from ssdepth.camgeom import PoseBatch
from ssdepth.diffcore import ops
from ssdepth.diffcore.tensor import FloatArray, Tensor
from ssdepth.errors import CheckpointError, ShapeError

logger = logging.getLogger(__name__)

ENCODER_CHANNELS = (16, 32, 64, 128)
POSE_CHANNELS = (16, 32, 64, 64)
POSE_SCALE = 0.01
DIVISOR = 16

SSDF_MAGIC = b'SSDF'
SSDF_VERSION = 1

N = TypeVar('N', bound='Network')


class Network:
    """Named parameter tensors with a forward pass built from diffcore ops."""
    params: Dict[str, Tensor]

    def __init__(self) -> None:
        self.params = {}

    def forward(self, *inputs: Tensor) -> Any:
        raise NotImplementedError('Network::forward()')

    def _conv_param(self, name: str, cin: int, cout: int, kernel: int, rng: np.random.Generator) -> None:
        # kaiming-uniform for relu
        fan_in = cin * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)
        self.params[f'{name}.weight'] = Tensor(
            rng.uniform(-bound, bound, size=(cout, cin, kernel, kernel)), requires_grad=True, name=f'{name}.weight'
        )
        self.params[f'{name}.bias'] = Tensor(np.zeros(cout), requires_grad=True, name=f'{name}.bias')

    def conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        weight = self.params[f'{name}.weight']
        padding = weight.shape[-1] // 2
        return ops.conv2d(x, weight, self.params[f'{name}.bias'], stride=stride, padding=padding)

    def parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def set_trainable(self, trainable: bool) -> None:
        for tensor in self.params.values():
            tensor.requires_grad = trainable

    def state_dict(self) -> Dict[str, FloatArray]:
        return {name: tensor.data.copy() for name, tensor in self.params.items()}

    def load_state_dict(self, state: Dict[str, FloatArray]) -> None:
        missing = sorted(set(self.params) - set(state))
        unexpected = sorted(set(state) - set(self.params))
        if missing or unexpected:
            raise CheckpointError(f"parameter mismatch: missing {missing}, unexpected {unexpected}")
        for name, tensor in self.params.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise CheckpointError(f"parameter '{name}' has shape {value.shape}, expected {tensor.shape}")
            tensor.data = np.array(value, dtype=tensor.dtype, copy=True)

    def astype(self, dtype: Any) -> None:
        for tensor in self.params.values():
            tensor.data = tensor.data.astype(dtype)

    def clone(self: N) -> N:
        other = self.__class__.__new__(self.__class__)
        other.__dict__.update(self.__dict__)
        other.params = {
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name) for name, t in self.params.items()
        }
        return other


def _check_image(op: str, image: Tensor, channels: int) -> None:
    if image.ndim != 4 or image.shape[1] != channels:
        raise ShapeError(op, [image.shape], f'expected (N, {channels}, H, W)')
    h, w = image.shape[2:]
    if h % DIVISOR or w % DIVISOR:
        raise ShapeError(op, [image.shape], f'height and width must be divisible by {DIVISOR}')


class DepthNet(Network):
    """Four-level strided encoder and a skip-connected nearest-upsampling decoder.

    The sigmoid head maps to depth through the bounded inverse-depth
    parameterisation ``1 / (s (1/d_min - 1/d_max) + 1/d_max)``.
    """
    depth_min: float
    depth_max: float

    def __init__(self, rng: np.random.Generator, depth_min: float = 0.1, depth_max: float = 80.0):
        super().__init__()
        if not 0 < depth_min < depth_max:
            raise ValueError(f"DepthNet: invalid depth bounds {depth_min}..{depth_max}")
        self.depth_min = depth_min
        self.depth_max = depth_max

        cin = 3
        for level, cout in enumerate(ENCODER_CHANNELS, start=1):
            self._conv_param(f'enc{level}', cin, cout, 3, rng)
            cin = cout
        c1, c2, c3, c4 = ENCODER_CHANNELS
        self._conv_param('dec3', c4 + c3, c3, 3, rng)
        self._conv_param('dec2', c3 + c2, c2, 3, rng)
        self._conv_param('dec1', c2 + c1, c1, 3, rng)
        self._conv_param('dec0', c1 + 3, c1, 3, rng)
        self._conv_param('head', c1, 1, 3, rng)

    def encode_levels(self, image: Tensor) -> List[Tensor]:
        _check_image('DepthNet', image, 3)
        levels = []
        x = image
        for level in range(1, len(ENCODER_CHANNELS) + 1):
            x = ops.relu(self.conv(f'enc{level}', x, stride=2))
            levels.append(x)
        return levels

    def encode(self, image: Tensor) -> Tensor:
        """Deepest encoder features, ``(N, 128, H/16, W/16)``."""
        return self.encode_levels(image)[-1]

    def sigmoid_to_depth(self, sigma: Tensor) -> Tensor:
        inv_min = 1.0 / self.depth_min
        inv_max = 1.0 / self.depth_max
        return 1.0 / (sigma * (inv_min - inv_max) + inv_max)

    def head_output(self, image: Tensor) -> Tuple[Tensor, Tensor]:
        e1, e2, e3, e4 = self.encode_levels(image)
        x = ops.relu(self.conv('dec3', ops.concat([ops.upsample2x(e4), e3], axis=1)))
        x = ops.relu(self.conv('dec2', ops.concat([ops.upsample2x(x), e2], axis=1)))
        x = ops.relu(self.conv('dec1', ops.concat([ops.upsample2x(x), e1], axis=1)))
        x = ops.relu(self.conv('dec0', ops.concat([ops.upsample2x(x), image], axis=1)))
        return ops.sigmoid(self.conv('head', x)), e4

    def forward(self, *inputs: Tensor) -> Tuple[Tensor, Tensor]:
        """Depth ``(N, 1, H, W)`` and the deepest encoder features."""
        (image,) = inputs
        sigma, features = self.head_output(image)
        return self.sigmoid_to_depth(sigma), features


class PoseNet(Network):
    """Strided trunk over a stacked frame pair and a zero-initialised 1x1 head.

    The globally averaged head output is scaled by :data:`POSE_SCALE` and read
    as axis-angle rotation plus translation.
    """

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        cin = 6
        for level, cout in enumerate(POSE_CHANNELS, start=1):
            self._conv_param(f'enc{level}', cin, cout, 3, rng)
            cin = cout
        self.params['head.weight'] = Tensor(np.zeros((6, cin, 1, 1)), requires_grad=True, name='head.weight')
        self.params['head.bias'] = Tensor(np.zeros(6), requires_grad=True, name='head.bias')

    def pose_params(self, first: Tensor, second: Tensor) -> Tensor:
        if first.shape != second.shape:
            raise ShapeError('PoseNet', [first.shape, second.shape])
        x = ops.concat([first, second], axis=1)
        _check_image('PoseNet', x, 6)
        for level in range(1, len(POSE_CHANNELS) + 1):
            x = ops.relu(self.conv(f'enc{level}', x, stride=2))
        x = self.conv('head', x)
        return ops.mean(x, axis=(2, 3)) * POSE_SCALE

    def forward(self, *inputs: Tensor) -> PoseBatch:
        """Pose mapping camera-``first`` points into camera ``second``."""
        first, second = inputs
        return PoseBatch.from_params(self.pose_params(first, second))


def write_ssdf(stream: BinaryIO, arrays: Dict[str, FloatArray], metadata: Optional[Dict[str, Any]] = None) -> None:
    """Write arrays and metadata as an SSDF stream.

    All integers are little-endian u32. Layout::

        b'SSDF'  version  meta_len  meta[meta_len]
        count
        count x (name_len  name[name_len]  ndim  shape[ndim]  float64 data)

    ``meta`` is a UTF-8 JSON object serialised with sorted keys; ``{}`` when
    no metadata is given. Checkpoints store ``role``, ``epoch``,
    ``config_hash``, ``depth_min``, ``depth_max`` and ``has_pose`` there.
    Array names are UTF-8 and data is row-major ``<f8``.
    """
    meta = json.dumps(metadata or {}, sort_keys=True).encode('utf8')
    stream.write(SSDF_MAGIC)
    stream.write(struct.pack('<II', SSDF_VERSION, len(meta)))
    stream.write(meta)
    stream.write(struct.pack('<I', len(arrays)))
    for name, array in arrays.items():
        encoded = name.encode('utf8')
        data = np.ascontiguousarray(array, dtype='<f8')
        stream.write(struct.pack('<I', len(encoded)))
        stream.write(encoded)
        stream.write(struct.pack('<I', data.ndim))
        stream.write(struct.pack(f'<{data.ndim}I', *data.shape))
        stream.write(data.tobytes())


def _read_exact(stream: BinaryIO, size: int) -> bytes:
    chunk = stream.read(size)
    if len(chunk) != size:
        raise CheckpointError(f"truncated checkpoint: wanted {size} bytes, got {len(chunk)}")
    return chunk


def _read_u32(stream: BinaryIO, count: int = 1) -> Tuple[int, ...]:
    return struct.unpack(f'<{count}I', _read_exact(stream, 4 * count))


def read_ssdf(stream: BinaryIO) -> Tuple[Dict[str, FloatArray], Dict[str, Any]]:
    magic = stream.read(len(SSDF_MAGIC))
    if magic != SSDF_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    version, meta_len = _read_u32(stream, 2)
    if version != SSDF_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        metadata = json.loads(_read_exact(stream, meta_len).decode('utf8'))
    except ValueError as e:
        raise CheckpointError(f"bad metadata block: {e}")

    (count,) = _read_u32(stream)
    arrays: Dict[str, FloatArray] = {}
    for _ in range(count):
        (name_len,) = _read_u32(stream)
        name = _read_exact(stream, name_len).decode('utf8')
        (ndim,) = _read_u32(stream)
        shape = _read_u32(stream, ndim) if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(_read_exact(stream, 8 * size), dtype='<f8')
        arrays[name] = data.astype(np.float64).reshape(shape)
    if stream.read(1):
        raise CheckpointError('trailing bytes after last array')
    return arrays, metadata


def ssdf_bytes(arrays: Dict[str, FloatArray], metadata: Optional[Dict[str, Any]] = None) -> bytes:
    buffer = io.BytesIO()
    write_ssdf(buffer, arrays, metadata)
    return buffer.getvalue()


def prefixed(prefix: str, arrays: Dict[str, FloatArray]) -> Dict[str, FloatArray]:
    return {f'{prefix}/{name}': value for name, value in arrays.items()}


def unprefixed(prefix: str, arrays: Dict[str, FloatArray]) -> Dict[str, FloatArray]:
    start = f'{prefix}/'
    return {name[len(start):]: value for name, value in arrays.items() if name.startswith(start)}
