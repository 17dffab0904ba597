"""dCNN assembly: conv+ReLU[+pool] stages, flatten, dense layers, softmax.

Default architecture (valid convolutions, stride 1)::

    1x120x120 -conv11-> 50x110x110 -pool-> 50x55x55 -conv5-> 120x51x51
    -pool-> 120x25x25 -conv3-> 120x23x23 -flatten-> 63480 -fc-> 10 -fc-> 2

Checkpoint layout (little-endian)::

    b"DCN1" | u32 version | u32 config length | config (UTF-8 key=value lines)
    then per parameter: u16 name length | name | TNSR tensor

Velocity buffers are not stored; a loaded network starts with zero momentum.
"""

import io
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from errors import ConfigError, FormatError, ShapeError, StateError
from layers import (
    ConvLayer,
    DenseLayer,
    PoolCache,
    PoolLayer,
    conv_backward,
    conv_forward,
    conv_output_extent,
    dense_backward,
    dense_forward,
    maxpool_backward,
    maxpool_forward,
    pool_output_extent,
    relu_backward,
    relu_forward,
    softmax,
)
from tensor_core import DTYPE, Tensor, fill_normal, read_tensor, write_tensor, zeros

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DCN1"
CHECKPOINT_VERSION = 1

GradientSet = Dict[str, Tensor]


# ==========================
# CONFIG
# ==========================
def _parse_int_list(text: str) -> Tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _parse_pair(text: str) -> Tuple[int, int]:
    left, sep, right = text.strip().lower().partition("x")
    if not sep:
        raise ValueError(f"expected AxB, got {text!r}")
    return int(left), int(right)


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture description.

    ``pool_after`` holds 1-based conv positions: {1, 2} pools after the
    first and second convolution. Empty ``conv_strides``/``conv_paddings``
    mean stride 1 / padding 0 everywhere; a single value applies to all.
    """
    input_hw: Tuple[int, int] = (120, 120)
    conv_specs: Tuple[Tuple[int, int], ...] = ((50, 11), (120, 5), (120, 3))
    pool_after: Tuple[int, ...] = (1, 2)
    fc_dims: Tuple[int, ...] = (10, 2)
    conv_strides: Tuple[int, ...] = ()
    conv_paddings: Tuple[int, ...] = ()
    in_channels: int = 1

    def _per_conv(self, values: Tuple[int, ...], default: int, name: str) -> Tuple[int, ...]:
        if not values:
            return (default,) * len(self.conv_specs)
        if len(values) == 1:
            return values * len(self.conv_specs)
        if len(values) != len(self.conv_specs):
            raise ConfigError(f"{name} has {len(values)} entries for {len(self.conv_specs)} convolutions")
        return values

    @property
    def strides(self) -> Tuple[int, ...]:
        return self._per_conv(self.conv_strides, 1, "conv_strides")

    @property
    def paddings(self) -> Tuple[int, ...]:
        return self._per_conv(self.conv_paddings, 0, "conv_paddings")

    def shape_trace(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Propagate shapes through the stack, raising ConfigError on the first bad layer"""
        if not self.conv_specs:
            raise ConfigError("at least one convolution is required")
        if not self.fc_dims or self.fc_dims[-1] != 2:
            raise ConfigError(f"final fully connected width must be 2, got fc_dims={self.fc_dims}")
        for position in self.pool_after:
            if not 1 <= position <= len(self.conv_specs):
                raise ConfigError(f"pool_after entry {position} names no convolution")

        channels = self.in_channels
        height, width = self.input_hw
        if channels < 1 or height < 1 or width < 1:
            raise ConfigError(f"invalid input shape {(channels, height, width)}")
        trace = [("input", (channels, height, width))]
        pool = PoolLayer()
        for index, ((out_ch, kernel), stride, padding) in enumerate(
                zip(self.conv_specs, self.strides, self.paddings)):
            if out_ch < 1 or kernel < 1:
                raise ConfigError(f"conv{index}: channels and kernel must be positive", layer_index=index)
            try:
                height = conv_output_extent(height, kernel, stride, padding)
                width = conv_output_extent(width, kernel, stride, padding)
            except ShapeError as e:
                raise ConfigError(f"conv{index}: {e}", layer_index=index) from e
            channels = out_ch
            trace.append((f"conv{index}", (channels, height, width)))
            if index + 1 in self.pool_after:
                try:
                    height, width = pool.output_hw(height, width)
                except ShapeError as e:
                    raise ConfigError(f"pool after conv{index}: {e}", layer_index=index) from e
                trace.append((f"pool{index}", (channels, height, width)))
        features = channels * height * width
        trace.append(("flatten", (features,)))
        for index, dim in enumerate(self.fc_dims):
            if dim < 1:
                raise ConfigError(f"fc{index}: width must be positive", layer_index=len(self.conv_specs) + index)
            trace.append((f"fc{index}", (dim,)))
        trace.append(("softmax", (self.fc_dims[-1],)))
        return trace

    def validate(self) -> "NetworkConfig":
        self.shape_trace()
        return self

    @property
    def flat_features(self) -> int:
        return dict(self.shape_trace())["flatten"][0]

    # ---------------------------
    # key=value form
    # ---------------------------
    def to_mapping(self) -> Dict[str, str]:
        return {
            "input_hw": f"{self.input_hw[0]}x{self.input_hw[1]}",
            "in_channels": str(self.in_channels),
            "conv_specs": ",".join(f"{c}x{k}" for c, k in self.conv_specs),
            "conv_strides": ",".join(str(s) for s in self.strides),
            "conv_paddings": ",".join(str(p) for p in self.paddings),
            "pool_after": ",".join(str(p) for p in sorted(self.pool_after)),
            "fc_dims": ",".join(str(d) for d in self.fc_dims),
        }

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base: Optional["NetworkConfig"] = None) -> "NetworkConfig":
        base = base or cls()
        parsers = {
            "input_hw": _parse_pair,
            "in_channels": int,
            "conv_specs": lambda text: tuple(_parse_pair(p) for p in text.split(",") if p.strip()),
            "conv_strides": _parse_int_list,
            "conv_paddings": _parse_int_list,
            "pool_after": _parse_int_list,
            "fc_dims": _parse_int_list,
        }
        updates = {}
        for key, raw in values.items():
            if key not in parsers:
                raise ConfigError(f"unknown network key {key!r}")
            try:
                updates[key] = parsers[key](str(raw))
            except ValueError as e:
                raise ConfigError(f"network.{key}: cannot parse {raw!r} ({e})") from e
        return replace(base, **updates)

    def to_text(self) -> str:
        return "".join(f"{key}={value}\n" for key, value in self.to_mapping().items())

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"config line {line!r} is not key=value")
            values[key.strip()] = value.strip()
        return cls.from_mapping(values)


# ==========================
# NETWORK
# ==========================
@dataclass
class ForwardTrace:
    """Intermediates retained by forward for backward"""
    version: int
    conv_inputs: List[Tensor] = field(default_factory=list)
    conv_preacts: List[Tensor] = field(default_factory=list)
    pool_caches: List[Optional[PoolCache]] = field(default_factory=list)
    flat_shape: Tuple[int, ...] = ()
    fc_inputs: List[Tensor] = field(default_factory=list)
    fc_preacts: List[Tensor] = field(default_factory=list)
    logits: Optional[Tensor] = None


class Network:
    def __init__(self, config: NetworkConfig, params: Dict[str, Tensor]):
        self.config = config.validate()
        self.params = params
        self.velocities = {name: np.zeros_like(p) for name, p in params.items()}
        self.version = 0
        self._pool = PoolLayer()

    @staticmethod
    def parameter_shapes(config: NetworkConfig) -> Dict[str, Tuple[int, ...]]:
        """Ordered parameter names and shapes for a config"""
        shapes = {}
        in_ch = config.in_channels
        for index, (out_ch, kernel) in enumerate(config.conv_specs):
            shapes[f"conv{index}.weight"] = (out_ch, in_ch, kernel, kernel)
            shapes[f"conv{index}.bias"] = (out_ch,)
            in_ch = out_ch
        in_dim = config.flat_features
        for index, dim in enumerate(config.fc_dims):
            shapes[f"fc{index}.weight"] = (dim, in_dim)
            shapes[f"fc{index}.bias"] = (dim,)
            in_dim = dim
        return shapes

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def mark_updated(self):
        """Invalidate traces taken before a parameter change"""
        self.version += 1

    def copy(self) -> "Network":
        clone = Network(self.config, {name: p.copy() for name, p in self.params.items()})
        clone.velocities = {name: v.copy() for name, v in self.velocities.items()}
        return clone

    def astype(self, dtype) -> "Network":
        clone = Network(self.config, {name: p.astype(dtype) for name, p in self.params.items()})
        clone.velocities = {name: v.astype(dtype) for name, v in self.velocities.items()}
        return clone

    def conv_layer(self, index: int) -> ConvLayer:
        return ConvLayer(
            weights=self.params[f"conv{index}.weight"],
            bias=self.params[f"conv{index}.bias"],
            stride=self.config.strides[index],
            padding=self.config.paddings[index],
        )

    def dense_layer(self, index: int) -> DenseLayer:
        return DenseLayer(weights=self.params[f"fc{index}.weight"], bias=self.params[f"fc{index}.bias"])

    # ---------------------------
    # Forward
    # ---------------------------
    def forward(self, batch: Tensor) -> Tuple[Tensor, ForwardTrace]:
        """Class probabilities [N,2] plus the trace needed by backward"""
        cfg = self.config
        expected = (cfg.in_channels, *cfg.input_hw)
        if batch.ndim != 4 or batch.shape[1:] != expected:
            raise ShapeError(f"batch shape {batch.shape} does not match network input [N,{expected}]")
        trace = ForwardTrace(version=self.version)
        x = batch.astype(self.dtype, copy=False)
        for index in range(len(cfg.conv_specs)):
            trace.conv_inputs.append(x)
            pre = conv_forward(self.conv_layer(index), x)
            trace.conv_preacts.append(pre)
            x = relu_forward(pre)
            cache = None
            if index + 1 in cfg.pool_after:
                x, cache = maxpool_forward(self._pool, x)
            trace.pool_caches.append(cache)
        trace.flat_shape = x.shape
        x = x.reshape(x.shape[0], -1)
        last = len(cfg.fc_dims) - 1
        for index in range(len(cfg.fc_dims)):
            trace.fc_inputs.append(x)
            pre = dense_forward(self.dense_layer(index), x)
            trace.fc_preacts.append(pre)
            x = relu_forward(pre) if index < last else pre
        trace.logits = x
        return softmax(x), trace

    def predict_proba(self, batch: Tensor) -> Tensor:
        return self.forward(batch)[0]

    # ---------------------------
    # Backward
    # ---------------------------
    def backward(self, trace: ForwardTrace, d_logits: Tensor) -> GradientSet:
        """Gradients of every parameter given dLoss/dlogits"""
        if trace is None or trace.logits is None or trace.version != self.version:
            raise StateError("forward trace is stale: the network changed after it was taken")
        if d_logits.shape != trace.logits.shape:
            raise ShapeError(f"d_logits shape {d_logits.shape} does not match logits {trace.logits.shape}")
        grads: GradientSet = {}
        d = d_logits.astype(self.dtype, copy=False)
        last = len(self.config.fc_dims) - 1
        for index in range(last, -1, -1):
            if index < last:
                d = relu_backward(trace.fc_preacts[index], d)
            g = dense_backward(self.dense_layer(index), trace.fc_inputs[index], d)
            grads[f"fc{index}.weight"] = g.d_weights
            grads[f"fc{index}.bias"] = g.d_bias
            d = g.d_input
        d = d.reshape(trace.flat_shape)
        for index in range(len(self.config.conv_specs) - 1, -1, -1):
            cache = trace.pool_caches[index]
            if cache is not None:
                d = maxpool_backward(cache, d)
            d = relu_backward(trace.conv_preacts[index], d)
            g = conv_backward(self.conv_layer(index), trace.conv_inputs[index], d,
                              input_grad=index > 0)
            grads[f"conv{index}.weight"] = g.d_weights
            grads[f"conv{index}.bias"] = g.d_bias
            d = g.d_input
        return {name: grads[name] for name in self.params}


def build(config: NetworkConfig, rng: np.random.Generator, dtype=DTYPE) -> Network:
    """He-initialised weights, zero biases, zero velocities"""
    config.validate()
    params = {}
    for name, shape in Network.parameter_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = fill_normal(rng, shape, 0.0, math.sqrt(2.0 / fan_in), dtype=dtype)
    net = Network(config, params)
    logger.info(f"✅ Built network with {net.parameter_count()} parameters")
    return net


# ==========================
# CHECKPOINTS
# ==========================
def save_checkpoint(net: Network, path):
    """Write atomically: a temp file in the target directory is renamed into place"""
    buffer = io.BytesIO()
    config_bytes = net.config.to_text().encode("utf-8")
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(struct.pack("<II", CHECKPOINT_VERSION, len(config_bytes)))
    buffer.write(config_bytes)
    for name, tensor in net.params.items():
        encoded = name.encode("utf-8")
        buffer.write(struct.pack("<H", len(encoded)))
        buffer.write(encoded)
        write_tensor(buffer, tensor)

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buffer.getvalue())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    logger.info(f"💾 Saved checkpoint {path}")


def _unpack(fh, fmt: str, field: str):
    size = struct.calcsize(fmt)
    data = fh.read(size)
    if len(data) != size:
        raise FormatError(f"checkpoint truncated while reading {field}", field=field)
    return struct.unpack(fmt, data)


def _shape_mismatches(expected: Dict[str, Tuple[int, ...]], found: Dict[str, Tuple[int, ...]]) -> List[str]:
    problems = []
    for name in expected.keys() | found.keys():
        want, got = expected.get(name), found.get(name)
        if want != got:
            problems.append(f"{name}: expected {want}, found {got}")
    return sorted(problems)


def load_checkpoint(path, expected_config: Optional[NetworkConfig] = None) -> Network:
    """Read a DCN1 checkpoint; nothing is returned unless the whole file is valid"""
    with open(path, "rb") as fh:
        fh = io.BytesIO(fh.read())

    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}", field="magic")
    (version,) = _unpack(fh, "<I", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", field="version")
    (config_len,) = _unpack(fh, "<I", "config length")
    config_bytes = fh.read(config_len)
    if len(config_bytes) != config_len:
        raise FormatError(f"{path}: checkpoint truncated in config block", field="config")
    try:
        config = NetworkConfig.from_text(config_bytes.decode("utf-8")).validate()
    except (UnicodeDecodeError, ConfigError) as e:
        raise FormatError(f"{path}: invalid config block ({e})", field="config") from e

    params = {}
    while True:
        head = fh.read(2)
        if not head:
            break
        if len(head) != 2:
            raise FormatError(f"{path}: checkpoint truncated in record header", field="name length")
        (name_len,) = struct.unpack("<H", head)
        name_bytes = fh.read(name_len)
        if len(name_bytes) != name_len:
            raise FormatError(f"{path}: checkpoint truncated in parameter name", field="name")
        name = name_bytes.decode("utf-8", errors="replace")
        if name in params:
            raise FormatError(f"{path}: duplicate parameter {name}", field="name")
        try:
            params[name] = read_tensor(fh)
        except FormatError as e:
            raise FormatError(f"{path}: parameter {name}: {e}", field=e.field) from e

    expected_shapes = Network.parameter_shapes(config)
    found_shapes = {name: t.shape for name, t in params.items()}
    problems = _shape_mismatches(expected_shapes, found_shapes)
    if problems:
        raise FormatError(f"{path}: parameters do not match embedded config: " + "; ".join(problems),
                          field="parameters")
    if expected_config is not None and expected_config.to_mapping() != config.to_mapping():
        problems = _shape_mismatches(Network.parameter_shapes(expected_config), found_shapes)
        detail = "; ".join(problems) if problems else "architectures differ"
        raise FormatError(f"{path}: checkpoint does not match the requested network: {detail} "
                          f"(expected {expected_config.to_mapping()}, found {config.to_mapping()})",
                          field="config")
    return Network(config, {name: params[name] for name in expected_shapes})
