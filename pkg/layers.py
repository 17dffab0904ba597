"""Forward and backward passes for the layer kinds of the dCNN.

Convolution is cross-correlation (no kernel flip) lowered to a matrix
product over unrolled input patches (im2col). ``conv_forward_direct`` keeps
the plain loop formulation as a reference for tests.

Every function preserves the floating dtype of its operands, so the same
code runs in float32 for training and float64 for gradient checks.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import num_threads
from errors import ArgumentError, NumericError, ShapeError, StateError
from tensor_core import (
    ACCUM_DTYPE,
    Tensor,
    batched_matmul,
    map_elementwise,
    matmul,
)

logger = logging.getLogger(__name__)

# Upper bound for one chunk of unrolled patches, in bytes of float64.
IM2COL_CHUNK_BYTES = 64 * 1024 * 1024


# ==========================
# LAYER TYPES
# ==========================
@dataclass
class ConvLayer:
    weights: Tensor  # [out_ch, in_ch, kh, kw]
    bias: Tensor  # [out_ch]
    stride: int = 1
    padding: int = 0

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_hw(self) -> Tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def output_hw(self, height: int, width: int) -> Tuple[int, int]:
        kh, kw = self.kernel_hw
        return (conv_output_extent(height, kh, self.stride, self.padding),
                conv_output_extent(width, kw, self.stride, self.padding))


@dataclass
class PoolLayer:
    window: int = 2
    stride: int = 2

    def __post_init__(self):
        if self.window < 1 or self.window != self.stride:
            raise ArgumentError(
                f"max pooling needs window == stride >= 1, got {self.window}/{self.stride}"
            )

    def output_hw(self, height: int, width: int) -> Tuple[int, int]:
        return (pool_output_extent(height, self.window, self.stride),
                pool_output_extent(width, self.window, self.stride))


@dataclass
class PoolCache:
    """Winning flat input index for every pooled output element"""
    input_shape: Tuple[int, ...]
    winners: np.ndarray  # int64, shape of the pooled output


@dataclass
class DenseLayer:
    weights: Tensor  # [out_dim, in_dim]
    bias: Tensor  # [out_dim]


@dataclass
class LayerGrads:
    d_weights: Optional[Tensor] = None
    d_bias: Optional[Tensor] = None
    d_input: Optional[Tensor] = None


def conv_output_extent(extent: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    """Valid-convolution output extent; the stride must divide exactly"""
    span = extent + 2 * padding - kernel
    if kernel < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"invalid convolution geometry kernel={kernel} stride={stride} padding={padding}")
    if span < 0:
        raise ShapeError(f"kernel {kernel} exceeds padded extent {extent + 2 * padding}")
    if span % stride:
        raise ShapeError(f"stride {stride} does not divide {span} for extent {extent}, kernel {kernel}")
    return span // stride + 1


def pool_output_extent(extent: int, window: int = 2, stride: int = 2) -> int:
    """Floor semantics: a trailing partial window is dropped"""
    if extent < window:
        raise ShapeError(f"extent {extent} is smaller than the pooling window {window}")
    return (extent - window) // stride + 1


# ==========================
# PARALLEL HELPERS
# ==========================
def _chunks(total: int, per_sample_bytes: int) -> List[Tuple[int, int]]:
    size = max(1, IM2COL_CHUNK_BYTES // max(1, per_sample_bytes))
    return [(start, min(start + size, total)) for start in range(0, total, size)]


def _map_chunks(fn: Callable[[int, int], object], chunks: List[Tuple[int, int]]) -> list:
    """Run fn over sample ranges; results come back in chunk order"""
    workers = min(num_threads(), len(chunks))
    if workers <= 1:
        return [fn(start, stop) for start, stop in chunks]
    logger.debug(f"Running {len(chunks)} chunk(s) on {workers} worker(s)")
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(lambda bounds: fn(*bounds), chunks))


# ==========================
# CONVOLUTION
# ==========================
def _pad(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def im2col(x: Tensor, kh: int, kw: int, stride: int = 1) -> Tensor:
    """Unroll [N,C,H,W] into [N, C*kh*kw, Ho*Wo] patch columns.

    Rows are ordered (channel, kernel row, kernel column) to match
    ``weights.reshape(out_ch, -1)``.
    """
    n, c = x.shape[:2]
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    return windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, out_h * out_w)


def col2im(cols: Tensor, channels: int, height: int, width: int,
           kh: int, kw: int, stride: int = 1) -> Tensor:
    """Scatter-add patch columns back onto a [N,C,H,W] image (im2col adjoint)"""
    n = cols.shape[0]
    out_h = (height - kh) // stride + 1
    out_w = (width - kw) // stride + 1
    patches = cols.reshape(n, channels, kh, kw, out_h, out_w)
    image = np.zeros((n, channels, height, width), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            image[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += patches[:, :, i, j]
    return image


def _check_conv_input(layer: ConvLayer, x: Tensor):
    if x.ndim != 4:
        raise ShapeError(f"convolution expects [N,C,H,W] input, got shape {x.shape}")
    if x.shape[1] != layer.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, layer expects {layer.in_channels}")
    return layer.output_hw(x.shape[2], x.shape[3])


def conv_forward(layer: ConvLayer, x: Tensor) -> Tensor:
    out_h, out_w = _check_conv_input(layer, x)
    kh, kw = layer.kernel_hw
    n = x.shape[0]
    dtype = np.result_type(x, layer.weights)
    kernel_matrix = layer.weights.reshape(layer.out_channels, -1)
    bias = layer.bias.reshape(1, -1, 1)
    padded = _pad(x, layer.padding)
    out = np.empty((n, layer.out_channels, out_h, out_w), dtype=dtype)
    per_sample = kernel_matrix.shape[1] * out_h * out_w * 8

    def run(start, stop):
        cols = im2col(padded[start:stop], kh, kw, layer.stride)
        result = batched_matmul(kernel_matrix, cols) + bias
        out[start:stop] = result.reshape(stop - start, layer.out_channels, out_h, out_w)

    _map_chunks(run, _chunks(n, per_sample))
    return out


def conv_forward_direct(layer: ConvLayer, x: Tensor) -> Tensor:
    """Loop-form reference convolution, float64 accumulation"""
    out_h, out_w = _check_conv_input(layer, x)
    kh, kw = layer.kernel_hw
    s = layer.stride
    padded = _pad(x, layer.padding).astype(ACCUM_DTYPE)
    weights = layer.weights.astype(ACCUM_DTYPE)
    out = np.zeros((x.shape[0], layer.out_channels, out_h, out_w), dtype=ACCUM_DTYPE)
    for n in range(x.shape[0]):
        for co in range(layer.out_channels):
            acc = np.full((out_h, out_w), float(layer.bias[co]), dtype=ACCUM_DTYPE)
            for ci in range(layer.in_channels):
                for i in range(kh):
                    for j in range(kw):
                        acc += weights[co, ci, i, j] * padded[n, ci, i:i + s * out_h:s, j:j + s * out_w:s]
            out[n, co] = acc
    return out.astype(np.result_type(x, layer.weights))


def conv_backward(layer: ConvLayer, x: Tensor, d_output: Tensor,
                  input_grad: bool = True) -> LayerGrads:
    """Exact gradients of sum(d_output * conv_forward(layer, x)).

    ``input_grad=False`` skips d_input (the first layer never needs it).
    """
    out_h, out_w = _check_conv_input(layer, x)
    n = x.shape[0]
    expected = (n, layer.out_channels, out_h, out_w)
    if d_output.shape != expected:
        raise ShapeError(f"d_output shape {d_output.shape} does not match forward output {expected}")
    kh, kw = layer.kernel_hw
    dtype = np.result_type(x, layer.weights, d_output)
    kernel_matrix = layer.weights.reshape(layer.out_channels, -1)
    padded = _pad(x, layer.padding)
    padded_h, padded_w = padded.shape[2], padded.shape[3]
    d_padded = np.empty(padded.shape, dtype=dtype) if input_grad else None
    grads_flat = d_output.reshape(n, layer.out_channels, out_h * out_w)
    per_sample = kernel_matrix.shape[1] * out_h * out_w * 8

    def run(start, stop):
        cols = im2col(padded[start:stop], kh, kw, layer.stride).astype(ACCUM_DTYPE)
        g = grads_flat[start:stop].astype(ACCUM_DTYPE)
        d_kernel = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
        if input_grad:
            d_cols = batched_matmul(kernel_matrix.T.astype(ACCUM_DTYPE), g)
            d_padded[start:stop] = col2im(d_cols, layer.in_channels, padded_h, padded_w,
                                          kh, kw, layer.stride)
        return d_kernel

    partials = _map_chunks(run, _chunks(n, per_sample))
    d_kernel = partials[0]
    for partial in partials[1:]:
        d_kernel = d_kernel + partial

    d_input = None
    if input_grad:
        p = layer.padding
        d_input = np.ascontiguousarray(d_padded[:, :, p:p + x.shape[2], p:p + x.shape[3]])
    return LayerGrads(
        d_weights=d_kernel.reshape(layer.weights.shape).astype(dtype),
        d_bias=d_output.sum(axis=(0, 2, 3), dtype=ACCUM_DTYPE).astype(dtype),
        d_input=d_input,
    )


# ==========================
# MAX POOLING
# ==========================
def maxpool_forward(layer: PoolLayer, x: Tensor) -> Tuple[Tensor, PoolCache]:
    if x.ndim != 4:
        raise ShapeError(f"max pooling expects [N,C,H,W] input, got shape {x.shape}")
    n, c, h, w = x.shape
    out_h, out_w = layer.output_hw(h, w)
    k = layer.window
    cropped = x[:, :, :out_h * k, :out_w * k]
    windows = cropped.reshape(n, c, out_h, k, out_w, k).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, out_h, out_w, k * k)
    # argmax returns the first maximum, i.e. the row-major first winner
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    rows = np.arange(out_h).reshape(1, 1, out_h, 1) * k + arg // k
    cols = np.arange(out_w).reshape(1, 1, 1, out_w) * k + arg % k
    planes = np.arange(n * c).reshape(n, c, 1, 1)
    winners = (planes * h + rows) * w + cols
    return np.ascontiguousarray(out), PoolCache(input_shape=x.shape, winners=winners.astype(np.int64))


def maxpool_backward(cache: PoolCache, d_output: Tensor) -> Tensor:
    """Route d_output to the winners recorded in ``cache``.

    Only the shapes are checked: a same-shaped cache from another forward
    pass is accepted and its winners are used. Network pairs caches with
    their forward pass through versioned ForwardTrace objects.
    """
    if cache is None or d_output.shape != cache.winners.shape:
        found = None if cache is None else cache.winners.shape
        raise StateError(f"pool cache shape {found} does not match d_output {d_output.shape}")
    d_input = np.zeros(int(np.prod(cache.input_shape)), dtype=d_output.dtype)
    d_input[cache.winners.ravel()] = d_output.ravel()
    return d_input.reshape(cache.input_shape)


# ==========================
# ACTIVATIONS
# ==========================
def relu_forward(x: Tensor) -> Tensor:
    return map_elementwise(x, lambda v: np.maximum(v, 0))


def relu_backward(x: Tensor, d_output: Tensor) -> Tensor:
    if x.shape != d_output.shape:
        raise ShapeError(f"relu_backward shapes differ {x.shape} vs {d_output.shape}")
    return np.where(x > 0, d_output, 0).astype(d_output.dtype, copy=False)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction"""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax expects [N,K] with K >= 2, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("softmax received non-finite logits")
    shifted = logits.astype(ACCUM_DTYPE) - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return (exp / exp.sum(axis=1, keepdims=True)).astype(logits.dtype)


# ==========================
# DENSE
# ==========================
def _check_dense_input(layer: DenseLayer, x: Tensor):
    if x.ndim != 2 or x.shape[1] != layer.weights.shape[1]:
        raise ShapeError(f"dense layer expects [N,{layer.weights.shape[1]}] input, got {x.shape}")


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    _check_dense_input(layer, x)
    return matmul(x, layer.weights.T) + layer.bias


def dense_backward(layer: DenseLayer, x: Tensor, d_output: Tensor) -> LayerGrads:
    _check_dense_input(layer, x)
    if d_output.shape != (x.shape[0], layer.weights.shape[0]):
        raise ShapeError(f"d_output shape {d_output.shape} does not match dense output")
    return LayerGrads(
        d_weights=matmul(d_output.T, x),
        d_bias=d_output.sum(axis=0, dtype=ACCUM_DTYPE).astype(d_output.dtype),
        d_input=matmul(d_output, layer.weights),
    )
