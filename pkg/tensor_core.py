"""Dense float tensors for the dCNN framework.

Tensors are plain ``numpy.ndarray`` objects, C-contiguous, float32 by
default, image batches laid out as [batch, channels, height, width]. This
module owns the shape rules, the seeded generator, matrix products with
64-bit accumulation and the TNSR binary format.

Random numbers come from numpy's PCG64 bit generator (PCG-XSL-RR 128/64,
O'Neill 2014). ``Generator(PCG64(seed))`` produces the same stream for the
same seed on every platform numpy supports; Gaussian draws use numpy's
ziggurat sampler on top of that stream.

TNSR layout, all little-endian::

    b"TNS1" | u32 rank | rank x u32 extents | count x f32 values (row-major)
"""

import logging
import struct
from typing import BinaryIO, Callable, Sequence, Tuple

import numpy as np

from errors import ArgumentError, FormatError, NumericError, ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Shape = Tuple[int, ...]

DTYPE = np.float32
ACCUM_DTYPE = np.float64

TNSR_MAGIC = b"TNS1"
_U64_LIMIT = 2 ** 64
_U32_LIMIT = 2 ** 32


# ==========================
# SHAPES
# ==========================
def validate_shape(dims: Sequence[int]) -> Shape:
    """Check extents and return the shape as a tuple"""
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise ShapeError("shape must have at least one extent")
    for axis, extent in enumerate(dims):
        if extent < 1:
            raise ShapeError(f"extent {extent} at axis {axis} is not positive")
    element_count(dims)
    return dims


def element_count(dims: Sequence[int]) -> int:
    """Product of extents, rejected when it does not fit a u64"""
    count = 1
    for extent in dims:
        count *= int(extent)
        if count >= _U64_LIMIT:
            raise ShapeError(f"element count of shape {tuple(dims)} overflows 64 bits")
    return count


def zeros(shape: Sequence[int], dtype=DTYPE) -> Tensor:
    return np.zeros(validate_shape(shape), dtype=dtype)


# ==========================
# RANDOMNESS
# ==========================
def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator"""
    seed = int(seed)
    if not 0 <= seed < _U64_LIMIT:
        raise ArgumentError(f"seed {seed} is not an unsigned 64-bit integer")
    return np.random.Generator(np.random.PCG64(seed))


def fill_normal(rng: np.random.Generator, shape: Sequence[int], mean: float = 0.0,
                stddev: float = 1.0, dtype=DTYPE) -> Tensor:
    """I.i.d. Gaussian samples drawn in row-major order"""
    if stddev < 0:
        raise ArgumentError(f"stddev must be non-negative, got {stddev}")
    shape = validate_shape(shape)
    draws = rng.standard_normal(element_count(shape), dtype=ACCUM_DTYPE)
    return (draws * stddev + mean).astype(dtype).reshape(shape)


# ==========================
# ARITHMETIC
# ==========================
def _result_dtype(*tensors):
    return np.result_type(*tensors)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[M,K] x [K,N] product accumulated in float64"""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.matmul(a.astype(ACCUM_DTYPE, copy=False), b.astype(ACCUM_DTYPE, copy=False))
    return out.astype(_result_dtype(a, b), copy=False)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked products over leading axes, accumulated in float64.

    Either operand may be 2-D and is then shared by every batch entry.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.astype(ACCUM_DTYPE, copy=False), b.astype(ACCUM_DTYPE, copy=False))
    return out.astype(_result_dtype(a, b), copy=False)


def map_elementwise(t: Tensor, f: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Apply a vectorised scalar function; the shape must survive"""
    out = np.asarray(f(t), dtype=t.dtype)
    if out.shape != t.shape:
        raise ShapeError(f"elementwise function changed shape {t.shape} -> {out.shape}")
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return a - b


def scale(t: Tensor, factor: float) -> Tensor:
    return (t * factor).astype(t.dtype, copy=False)


def audit_finite(t: Tensor, what: str = "tensor") -> Tensor:
    """Raise NumericError when any element is NaN or Inf"""
    if not np.all(np.isfinite(t)):
        bad = int(np.count_nonzero(~np.isfinite(t)))
        logger.debug(f"Audit failed for {what}: {bad} of {t.size} elements non-finite")
        raise NumericError(f"{what} contains {bad} non-finite value(s)")
    return t


# ==========================
# TNSR FORMAT
# ==========================
def _read_exact(fh: BinaryIO, size: int, field: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise FormatError(f"truncated TNSR data while reading {field}", field=field)
    return data


def write_tensor(fh: BinaryIO, t: Tensor):
    """Serialise one tensor in TNSR layout"""
    shape = validate_shape(t.shape)
    if any(extent >= _U32_LIMIT for extent in shape) or len(shape) >= _U32_LIMIT:
        raise ShapeError(f"shape {shape} does not fit TNSR u32 fields")
    fh.write(TNSR_MAGIC)
    fh.write(struct.pack("<I", len(shape)))
    fh.write(struct.pack(f"<{len(shape)}I", *shape))
    fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    """Read one TNSR tensor, always returned as float32"""
    magic = _read_exact(fh, 4, "magic")
    if magic != TNSR_MAGIC:
        raise FormatError(f"bad TNSR magic {magic!r}", field="magic")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
    if rank == 0:
        raise FormatError("TNSR rank is zero", field="rank")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "extents"))
    try:
        shape = validate_shape(dims)
    except ShapeError as e:
        raise FormatError(f"invalid TNSR extents {dims}: {e}", field="extents") from e
    count = element_count(shape)
    payload = _read_exact(fh, 4 * count, "data")
    return np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(shape)


def save_tensor(path, t: Tensor):
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        t = read_tensor(fh)
        if fh.read(1):
            raise FormatError(f"trailing bytes after tensor in {path}", field="data")
    return t
