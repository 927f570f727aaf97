# tensor.py
#
# Quantized and floating tensor types, per-tensor symmetric quantization and the
# QTSR binary tensor format.

import math
import struct
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from tspbert.constants import INT8_MAX, INT8_MIN
from tspbert.errors import NumericError, TensorFormatError

MAGIC = b"QTSR"
DTYPE_INT8 = 0
DTYPE_INT32 = 1
DTYPE_FP32 = 2

_DTYPES = {
    DTYPE_INT8: np.dtype("<i1"),
    DTYPE_INT32: np.dtype("<i4"),
    DTYPE_FP32: np.dtype("<f4"),
}
_PREFIX = struct.Struct("<4sBB2x")
_SCALE = struct.Struct("<f")


@dataclass(frozen=True)
class Shape:
    """
    Ordered tensor extents.

    `inner_axis` names the dimension that is normalized or reduced (the lane dimension
    when the tensor is cut into physical vectors). Tensors are stored row-major with the
    inner dimension last, so the default is -1.
    """

    dims: Tuple[int, ...]
    inner_axis: int = -1

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims:
            raise NumericError("shape must have at least one dimension")
        if any(d < 1 for d in dims):
            raise NumericError(f"all extents must be >= 1, got {dims}")
        if not -len(dims) <= self.inner_axis < len(dims):
            raise NumericError(f"inner axis {self.inner_axis} out of range for {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def inner(self) -> int:
        return self.dims[self.inner_axis]

    @property
    def outer(self) -> int:
        return self.size // self.inner

    @property
    def size(self) -> int:
        return math.prod(self.dims)

    @property
    def rank(self) -> int:
        return len(self.dims)


def _frozen(array, dtype):
    array = np.ascontiguousarray(array, dtype=dtype)
    array.setflags(write=False)
    return array


def _check_finite(data, what):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{what} contains non-finite elements")


def _check_scale(scale, what="scale"):
    scale = np.float32(scale)
    if not np.isfinite(scale) or scale <= 0:
        raise NumericError(f"{what} must be positive and finite, got {scale}")
    return scale


@dataclass(frozen=True)
class QuantTensor:
    """int8 elements with a positive per-tensor scale; zero-point is always 0."""

    data: np.ndarray
    scale: np.float32

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, np.int8))
        object.__setattr__(self, "scale", _check_scale(self.scale))

    @property
    def shape(self) -> Shape:
        return Shape(self.data.shape)


@dataclass(frozen=True)
class AccTensor:
    """
    int32 accumulator tensor. `scale` is the product of the scales of the two int8
    operands that produced it.
    """

    data: np.ndarray
    scale: np.float32

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.int32:
            data = to_int32(data)
        object.__setattr__(self, "data", _frozen(data, np.int32))
        object.__setattr__(self, "scale", _check_scale(self.scale))

    @property
    def shape(self) -> Shape:
        return Shape(self.data.shape)


@dataclass(frozen=True)
class FpTensor:
    """fp32 tensor; NaN and Inf are rejected."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data, np.float32)
        _check_finite(data, "fp32 tensor")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> Shape:
        return Shape(self.data.shape)


Tensor = Union[QuantTensor, AccTensor, FpTensor]


def to_int32(values) -> np.ndarray:
    """Narrow exact integer results to int32, raising on overflow."""
    values = np.asarray(values, dtype=np.int64)
    info = np.iinfo(np.int32)
    if values.size and (values.max() > info.max or values.min() < info.min):
        raise NumericError("int32 accumulator overflow")
    return values.astype(np.int32)


def quantize_array(x, scale) -> np.ndarray:
    """clamp(round_half_even(x / scale), -128, 127) on raw fp32 data."""
    x = np.asarray(x, dtype=np.float32)
    _check_finite(x, "quantize input")
    scale = _check_scale(scale)
    with np.errstate(over="ignore"):
        scaled = x / scale
    return np.clip(np.rint(scaled), INT8_MIN, INT8_MAX).astype(np.int8)


def quantize(x: FpTensor, scale) -> QuantTensor:
    return QuantTensor(quantize_array(x.data, scale), scale)


def dequantize(q: QuantTensor) -> FpTensor:
    return FpTensor(q.data.astype(np.float32) * q.scale)


def dequantize_acc(a: AccTensor, scale_product) -> FpTensor:
    """Single fp32 multiply after a round-to-nearest-even int32 to fp32 cast."""
    scale_product = _check_scale(scale_product, "scale product")
    return FpTensor(a.data.astype(np.float32) * scale_product)


def calibrate_scale(x: FpTensor) -> np.float32:
    """
    Smallest scale for which quantize never clamps `x`.

    Returns:
        np.float32: max(|x|) / 127, or 1.0 for an all-zero tensor.
    """
    data = np.asarray(x.data, dtype=np.float32)
    if data.size == 0:
        raise NumericError("cannot calibrate an empty tensor")
    _check_finite(data, "calibration input")
    peak = np.float32(np.max(np.abs(data)))
    if peak == 0:
        return np.float32(1.0)
    return np.float32(peak / np.float32(INT8_MAX))


def encode_tensor(tensor: Tensor) -> bytes:
    if isinstance(tensor, QuantTensor):
        tag = DTYPE_INT8
    elif isinstance(tensor, AccTensor):
        tag = DTYPE_INT32
    elif isinstance(tensor, FpTensor):
        tag = DTYPE_FP32
    else:
        raise TypeError(f"cannot encode {type(tensor).__name__}")

    data = tensor.data
    parts = [_PREFIX.pack(MAGIC, tag, data.ndim)]
    parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
    if tag == DTYPE_INT8:
        parts.append(_SCALE.pack(tensor.scale))
    parts.append(data.astype(_DTYPES[tag]).tobytes(order="C"))
    return b"".join(parts)


def decode_tensor(blob: bytes, acc_scale=1.0) -> Tensor:
    """
    Parse a QTSR byte string.

    int32 files carry no scale, so the caller supplies the accumulator scale.
    """
    if len(blob) < _PREFIX.size:
        raise TensorFormatError("truncated tensor header")
    magic, tag, rank = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if tag not in _DTYPES:
        raise TensorFormatError(f"unknown dtype tag {tag}")
    if rank < 1:
        raise TensorFormatError("tensor rank must be >= 1")
    offset = _PREFIX.size
    if len(blob) < offset + 4 * rank:
        raise TensorFormatError("truncated tensor extents")
    dims = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank

    scale = None
    if tag == DTYPE_INT8:
        if len(blob) < offset + _SCALE.size:
            raise TensorFormatError("truncated tensor scale")
        (scale,) = _SCALE.unpack_from(blob, offset)
        offset += _SCALE.size

    dtype = _DTYPES[tag]
    count = math.prod(dims)
    if len(blob) != offset + count * dtype.itemsize:
        raise TensorFormatError(
            f"expected {count} elements of {dtype.name}, got {len(blob) - offset} bytes"
        )
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(dims)

    try:
        if tag == DTYPE_INT8:
            return QuantTensor(data, scale)
        if tag == DTYPE_INT32:
            return AccTensor(data, acc_scale)
        return FpTensor(data)
    except NumericError as e:
        raise TensorFormatError(str(e)) from e


def save_tensor(path, tensor: Tensor):
    with open(path, "wb") as f:
        f.write(encode_tensor(tensor))


def load_tensor(path, acc_scale=1.0) -> Tensor:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise TensorFormatError(f"cannot read tensor file {path}: {e}") from e
    return decode_tensor(blob, acc_scale=acc_scale)
