# kernels.py
#
# Scalar arithmetic shared by the reference model and the simulator. Both sides call
# these functions, so their results agree bit for bit. All fp32 reductions are
# sequential running sums in ascending index order along the last axis.

import numpy as np

from tspbert.constants import GELU_CUBIC, GELU_SQRT_2_OVER_PI
from tspbert.errors import NumericError
from tspbert.tensor import quantize_array, to_int32

F32 = np.float32


def _f32(x):
    return np.asarray(x, dtype=np.float32)


def _finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} produced non-finite values")
    return x


def running_sum(x):
    """Sequential sum over the last axis, x[..., 0] + x[..., 1] + ..."""
    x = _f32(x)
    if x.shape[-1] == 0:
        raise NumericError("reduction over an empty axis")
    return np.cumsum(x, axis=-1, dtype=np.float32)[..., -1]


def running_max(x):
    x = _f32(x)
    if x.shape[-1] == 0:
        raise NumericError("reduction over an empty axis")
    return np.maximum.accumulate(x, axis=-1)[..., -1]


def macc(a, w):
    """
    Exact int8 x int8 product with int64 accumulation. Computed in float64, which is
    exact while the inner dimension stays below 2**38.
    """
    a = np.asarray(a)
    if a.shape[-1] >= 2**38:
        raise NumericError("inner dimension too large for exact accumulation")
    product = a.astype(np.float64) @ np.asarray(w).astype(np.float64)
    return product.astype(np.int64)


def gemm_int(a, w, bias=None):
    """int8 GEMM with optional int32 bias, narrowed to int32."""
    a = np.asarray(a)
    w = np.asarray(w)
    if a.shape[-1] != w.shape[-2]:
        raise NumericError(f"inner dimensions differ: {a.shape} @ {w.shape}")
    acc = macc(a, w)
    if bias is not None:
        acc = acc + np.asarray(bias, dtype=np.int64)
    return to_int32(acc)


def dequant(values, scale):
    """int8 or int32 to fp32: one cast, one multiply."""
    return np.asarray(values).astype(np.float32) * F32(scale)


def requant(acc, in_scale, out_scale):
    return quantize_array(dequant(acc, in_scale), out_scale)


def gelu(x):
    """0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3))), evaluated left to right."""
    x = _f32(x)
    t = x + F32(GELU_CUBIC) * x * x * x
    u = np.tanh(F32(GELU_SQRT_2_OVER_PI) * t)
    return _finite(F32(0.5) * x * (F32(1.0) + u), "gelu")


def gelu_chain(acc, in_scale, out_scale):
    """Dequantize, GELU, requantize: the fused VXM chain behind a GEMM."""
    return quantize_array(gelu(dequant(acc, in_scale)), out_scale)


def ln_pass1(acc, acc_scale, residual):
    """Dequantize the GEMM result, add the residual and keep a running row sum."""
    z = _finite(dequant(acc, acc_scale) + _f32(residual), "layernorm input")
    return z, running_sum(z)


def ln_mean(sums, count):
    return _f32(sums) * F32(1.0 / count)


def ln_pass2(z, mean, gamma):
    """Returns gamma * (z - mean) and the running sum of (z - mean)^2."""
    centered = _f32(z) - _f32(mean)[..., None]
    return _f32(gamma) * centered, running_sum(centered * centered)


def ln_rstd(square_sums, count, eps):
    var = _f32(square_sums) * F32(1.0 / count) + F32(eps)
    with np.errstate(divide="ignore"):
        return F32(1.0) / np.sqrt(var)


def ln_pass3(scaled, rstd, beta, out_scale):
    """Normalize, shift, then requantize. The fp32 and int8 results are both consumed."""
    out = _finite(_f32(scaled) * _f32(rstd)[..., None] + _f32(beta), "layernorm")
    return out, quantize_array(out, out_scale)


def layernorm(z, gamma, beta, eps):
    z = _f32(z)
    count = z.shape[-1]
    if count == 0:
        raise NumericError("layernorm over an empty axis")
    mean = ln_mean(running_sum(z), count)
    scaled, square_sums = ln_pass2(z, mean, gamma)
    rstd = ln_rstd(square_sums, count, eps)
    return _finite(scaled * rstd[..., None] + _f32(beta), "layernorm")


def softmax_pass1(acc, scale):
    scores = _finite(dequant(acc, scale), "attention scores")
    return scores, running_max(scores)


def softmax_pass2(scores, row_max):
    """exp(x - max) is kept for reuse by the last pass."""
    e = np.exp(_f32(scores) - _f32(row_max)[..., None])
    return e, running_sum(e)


def softmax_recip(sums):
    return F32(1.0) / _f32(sums)


def softmax_pass3(e, recip, out_scale):
    p = _f32(e) * _f32(recip)[..., None]
    return p, quantize_array(p, out_scale)


def softmax(x):
    x = _f32(x)
    if x.shape[-1] == 0:
        raise NumericError("softmax over an empty row")
    e, sums = softmax_pass2(x, running_max(x))
    return _f32(e) * softmax_recip(sums)[..., None]


# Kernels the simulator can attach to an instruction, by name.
# Each takes positional input arrays plus keyword parameters and returns a tuple.
KERNELS = {
    "dequant": lambda x, scale: (dequant(x, scale),),
    "requant": lambda acc, in_scale, out_scale: (requant(acc, in_scale, out_scale),),
    "gelu_chain": lambda acc, in_scale, out_scale: (gelu_chain(acc, in_scale, out_scale),),
    "ln_pass1": ln_pass1,
    "ln_mean": lambda sums, count: (ln_mean(sums, count),),
    "ln_pass2": ln_pass2,
    "ln_rstd": lambda sq, count, eps: (ln_rstd(sq, count, eps),),
    "ln_pass3": ln_pass3,
    "softmax_pass1": softmax_pass1,
    "softmax_pass2": softmax_pass2,
    "softmax_recip": lambda sums: (softmax_recip(sums),),
    "softmax_pass3": softmax_pass3,
}
