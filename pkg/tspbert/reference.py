# reference.py
#
# Golden functional model of one encoder layer, both mixed precision (int8 GEMMs,
# fp32 nonlinears) and pure fp32. The mixed-precision model is the oracle the simulator
# is compared against at every value it produces.

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from tspbert import kernels
from tspbert.errors import ConfigError, NumericError
from tspbert.tensor import AccTensor, FpTensor, QuantTensor


@dataclass(frozen=True)
class ActivationScales:
    """Quantization scales at every int8 boundary of one layer."""

    x: float
    q: float
    k: float
    v: float
    p: float
    attn: float
    sa: float
    gelu: float
    out: float

    def __post_init__(self):
        for name, value in vars(self).items():
            value = np.float32(value)
            if not np.isfinite(value) or value <= 0:
                raise NumericError(f"scale {name} must be positive and finite, got {value}")
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class EncoderParams:
    """
    Weights, biases and normalization parameters of one encoder layer.

    Projection weights hold all heads side by side (head i owns columns
    i*head_size .. (i+1)*head_size). Biases are int32 at the scale of the GEMM they
    follow (input scale times weight scale).
    """

    heads: int
    head_size: int
    d_model: int
    d_ff: int
    w_q: QuantTensor
    w_k: QuantTensor
    w_v: QuantTensor
    w_o: QuantTensor
    w_1: QuantTensor
    w_2: QuantTensor
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    b_o: np.ndarray
    b_1: np.ndarray
    b_2: np.ndarray
    gamma1: np.ndarray
    beta1: np.ndarray
    gamma2: np.ndarray
    beta2: np.ndarray
    scales: ActivationScales
    eps: float = 1e-12

    def __post_init__(self):
        check_hyperparameters(self.heads, self.head_size, self.d_model, self.d_ff)
        if not self.eps > 0:
            raise ConfigError(f"layernorm eps must be > 0, got {self.eps}")
        dm, dff = self.d_model, self.d_ff
        expected = {
            "w_q": (dm, dm), "w_k": (dm, dm), "w_v": (dm, dm), "w_o": (dm, dm),
            "w_1": (dm, dff), "w_2": (dff, dm),
        }
        for name, dims in expected.items():
            if getattr(self, name).data.shape != dims:
                raise ConfigError(f"{name} has shape {getattr(self, name).data.shape}, expected {dims}")
        vectors = {
            "b_q": dm, "b_k": dm, "b_v": dm, "b_o": dm, "b_1": dff, "b_2": dm,
            "gamma1": dm, "beta1": dm, "gamma2": dm, "beta2": dm,
        }
        for name, n in vectors.items():
            value = np.asarray(getattr(self, name))
            if value.shape != (n,):
                raise ConfigError(f"{name} has shape {value.shape}, expected ({n},)")
            dtype = np.int32 if name.startswith("b_") else np.float32
            value = np.ascontiguousarray(value, dtype=dtype)
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "eps", np.float32(self.eps))

    @property
    def score_scale(self) -> np.float32:
        """Dequantization scale of Q K^T with the 1/sqrt(d_k) factor folded in."""
        return np.float32(
            np.float32(self.scales.q * self.scales.k) * np.float32(1.0 / np.sqrt(self.head_size))
        )


def check_hyperparameters(heads, head_size, d_model, d_ff, seq_len=1):
    if min(heads, head_size, d_model, d_ff) < 1:
        raise ConfigError("model dimensions must be >= 1")
    if d_model != heads * head_size:
        raise ConfigError(f"d_model ({d_model}) != heads * head_size ({heads} * {head_size})")
    if seq_len < 1:
        raise ConfigError(f"sequence length must be >= 1, got {seq_len}")


def _record(trace, **values):
    if trace is not None:
        trace.update(values)


def gemm_ref(a: QuantTensor, w: QuantTensor, bias=None) -> AccTensor:
    return AccTensor(kernels.gemm_int(a.data, w.data, bias), a.scale * w.scale)


def gelu_ref(x: FpTensor) -> FpTensor:
    return FpTensor(kernels.gelu(x.data))


def layernorm_ref(z: FpTensor, gamma, beta, eps) -> FpTensor:
    if z.data.shape[-1] == 0:
        raise NumericError("layernorm over an empty axis")
    return FpTensor(kernels.layernorm(z.data, gamma, beta, eps))


def softmax_ref(x: FpTensor) -> FpTensor:
    return FpTensor(kernels.softmax(x.data))


def split_heads(values, heads):
    """(S, heads * d) -> (heads, S, d)"""
    rows, width = values.shape
    return values.reshape(rows, heads, width // heads).transpose(1, 0, 2)


def batched_scores(q, k, heads):
    """int8 Q K^T for every head, (heads, S, S) int32."""
    qh, kh = split_heads(q, heads), split_heads(k, heads)
    return kernels.gemm_int(qh, kh.transpose(0, 2, 1))


def attention_values(p, v, heads):
    """int8 P V for every head, concatenated back to (S, heads * d) int32."""
    vh = split_heads(v, heads)
    out = kernels.gemm_int(p, vh)
    return np.ascontiguousarray(out.transpose(1, 0, 2).reshape(out.shape[1], -1))


def attention_heads(x: QuantTensor, p: EncoderParams, trace: Optional[Dict] = None) -> QuantTensor:
    """Quantized multi-head attention output before the output projection."""
    s = p.scales
    q_acc = kernels.gemm_int(x.data, p.w_q.data, p.b_q)
    k_acc = kernels.gemm_int(x.data, p.w_k.data, p.b_k)
    v_acc = kernels.gemm_int(x.data, p.w_v.data, p.b_v)
    q = kernels.requant(q_acc, x.scale * p.w_q.scale, s.q)
    k = kernels.requant(k_acc, x.scale * p.w_k.scale, s.k)
    v = kernels.requant(v_acc, x.scale * p.w_v.scale, s.v)

    s_acc = batched_scores(q, k, p.heads)
    scores, s_max = kernels.softmax_pass1(s_acc, p.score_scale)
    e, s_sum = kernels.softmax_pass2(scores, s_max)
    s_recip = kernels.softmax_recip(s_sum)
    p_f, probs = kernels.softmax_pass3(e, s_recip, s.p)

    attn_acc = attention_values(probs, v, p.heads)
    attn = kernels.requant(attn_acc, s.p * s.v, s.attn)
    _record(
        trace, q_acc=q_acc, k_acc=k_acc, v_acc=v_acc, q=q, k=k, v=v, s_acc=s_acc,
        scores=scores, s_max=s_max, e=e, s_sum=s_sum, s_recip=s_recip, p_f=p_f, p=probs,
        attn_acc=attn_acc, attn=attn,
    )
    return QuantTensor(attn, s.attn)


def _layernorm_block(prefix, acc, acc_scale, residual, gamma, beta, eps, out_scale, trace):
    """Three-pass layernorm on a GEMM result, mirroring the scheduled dataflow."""
    count = acc.shape[-1]
    z, sums = kernels.ln_pass1(acc, acc_scale, residual)
    mean = kernels.ln_mean(sums, count)
    scaled, sq = kernels.ln_pass2(z, mean, gamma)
    rstd = kernels.ln_rstd(sq, count, eps)
    out_f, out_q = kernels.ln_pass3(scaled, rstd, beta, out_scale)
    _record(
        trace,
        **{
            f"{prefix}_z": z, f"{prefix}_sum": sums, f"{prefix}_mean": mean,
            f"{prefix}_gz": scaled, f"{prefix}_sq": sq, f"{prefix}_rstd": rstd,
        },
    )
    return out_f, out_q


def self_attention_ref(
    x: QuantTensor, p: EncoderParams, trace: Optional[Dict] = None
) -> Tuple[FpTensor, QuantTensor]:
    if x.data.shape[-1] != p.d_model:
        raise ConfigError(f"input width {x.data.shape[-1]} != d_model {p.d_model}")
    x_f = kernels.dequant(x.data, x.scale)
    attn = attention_heads(x, p, trace)
    o_acc = kernels.gemm_int(attn.data, p.w_o.data, p.b_o)
    sa_f, sa = _layernorm_block(
        "ln1", o_acc, attn.scale * p.w_o.scale, x_f, p.gamma1, p.beta1, p.eps, p.scales.sa, trace
    )
    _record(trace, x_f=x_f, o_acc=o_acc, sa_f=sa_f, sa=sa)
    return FpTensor(sa_f), QuantTensor(sa, p.scales.sa)


def encoder_layer_ref(
    x: QuantTensor, p: EncoderParams, trace: Optional[Dict] = None
) -> Tuple[FpTensor, QuantTensor]:
    sa_f, sa = self_attention_ref(x, p, trace)
    f1_acc = kernels.gemm_int(sa.data, p.w_1.data, p.b_1)
    g = kernels.gelu_chain(f1_acc, sa.scale * p.w_1.scale, p.scales.gelu)
    f2_acc = kernels.gemm_int(g, p.w_2.data, p.b_2)
    out_f, out_q = _layernorm_block(
        "ln2", f2_acc, p.scales.gelu * p.w_2.scale, sa_f.data, p.gamma2, p.beta2, p.eps,
        p.scales.out, trace,
    )
    # The quantized output is the next layer's input.
    _record(trace, f1_acc=f1_acc, g=g, f2_acc=f2_acc, out_f=out_f, x=out_q)
    return FpTensor(out_f), QuantTensor(out_q, p.scales.out)


@dataclass
class EncoderTrace:
    """Every value produced per layer, keyed by name."""

    layers: List[Dict[str, np.ndarray]] = field(default_factory=list)


def encoder_ref(x: QuantTensor, layers, trace: Optional[EncoderTrace] = None):
    """Run a stack of layers; returns the last layer's fp32 and int8 outputs."""
    out_f = None
    for p in layers:
        values = {} if trace is not None else None
        out_f, x = encoder_layer_ref(x, p, values)
        if trace is not None:
            trace.layers.append(values)
    return out_f, x


def float_weights(p: EncoderParams):
    """Dequantized weights and fp32 biases of a layer."""
    s = p.scales
    w = {name: getattr(p, name).data.astype(np.float32) * getattr(p, name).scale
         for name in ("w_q", "w_k", "w_v", "w_o", "w_1", "w_2")}
    in_scales = {"b_q": s.x, "b_k": s.x, "b_v": s.x, "b_o": s.attn, "b_1": s.sa, "b_2": s.gelu}
    weight_of = {"b_q": "w_q", "b_k": "w_k", "b_v": "w_v", "b_o": "w_o", "b_1": "w_1", "b_2": "w_2"}
    b = {
        name: getattr(p, name).astype(np.float32)
        * np.float32(in_scales[name] * getattr(p, weight_of[name]).scale)
        for name in in_scales
    }
    return w, b


def encoder_layer_fp32(x, weights, biases, norms, heads, eps, trace: Optional[Dict] = None):
    """
    Pure fp32 encoder layer.

    Args:
        x (np.ndarray): (S, d_model) fp32 input.
        weights (dict): w_q, w_k, w_v, w_o, w_1, w_2 fp32 matrices.
        biases (dict): b_q .. b_2 fp32 vectors.
        norms (dict): gamma1, beta1, gamma2, beta2.
        heads (int): number of attention heads.
        eps (float): layernorm epsilon.

    Returns:
        np.ndarray: (S, d_model) fp32 layer output.
    """
    x = np.asarray(x, dtype=np.float32)
    q = x @ weights["w_q"] + biases["b_q"]
    k = x @ weights["w_k"] + biases["b_k"]
    v = x @ weights["w_v"] + biases["b_v"]
    head_size = q.shape[-1] // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = (qh @ kh.transpose(0, 2, 1)) * np.float32(1.0 / np.sqrt(head_size))
    probs = kernels.softmax(scores)
    attn = probs @ vh
    attn = attn.transpose(1, 0, 2).reshape(x.shape[0], -1)
    sa = kernels.layernorm(attn @ weights["w_o"] + biases["b_o"] + x, norms["gamma1"], norms["beta1"], eps)
    g = kernels.gelu(sa @ weights["w_1"] + biases["b_1"])
    out = kernels.layernorm(g @ weights["w_2"] + biases["b_2"] + sa, norms["gamma2"], norms["beta2"], eps)
    _record(trace, x=x, q=q, k=k, v=v, p=probs, attn=attn, sa_f=sa, g=g, out_f=out)
    return out.astype(np.float32)


def precision_report(x: QuantTensor, layers) -> Dict[str, float]:
    """
    Compare the mixed-precision encoder against a pure fp32 encoder that uses the
    dequantized weights. The error is reported, not bounded.
    """
    mixed, _ = encoder_ref(x, layers)
    reference = kernels.dequant(x.data, x.scale)
    for p in layers:
        w, b = float_weights(p)
        norms = dict(gamma1=p.gamma1, beta1=p.beta1, gamma2=p.gamma2, beta2=p.beta2)
        reference = encoder_layer_fp32(reference, w, b, norms, p.heads, p.eps)
    err = np.abs(mixed.data.astype(np.float64) - reference.astype(np.float64))
    return {
        "max_abs_error": float(err.max()),
        "mean_abs_error": float(err.mean()),
        "rms_reference": float(np.sqrt(np.mean(reference.astype(np.float64) ** 2))),
    }
