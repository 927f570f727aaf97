# weights.py
#
# Seeded synthetic models and the on-disk model directory: `model.cfg` holds the
# hyper-parameters, every tensor is a QTSR file.

import os
from dataclasses import dataclass, fields
from typing import List, Optional, Tuple

import bittensor as bt
import numpy as np

from tspbert import constants
from tspbert.errors import ConfigError, TensorFormatError
from tspbert.graph import ModelSpec
from tspbert.reference import ActivationScales, EncoderParams, encoder_layer_fp32
from tspbert.tensor import (
    AccTensor, FpTensor, QuantTensor, calibrate_scale, load_tensor, quantize, save_tensor, to_int32,
)

MODEL_CONFIG = "model.cfg"
INPUT_FILE = "input.qtsr"
MODEL_KEYS = ("heads", "head_size", "d_model", "d_ff", "layers", "seq_len", "eps")
WEIGHTS = ("w_q", "w_k", "w_v", "w_o", "w_1", "w_2")
BIASES = ("b_q", "b_k", "b_v", "b_o", "b_1", "b_2")
NORMS = ("gamma1", "beta1", "gamma2", "beta2")
SCALE_FIELDS = tuple(f.name for f in fields(ActivationScales))

# Which activation each bias is added to, for its int32 scale
BIAS_INPUT = {"b_q": "x", "b_k": "x", "b_v": "x", "b_o": "attn", "b_1": "sa", "b_2": "gelu"}


@dataclass
class Model:
    spec: ModelSpec
    x: QuantTensor
    layers: List[EncoderParams]

    @property
    def eps(self) -> float:
        return float(self.layers[0].eps) if self.layers else constants.LAYERNORM_EPS


def parameter_bytes(spec: ModelSpec) -> int:
    """Constant-memory bytes of all layers: int8 weights, int32 biases, fp32 norms."""
    dm, dff = spec.d_model, spec.d_ff
    per_layer = (4 * dm * dm + 2 * dm * dff) + 4 * (5 * dm + dff) + 4 * 4 * dm
    return spec.layers * per_layer


def _scale_of(values) -> np.float32:
    return calibrate_scale(FpTensor(np.asarray(values, dtype=np.float32)))


def generate_model(spec: ModelSpec, seed: int = 0, eps: float = constants.LAYERNORM_EPS) -> Model:
    """
    Random fp32 layers quantized per tensor. Activation scales are calibrated by running
    the fp32 encoder on the generated input, so no activation clamps at calibration.
    """
    rng = np.random.default_rng(seed)
    dm, dff, S = spec.d_model, spec.d_ff, spec.seq_len
    x_fp = rng.standard_normal((S, dm), dtype=np.float32)
    x_scale = _scale_of(x_fp)
    x = quantize(FpTensor(x_fp), x_scale)

    layers = []
    current = x.data.astype(np.float32) * x_scale
    in_scale = x_scale
    for _ in range(spec.layers):
        shapes = {
            "w_q": (dm, dm), "w_k": (dm, dm), "w_v": (dm, dm), "w_o": (dm, dm), "w_1": (dm, dff), "w_2": (dff, dm),
        }
        w_q = {}
        for name, shape in shapes.items():
            w = (rng.standard_normal(shape, dtype=np.float32) / np.float32(np.sqrt(shape[0]))).astype(np.float32)
            w_q[name] = quantize(FpTensor(w), _scale_of(w))
        b_fp = {
            name: (np.float32(0.02) * rng.standard_normal(dff if name == "b_1" else dm, dtype=np.float32))
            for name in BIASES
        }
        norms = {
            "gamma1": np.float32(1.0) + np.float32(0.05) * rng.standard_normal(dm, dtype=np.float32),
            "beta1": np.float32(0.05) * rng.standard_normal(dm, dtype=np.float32),
            "gamma2": np.float32(1.0) + np.float32(0.05) * rng.standard_normal(dm, dtype=np.float32),
            "beta2": np.float32(0.05) * rng.standard_normal(dm, dtype=np.float32),
        }
        weights = {name: t.data.astype(np.float32) * t.scale for name, t in w_q.items()}
        trace = {}
        out = encoder_layer_fp32(current, weights, b_fp, norms, spec.heads, eps, trace)
        scales = ActivationScales(
            x=in_scale, q=_scale_of(trace["q"]), k=_scale_of(trace["k"]), v=_scale_of(trace["v"]),
            p=_scale_of(trace["p"]), attn=_scale_of(trace["attn"]), sa=_scale_of(trace["sa_f"]),
            gelu=_scale_of(trace["g"]), out=_scale_of(out),
        )
        biases = {
            name: to_int32(np.rint(b_fp[name] / np.float32(
                getattr(scales, BIAS_INPUT[name]) * w_q["w" + name[1:]].scale
            )))
            for name in BIASES
        }
        layers.append(EncoderParams(
            spec.heads, spec.head_size, dm, dff, **w_q, **biases, **norms, scales=scales, eps=eps,
        ))
        current, in_scale = out, scales.out
    bt.logging.debug(f"generated {spec.layers} layers with seed {seed}")
    return Model(spec, x, layers)


def format_model_config(spec: ModelSpec, eps: float) -> str:
    values = {
        "heads": spec.heads, "head_size": spec.head_size, "d_model": spec.d_model, "d_ff": spec.d_ff,
        "layers": spec.layers, "seq_len": spec.seq_len, "eps": repr(float(eps)),
    }
    return "".join(f"{key} = {values[key]}\n" for key in MODEL_KEYS)


def parse_model_config(text: str, source: str = "<string>") -> Tuple[ModelSpec, float]:
    """key = value lines; `#` starts a comment. Every key but eps is required."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        if key not in MODEL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = float(value) if key == "eps" else int(value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: cannot parse {value!r} for {key}") from None
    eps = values.pop("eps", constants.LAYERNORM_EPS)
    missing = [k for k in MODEL_KEYS if k != "eps" and k not in values]
    if missing:
        raise ConfigError(f"{source}: missing keys {', '.join(missing)}")
    return ModelSpec(**values), eps


def _path(directory, layer, name):
    return os.path.join(directory, f"L{layer}.{name}.qtsr")


def save_model(model: Model, directory):
    """Write model.cfg, input.qtsr and one file per layer tensor."""
    directory = os.path.expanduser(str(directory))
    try:
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, MODEL_CONFIG), "w") as f:
            f.write(format_model_config(model.spec, model.eps))
    except OSError as e:
        raise ConfigError(f"cannot write model to {directory}: {e}") from e
    save_tensor(os.path.join(directory, INPUT_FILE), model.x)
    for layer, p in enumerate(model.layers):
        for name in WEIGHTS:
            save_tensor(_path(directory, layer, name), getattr(p, name))
        for name in BIASES:
            save_tensor(_path(directory, layer, name), AccTensor(getattr(p, name), 1.0))
        for name in NORMS:
            save_tensor(_path(directory, layer, name), FpTensor(getattr(p, name)))
        scales = np.array([getattr(p.scales, f) for f in SCALE_FIELDS], dtype=np.float32)
        save_tensor(_path(directory, layer, "scales"), FpTensor(scales))
    bt.logging.info(f"wrote {len(model.layers)} layers to {directory}")


def _load(directory, layer, name, kind):
    tensor = load_tensor(_path(directory, layer, name))
    if not isinstance(tensor, kind):
        raise TensorFormatError(f"{_path(directory, layer, name)} holds {type(tensor).__name__}, expected {kind.__name__}")
    return tensor


def load_model(directory, seq_len: Optional[int] = None) -> Model:
    directory = os.path.expanduser(str(directory))
    cfg_path = os.path.join(directory, MODEL_CONFIG)
    try:
        with open(cfg_path) as f:
            spec, eps = parse_model_config(f.read(), cfg_path)
    except OSError as e:
        raise ConfigError(f"cannot read {cfg_path}: {e}") from e
    x = load_tensor(os.path.join(directory, INPUT_FILE))
    if not isinstance(x, QuantTensor) or x.data.shape != (spec.seq_len, spec.d_model):
        raise TensorFormatError(f"{INPUT_FILE} must be int8 of shape ({spec.seq_len}, {spec.d_model})")
    if seq_len is not None and seq_len != spec.seq_len:
        raise ConfigError(f"model was generated for sequence length {spec.seq_len}, not {seq_len}")
    layers = []
    for layer in range(spec.layers):
        scales = _load(directory, layer, "scales", FpTensor).data
        if scales.shape != (len(SCALE_FIELDS),):
            raise TensorFormatError(f"layer {layer} scale file has shape {scales.shape}")
        layers.append(EncoderParams(
            spec.heads, spec.head_size, spec.d_model, spec.d_ff,
            **{name: _load(directory, layer, name, QuantTensor) for name in WEIGHTS},
            **{name: _load(directory, layer, name, AccTensor).data for name in BIASES},
            **{name: _load(directory, layer, name, FpTensor).data for name in NORMS},
            scales=ActivationScales(**dict(zip(SCALE_FIELDS, scales))), eps=eps,
        ))
    return Model(spec, x, layers)
