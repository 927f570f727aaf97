# predictor.py
#
# Closed-form timing model. The scheduler places every instruction at the cycles
# computed here. predict_cycles adds up closed-form block latencies without building a
# schedule or a timeline.

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from tspbert.machine import ArchConfig

# ALU chains, one opcode per stage.
DEQUANT_CHAIN = ("cast", "mul")
REQUANT_CHAIN = ("cast", "mul", "clamp_round")

# GELU in 13 stages, evaluated as 0.5 * x * (1 + tanh(k * (x + c*x*x*x))).
# The pass stages fan x out and keep the operand streams aligned.
GELU_STAGES = (
    "pass",  # fan x out to a second stream
    "mul",  # c * x
    "mul",  # * x
    "mul",  # * x
    "add",  # t = x + c*x^3
    "mul",  # k * t
    "tanh",
    "add",  # 1 + u
    "pass",  # align x with 1 + u
    "mul",  # 0.5 * x
    "pass",  # align 0.5 * x
    "mul",  # 0.5 * x * (1 + u)
    "pass",  # hand off to requantization
)
GELU_CHAIN = DEQUANT_CHAIN + GELU_STAGES + ("clamp_round",)

LN_PASS1 = ("cast", "mul", "add", "add")  # dequantize, scale, add residual, running sum
LN_PASS2 = ("sub", "mul", "add", "mul")  # z - mean, square, running sum, gamma * (z - mean)
LN_PASS3 = ("mul", "add", "clamp_round", "cast")  # * rstd, + beta, quantize, narrow
LN_MEAN_STEPS = ("mul",)
LN_RSTD_STEPS = ("mul", "add", "rsqrt")

SOFTMAX_PASS1 = ("cast", "mul", "max")
SOFTMAX_PASS2 = ("sub", "exp", "add")
SOFTMAX_PASS3 = ("mul", "clamp_round")
SOFTMAX_RECIP_STEPS = ("recip",)

# Stage whose output each pass writes back to memory
LN_Z_STAGE = 2
LN_GZ_STAGE = 3
LN_VAR_STAGE = 2
LN_OUT_F_STAGE = 1
LN_OUT_Q_STAGE = 3
SOFTMAX_SCORES_STAGE = 1
SOFTMAX_EXP_STAGE = 1
SOFTMAX_P_STAGE = 1

PARALLEL_CHAINS = 4


@dataclass(frozen=True)
class ScheduleOptions:
    """Switches for the fusion strategies. Turning one off yields a serialized baseline."""

    fuse_gelu: bool = True
    overlap_layernorm: bool = True
    overlap_softmax: bool = True
    overlap_v_gemm: bool = True
    double_buffer_weights: bool = True


def cdiv(a, b):
    return -(-a // b)


def stage_offsets(ops, cfg: ArchConfig) -> Tuple[int, ...]:
    """Start offset of each chain stage relative to the first."""
    offsets, at = [], 0
    for op in ops:
        offsets.append(at)
        at += cfg.latency(op) + cfg.hop
    return tuple(offsets)


def chain_depth(ops, cfg: ArchConfig) -> int:
    """Cycles from the first stage's first input to the last stage's first output."""
    return sum(cfg.latency(op) for op in ops) + (len(ops) - 1) * cfg.hop


def stage_first_out(ops, stage, start, cfg: ArchConfig) -> int:
    return start + stage_offsets(ops, cfg)[stage] + cfg.latency(ops[stage])


def readable(write_start, duration, cfg: ArchConfig) -> int:
    """First cycle a region written by a `duration`-cycle write may be read."""
    return write_start + cfg.mem_access_latency_cycles + duration + cfg.hop


def load_start(ready, cfg: ArchConfig) -> int:
    """First cycle a unit can consume a region read as soon as it is readable."""
    return ready + cfg.mem_access_latency_cycles + cfg.hop


@dataclass(frozen=True)
class GemmTiming:
    """
    A weight-stationary GEMM on one plane: `groups` independent products of
    (rows x k) by (k x n), cut into lane-width weight tiles visited column-major
    (all k tiles of an output column before the next column). `install` is the
    cycles one tile takes to install.
    """

    rows: int
    k: int
    n: int
    lane_width: int
    install: int
    pipeline: int
    double_buffer: bool = True
    groups: int = 1

    @classmethod
    def of(cls, rows, k, n, cfg: ArchConfig, options: ScheduleOptions, groups=1):
        return cls(
            rows, k, n, cfg.lane_width, cfg.install_cycles,
            cfg.mxm_pipeline_depth_cycles, options.double_buffer_weights, groups,
        )

    @property
    def kt(self) -> int:
        return cdiv(self.k, self.lane_width)

    @property
    def nt(self) -> int:
        return cdiv(self.n, self.lane_width)

    @property
    def tiles(self) -> int:
        return self.groups * self.kt * self.nt

    @property
    def period(self) -> int:
        if self.double_buffer:
            return max(self.install, self.rows)
        return self.install + self.rows

    @property
    def vectors_out(self) -> int:
        return self.groups * self.nt * self.rows

    def tile(self, t) -> Tuple[int, int, int]:
        """(group, column tile, k tile) of tile index t."""
        group, rest = divmod(t, self.kt * self.nt)
        n, k = divmod(rest, self.kt)
        return group, n, k

    def is_final(self, t) -> bool:
        return t % self.kt == self.kt - 1

    def stream_start(self, s0, t) -> int:
        return s0 + t * self.period

    def install_start(self, s0, t) -> int:
        if t == 0 or not self.double_buffer:
            return s0 + t * self.period - self.install
        return s0 + (t - 1) * self.period

    def first_out(self, s0) -> int:
        return s0 + (self.kt - 1) * self.period + self.pipeline

    def last_out(self, s0) -> int:
        return s0 + (self.tiles - 1) * self.period + self.pipeline + self.rows - 1

    def span(self) -> int:
        """Cycles from the first output vector to the last, gaps included."""
        return self.last_out(0) - self.first_out(0) + 1

    def streams_end(self, s0) -> int:
        return s0 + (self.tiles - 1) * self.period + self.rows

    def cycles(self) -> int:
        """First install to last output."""
        return self.install + (self.tiles - 1) * self.period + self.pipeline + self.rows


@dataclass(frozen=True)
class ChainFeed:
    """
    A 1-wide VXM chain fed by a producer stream, written back to memory. Every stage
    is busy for `duration` cycles: the producer's output span when fused, so the chain
    keeps pace with the producer, or the vector count when it reads a stored copy.
    """

    start: int
    vectors: int
    duration: int
    ops: Tuple[str, ...]
    write_start: int
    ready: int
    raw_write_start: Optional[int] = None
    raw_duration: int = 0


def feed_chain(first_out, last_out, vectors, ops, cfg: ArchConfig, fused=True) -> ChainFeed:
    """
    Place a chain behind a producer. A fused chain takes the producer's first vector
    one hop after it leaves; otherwise the raw stream is stored as it arrives and the
    chain reads it back.
    """
    span = last_out - first_out + 1
    raw = None
    if fused:
        start, duration = first_out + cfg.hop, span
    else:
        raw, duration = first_out + cfg.hop, vectors
        start = load_start(readable(raw, span, cfg), cfg)
    write = start + chain_depth(ops, cfg) + cfg.hop
    return ChainFeed(
        start, vectors, duration, tuple(ops), write, readable(write, duration, cfg), raw,
        span if raw is not None else 0,
    )


@dataclass(frozen=True)
class PassTiming:
    """
    Three streaming passes with inter-pass reduction steps (layernorm or softmax).
    Passes 2 and 3 read memory and run `duration` cycles per chain; pass 1 runs
    `first_duration`, the producer's output span when it drains a GEMM directly.
    """

    vectors: int
    duration: int
    first_duration: int
    starts: Tuple[int, int, int]
    ends: Tuple[int, int, int]
    steps: Tuple[Tuple[str, int, int], ...]  # (opcode, start, duration) between passes
    writes: Dict[str, int] = field(default_factory=dict)  # region -> write start
    ready: Dict[str, int] = field(default_factory=dict)  # region -> readable cycle
    raw_write_start: Optional[int] = None
    raw_duration: int = 0

    @property
    def window(self) -> int:
        return self.ends[2] - self.starts[0]


def _steps(ops, start, duration, cfg):
    """Back-to-back reduction steps; returns the steps and the cycle the last result is out."""
    steps = []
    for op in ops:
        steps.append((op, start, duration))
        start = start + cfg.latency(op) + duration + cfg.hop
    return tuple(steps), start - cfg.hop


def _write(ops, stage, chain_start, duration, cfg):
    w = stage_first_out(ops, stage, chain_start, cfg) + cfg.hop
    return w, readable(w, duration, cfg)


def _first_pass(first_out, last_out, d, cfg, overlap, start):
    """Start and per-chain duration of a first pass, plus the raw store when it reads one back."""
    span = last_out - first_out + 1
    if start is not None:
        return start, d, None, 0
    if overlap:
        return first_out + cfg.hop, span, None, 0
    raw = first_out + cfg.hop
    return load_start(readable(raw, span, cfg), cfg), d, raw, span


def layernorm_passes(first_out, last_out, vectors, cfg: ArchConfig, overlap=True, start=None) -> PassTiming:
    """
    Three-pass layernorm behind a producing GEMM on four parallel 4-ALU chains.
    Pass 1 drains the GEMM stream as it is produced; Z is read back once, by pass 2.
    With `start` given, pass 1 reads its input from memory at that cycle.
    """
    d = cdiv(vectors, PARALLEL_CHAINS)
    c1, d1, raw, raw_d = _first_pass(first_out, last_out, d, cfg, overlap, start)
    e1 = c1 + d1 + chain_depth(LN_PASS1, cfg)
    z_write, z_ready = _write(LN_PASS1, LN_Z_STAGE, c1, d1, cfg)
    mean_steps, mean_out = _steps(LN_MEAN_STEPS, e1 + cfg.hop, 1, cfg)
    c2 = max(load_start(z_ready, cfg), mean_out + cfg.hop)

    e2 = c2 + d + chain_depth(LN_PASS2, cfg)
    var_out = stage_first_out(LN_PASS2, LN_VAR_STAGE, c2, cfg) + d
    gz_write, gz_ready = _write(LN_PASS2, LN_GZ_STAGE, c2, d, cfg)
    rstd_steps, rstd_out = _steps(LN_RSTD_STEPS, var_out + cfg.hop, 1, cfg)
    c3 = max(load_start(gz_ready, cfg), rstd_out + cfg.hop)

    e3 = c3 + d + chain_depth(LN_PASS3, cfg)
    f_write, f_ready = _write(LN_PASS3, LN_OUT_F_STAGE, c3, d, cfg)
    q_write, q_ready = _write(LN_PASS3, LN_OUT_Q_STAGE, c3, d, cfg)
    return PassTiming(
        vectors, d, d1, (c1, c2, c3), (e1, e2, e3), mean_steps + rstd_steps,
        writes=dict(z=z_write, gz=gz_write, out_f=f_write, out_q=q_write),
        ready=dict(z=z_ready, gz=gz_ready, out_f=f_ready, out_q=q_ready),
        raw_write_start=raw, raw_duration=raw_d,
    )


def softmax_passes(first_out, last_out, vectors, rows, cfg: ArchConfig, overlap=True, start=None) -> PassTiming:
    """Row max, then exp and sum (exp kept in memory), then scaling by the reciprocal sum."""
    d = cdiv(vectors, PARALLEL_CHAINS)
    c1, d1, raw, raw_d = _first_pass(first_out, last_out, d, cfg, overlap, start)
    e1 = c1 + d1 + chain_depth(SOFTMAX_PASS1, cfg)
    s_write, s_ready = _write(SOFTMAX_PASS1, SOFTMAX_SCORES_STAGE, c1, d1, cfg)
    c2 = max(load_start(s_ready, cfg), e1 + cfg.hop)

    e2 = c2 + d + chain_depth(SOFTMAX_PASS2, cfg)
    x_write, x_ready = _write(SOFTMAX_PASS2, SOFTMAX_EXP_STAGE, c2, d, cfg)
    recip_steps, recip_out = _steps(SOFTMAX_RECIP_STEPS, e2 + cfg.hop, cdiv(rows, cfg.lane_width), cfg)
    c3 = max(load_start(x_ready, cfg), recip_out + cfg.hop)

    e3 = c3 + d + chain_depth(SOFTMAX_PASS3, cfg)
    p_write, p_ready = _write(SOFTMAX_PASS3, SOFTMAX_P_STAGE, c3, d, cfg)
    return PassTiming(
        vectors, d, d1, (c1, c2, c3), (e1, e2, e3), recip_steps,
        writes=dict(scores=s_write, e=x_write, p=p_write),
        ready=dict(scores=s_ready, e=x_ready, p=p_ready),
        raw_write_start=raw, raw_duration=raw_d,
    )


def ln_constant(cfg: ArchConfig) -> int:
    """Fixed layernorm overhead: pipeline fills plus the two inter-pass reduction steps."""
    timing = layernorm_passes(0, 0, PARALLEL_CHAINS, cfg, start=0)
    return timing.window - 3 * timing.duration


def ln_cycles(k, j, cfg: ArchConfig) -> int:
    """3 * j * ceil(k / L) / 4 + c, with each pass rounded up to whole cycles."""
    return 3 * cdiv(j * cdiv(k, cfg.lane_width), PARALLEL_CHAINS) + ln_constant(cfg)


def gelu_gap(cfg: ArchConfig) -> int:
    """MXM idle cycles between the last stream of FF1 and the first stream of FF2 when fused."""
    return (
        cfg.mxm_pipeline_depth_cycles + chain_depth(GELU_CHAIN, cfg)
        + 4 * cfg.hop + 2 * cfg.mem_access_latency_cycles
    )


# Closed-form block latencies. Each restates one block of the timeline as a sum of
# machine constants, so predict_cycles never builds a plan.


def _stage_out(ops, stage, cfg: ArchConfig) -> int:
    return stage_offsets(ops, cfg)[stage] + cfg.latency(ops[stage])


def _steps_latency(ops, duration, cfg: ArchConfig) -> int:
    return sum(cfg.latency(op) + duration for op in ops) + (len(ops) - 1) * cfg.hop


def chain_tail(ops, cfg: ArchConfig, fused=True, vectors=0) -> int:
    """Cycles from a producer's last output until the chain's written result is readable."""
    H, ml = cfg.hop, cfg.mem_access_latency_cycles
    tail = chain_depth(ops, cfg) + 3 * H + ml + 1
    if fused:
        return tail
    return tail + 2 * (H + ml) + vectors


def first_pass_drain(d, cfg: ArchConfig, overlap=True) -> int:
    """Cycles from a producer's last output until pass 1 has taken its last input."""
    H, ml = cfg.hop, cfg.mem_access_latency_cycles
    if overlap:
        return 1 + H
    return 1 + 3 * H + 2 * ml + d


def layernorm_tail(d, cfg: ArchConfig) -> int:
    """Cycles from pass 1 taking its last input until the int8 output is readable."""
    H, ml = cfg.hop, cfg.mem_access_latency_cycles
    to_pass2 = max(
        _stage_out(LN_PASS1, LN_Z_STAGE, cfg) + 3 * H + 2 * ml,
        chain_depth(LN_PASS1, cfg) + 2 * H + _steps_latency(LN_MEAN_STEPS, 1, cfg),
    )
    to_pass3 = max(
        _stage_out(LN_PASS2, LN_GZ_STAGE, cfg) + 3 * H + 2 * ml,
        _stage_out(LN_PASS2, LN_VAR_STAGE, cfg) + 2 * H + _steps_latency(LN_RSTD_STEPS, 1, cfg),
    )
    return to_pass2 + to_pass3 + _stage_out(LN_PASS3, LN_OUT_Q_STAGE, cfg) + 2 * H + ml + 2 * d


def softmax_tail(d, rows, cfg: ArchConfig) -> int:
    """Cycles from pass 1 taking its last input until the int8 probabilities are readable."""
    H, ml = cfg.hop, cfg.mem_access_latency_cycles
    recip = _steps_latency(SOFTMAX_RECIP_STEPS, cdiv(rows, cfg.lane_width), cfg)
    to_pass2 = max(
        _stage_out(SOFTMAX_PASS1, SOFTMAX_SCORES_STAGE, cfg) + 3 * H + 2 * ml,
        chain_depth(SOFTMAX_PASS1, cfg) + H,
    )
    to_pass3 = max(
        _stage_out(SOFTMAX_PASS2, SOFTMAX_EXP_STAGE, cfg) + 3 * H + 2 * ml,
        chain_depth(SOFTMAX_PASS2, cfg) + 2 * H + recip,
    )
    return to_pass2 + to_pass3 + _stage_out(SOFTMAX_PASS3, SOFTMAX_P_STAGE, cfg) + 2 * H + ml + 2 * d


def predict_layer_cycles(spec, cfg: ArchConfig, options: ScheduleOptions = ScheduleOptions()) -> int:
    """Cycles of one encoder layer, summed block by block."""
    S, dm, dff, h, dk = spec.seq_len, spec.d_model, spec.d_ff, spec.heads, spec.head_size
    H, ml, I = cfg.hop, cfg.mem_access_latency_cycles, cfg.install_cycles
    sxm_lead = ml + 2 * H + cfg.sxm_reorder_latency_cycles
    requant = chain_tail(REQUANT_CHAIN, cfg)

    def gemm(rows, k, n, groups=1):
        return GemmTiming.of(rows, k, n, cfg, options, groups)

    def layernorm_ready(g, s0):
        d = cdiv(g.vectors_out, PARALLEL_CHAINS)
        return g.last_out(s0) + first_pass_drain(d, cfg, options.overlap_layernorm) + layernorm_tail(d, cfg)

    qk = gemm(S, dm, dm)
    s_qk = H + max(ml + H, I)
    qk_ready = qk.last_out(s_qk) + requant

    scores = gemm(S, dk, S, h)
    s_scores = qk_ready + sxm_lead + I
    d = cdiv(scores.vectors_out, PARALLEL_CHAINS)
    p_ready = (
        scores.last_out(s_scores) + first_pass_drain(d, cfg, options.overlap_softmax)
        + softmax_tail(d, h * S, cfg)
    )

    # V runs on its own plane and only has to be readable when the context GEMM installs it
    v_latency = qk.last_out(0) + requant
    s_v = max(qk.streams_end(s_qk), p_ready - v_latency if options.overlap_v_gemm else p_ready)
    context = gemm(S, S, dk, h)
    s_context = max(load_start(p_ready, cfg), s_v + v_latency + sxm_lead + I)

    out_proj = gemm(S, dm, dm)
    s_out = load_start(context.last_out(s_context) + requant, cfg)
    ff1 = gemm(S, dm, dff)
    s_ff1 = load_start(layernorm_ready(out_proj, s_out), cfg)
    gelu = chain_tail(GELU_CHAIN, cfg, options.fuse_gelu, ff1.vectors_out)
    ff2 = gemm(S, dff, dm)
    s_ff2 = load_start(ff1.last_out(s_ff1) + gelu, cfg)
    return layernorm_ready(ff2, s_ff2) - H


@dataclass
class LayerPlan:
    """Anchor cycles of one scheduled encoder layer."""

    origin: int
    base: int
    qk: GemmTiming = None
    scores: GemmTiming = None
    context: GemmTiming = None
    out_proj: GemmTiming = None
    ff1: GemmTiming = None
    ff2: GemmTiming = None
    s_qk: int = 0
    s_scores: int = 0
    s_v: int = 0
    s_context: int = 0
    s_out: int = 0
    s_ff1: int = 0
    s_ff2: int = 0
    x_dequant: ChainFeed = None
    q_requant: ChainFeed = None
    v_requant: ChainFeed = None
    attn_requant: ChainFeed = None
    gelu: ChainFeed = None
    softmax: PassTiming = None
    ln1: PassTiming = None
    ln2: PassTiming = None
    end: int = 0

    @property
    def cycles(self) -> int:
        return self.end - self.origin


def plan_layer(spec, cfg: ArchConfig, options: ScheduleOptions = ScheduleOptions(), origin=0) -> LayerPlan:
    """
    Timeline of one layer whose input was written by cycle `origin`.

    Order: Q and K in lockstep on two planes (X streamed once to both and to the
    residual dequantizer), per-head scores with softmax behind them, V placed to
    finish with the softmax, per-head context, output projection with layernorm,
    FF1 with the GELU chain, FF2 with layernorm.
    """
    S, dm, dff, h, dk = spec.seq_len, spec.d_model, spec.d_ff, spec.heads, spec.head_size
    H, ml = cfg.hop, cfg.mem_access_latency_cycles
    sxm_lead = ml + H + cfg.sxm_reorder_latency_cycles + H
    plan = LayerPlan(origin=origin, base=origin + H)

    qk = plan.qk = GemmTiming.of(S, dm, dm, cfg, options)
    plan.s_qk = plan.base + max(ml + H, qk.install)
    read_first = plan.s_qk - H
    read_last = qk.stream_start(plan.s_qk, qk.kt - 1) - H + S - 1
    plan.x_dequant = feed_chain(read_first, read_last, S * qk.kt, DEQUANT_CHAIN, cfg)
    plan.q_requant = feed_chain(
        qk.first_out(plan.s_qk), qk.last_out(plan.s_qk), qk.vectors_out, REQUANT_CHAIN, cfg
    )
    qk_ready = plan.q_requant.ready

    scores = plan.scores = GemmTiming.of(S, dk, S, cfg, options, groups=h)
    plan.s_scores = qk_ready + sxm_lead + scores.install
    plan.softmax = softmax_passes(
        scores.first_out(plan.s_scores), scores.last_out(plan.s_scores), scores.vectors_out,
        h * S, cfg, overlap=options.overlap_softmax,
    )
    p_ready = plan.softmax.ready["p"]

    def v_feed(s):
        return feed_chain(qk.first_out(s), qk.last_out(s), qk.vectors_out, REQUANT_CHAIN, cfg)

    s_v_min = qk.streams_end(plan.s_qk)
    span_v = v_feed(s_v_min).ready - s_v_min
    target = p_ready - span_v if options.overlap_v_gemm else p_ready
    plan.s_v = max(s_v_min, target)
    plan.v_requant = v_feed(plan.s_v)

    context = plan.context = GemmTiming.of(S, S, dk, cfg, options, groups=h)
    plan.s_context = max(
        load_start(p_ready, cfg),
        plan.v_requant.ready + sxm_lead + context.install,
    )
    plan.attn_requant = feed_chain(
        context.first_out(plan.s_context), context.last_out(plan.s_context),
        context.vectors_out, REQUANT_CHAIN, cfg,
    )

    out_proj = plan.out_proj = GemmTiming.of(S, dm, dm, cfg, options)
    plan.s_out = load_start(plan.attn_requant.ready, cfg)
    plan.ln1 = layernorm_passes(
        out_proj.first_out(plan.s_out), out_proj.last_out(plan.s_out), out_proj.vectors_out,
        cfg, overlap=options.overlap_layernorm,
    )

    ff1 = plan.ff1 = GemmTiming.of(S, dm, dff, cfg, options)
    plan.s_ff1 = load_start(plan.ln1.ready["out_q"], cfg)
    plan.gelu = feed_chain(
        ff1.first_out(plan.s_ff1), ff1.last_out(plan.s_ff1), ff1.vectors_out, GELU_CHAIN, cfg,
        fused=options.fuse_gelu,
    )

    ff2 = plan.ff2 = GemmTiming.of(S, dff, dm, cfg, options)
    plan.s_ff2 = load_start(plan.gelu.ready, cfg)
    plan.ln2 = layernorm_passes(
        ff2.first_out(plan.s_ff2), ff2.last_out(plan.s_ff2), ff2.vectors_out,
        cfg, overlap=options.overlap_layernorm,
    )
    plan.end = plan.ln2.ready["out_q"] - H
    return plan


def plan_encoder(spec, cfg: ArchConfig, options: ScheduleOptions = ScheduleOptions()):
    plans, origin = [], 0
    for _ in range(spec.layers):
        plan = plan_layer(spec, cfg, options, origin)
        plans.append(plan)
        origin = plan.end
    return plans


def predict_cycles(target, cfg: Optional[ArchConfig] = None, options: ScheduleOptions = ScheduleOptions()) -> int:
    """
    Predicted device cycles of a ComputeGraph on `cfg`, or the prediction a Schedule
    was built with. Every layer takes the same number of cycles.
    """
    if getattr(target, "instructions", None) is not None:
        return target.predicted_total
    if not target.nodes:
        return 0
    if cfg is None:
        cfg = ArchConfig()
    return target.spec.layers * predict_layer_cycles(target.spec, cfg, options)


def predict_time(target, cfg: Optional[ArchConfig] = None, options: ScheduleOptions = ScheduleOptions()):
    """Predicted cycles and the same figure in microseconds at the configured clock."""
    cfg = cfg or ArchConfig()
    cycles = predict_cycles(target, cfg, options)
    return cycles, cfg.cycles_to_time(cycles)


def block_breakdown(plan: LayerPlan) -> Dict[str, int]:
    """Analytic per-block cycle counts of one layer (self-attention until LN1 finishes)."""
    sa_end = plan.ln1.ends[2]
    return {"SA Block": sa_end - plan.origin, "FF Block": plan.end - sa_end}
