# scheduler.py
#
# Static scheduler. Lowers the encoder graph into cycle-stamped instructions on
# concrete units and streams, following the timeline computed in predictor.py, and
# checks the result with an exhaustive reservation-table scan.

import bisect
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import bittensor as bt
from astropy.table import Table

from tspbert import predictor as pt
from tspbert.errors import ConfigError, ScheduleConflictError, TensorFormatError
from tspbert.graph import FF_BLOCK, SA_BLOCK, ModelSpec
from tspbert.machine import (
    CONSTANT, INSTRUCTION, MEM, MXM, SCRATCHPAD, SXM, VXM,
    ArchConfig, Instruction, MemoryMap, MemoryRegion, alloc_memory, validate_config,
)
from tspbert.predictor import ScheduleOptions

DEP_KINDS = ("full", "stream_head", "stream_tail", "weights")

# Operand layouts understood by the simulator's MXM model
PLAIN = "plain"
HEADS = "heads"  # (S, h*d) viewed as h blocks of (S, d)
HEADS_T = "heads_t"  # same blocks, transposed to (d, S)
STACKED = "stacked"  # (h, S, n) already split per head
CONCAT = "concat"  # (h, S, n) joined back to (S, h*n)

INT8_BYTES, WIDE_BYTES = 1, 4


@dataclass(frozen=True)
class FuncOp:
    """
    Functional effect attached to an instruction. `args` maps kernel keyword arguments
    to value names; `consts` holds literal parameters.
    """

    kernel: str
    args: Tuple[Tuple[str, str], ...] = ()
    outputs: Tuple[str, ...] = ()
    consts: Tuple[Tuple[str, object], ...] = ()

    def const(self, key, default=None):
        return dict(self.consts).get(key, default)


@dataclass(frozen=True)
class AluChain:
    alus: Tuple[int, ...]
    opcodes: Tuple[str, ...]
    node: str = ""

    @property
    def stages(self) -> int:
        return len(self.opcodes)


@dataclass(frozen=True)
class Operand:
    """Activation or weight source of a GEMM. Weights without a region are constants."""

    value: str
    region: Optional[str] = None
    layout: str = PLAIN
    via_sxm: bool = False
    reorder_node: str = ""


@dataclass(frozen=True)
class GemmTarget:
    plane: int
    weight: Operand
    out: str
    bias: Optional[str] = None
    out_layout: str = PLAIN
    node: str = ""


@dataclass
class GemmEmission:
    reads: List[Instruction] = field(default_factory=list)
    streams: Dict[str, List[Instruction]] = field(default_factory=dict)
    finals: Dict[str, List[Instruction]] = field(default_factory=dict)


@dataclass
class Schedule:
    cfg: ArchConfig
    options: ScheduleOptions
    instructions: List[Instruction]
    ops: Dict[int, List[FuncOp]]
    regions: List[MemoryRegion]
    memory_map: MemoryMap
    node_windows: Dict[str, Tuple[int, int]]
    chains: List[AluChain]
    predicted_total: int
    spec: Optional[ModelSpec] = None
    outputs: Tuple[str, ...] = ()

    @property
    def total_cycles(self) -> int:
        return max((i.end for i in self.instructions), default=0)

    def by_id(self) -> Dict[int, Instruction]:
        return {i.iid: i for i in self.instructions}

    def reservations(self) -> Dict[Tuple, List[Tuple[int, int, int]]]:
        """Unit and stream occupancy: key -> sorted (start, end, iid)."""
        table = defaultdict(list)
        for i in self.instructions:
            table[i.unit].append((i.start, i.busy_end, i.iid))
            if i.unit_class == VXM:
                # results still draining out of the ALU pipeline
                table[(VXM, i.unit_id, "out")].append((i.first_out, i.end, i.iid))
            for s in i.result_streams:
                table[("stream", s, "")].append((i.first_out, i.end + self.cfg.hop, i.iid))
        return {k: sorted(v) for k, v in table.items()}


class ReservationTable:
    """Claimed intervals per unit or stream key, kept sorted and disjoint."""

    def __init__(self):
        self.busy = defaultdict(list)

    def _clash(self, key, start, end):
        spans = self.busy[key]
        idx = bisect.bisect_left(spans, (start,))
        for s, e, other in spans[max(idx - 1, 0): idx + 1]:
            if s < end and start < e:
                return s, other
        return None

    def is_free(self, key, start, end) -> bool:
        return self._clash(key, start, end) is None

    def reserve(self, key, start, end, iid):
        clash = self._clash(key, start, end)
        if clash is not None:
            s, other = clash
            raise ScheduleConflictError(
                f"{key} is claimed by instruction {other} at cycle {max(s, start)}",
                [(max(s, start), key, other, iid)],
            )
        bisect.insort(self.busy[key], (start, end, iid))

    def first_free(self, make_key, count, start, end) -> Optional[int]:
        for i in range(count):
            if self.is_free(make_key(i), start, end):
                return i
        return None


class ScheduleBuilder:
    """
    Emits instructions at given cycles, picking free ALUs and streams and reserving
    every unit. MEM ports are reserved per (region, bank) and mapped to slices once
    the memory map is known.
    """

    def __init__(self, cfg: ArchConfig, options: ScheduleOptions = ScheduleOptions()):
        problems = validate_config(cfg)
        if problems:
            raise ConfigError("invalid machine configuration: " + "; ".join(problems))
        self.cfg = cfg
        self.options = options
        self.instructions: List[Instruction] = []
        self.ops: Dict[int, List[FuncOp]] = defaultdict(list)
        self.table = ReservationTable()
        self.regions: Dict[str, MemoryRegion] = {}
        self.scratch: Dict[str, Tuple[int, int]] = {}
        self.writers: Dict[str, List[Instruction]] = {}
        self.chains: List[AluChain] = []
        self.node_windows: Dict[str, Tuple[int, int]] = {}
        self.layer = 0
        self.block = SA_BLOCK

    # regions

    def region(self, name, nbytes, banks=1, kind=SCRATCHPAD):
        region = self.regions.get(name)
        if region is None:
            region = self.regions[name] = MemoryRegion(name, nbytes, kind, banks)
        elif region.nbytes < nbytes or region.banks != banks:
            raise ConfigError(f"region {name} redeclared with a different size")
        return region

    def use_sizes(self, sizes: Dict[str, Tuple[int, int]]):
        """Register (bytes, banks) of scratch regions declared on first use."""
        self.scratch.update(sizes)

    def _scratch(self, name):
        if name not in self.regions:
            try:
                nbytes, banks = self.scratch[name]
            except KeyError:
                raise ConfigError(f"no size known for region {name}") from None
            self.region(name, nbytes, banks)

    def preloaded(self, name):
        """Mark a region as written before cycle 0."""
        self._scratch(name)
        self.writers.setdefault(name, [])

    # emission

    def emit(
        self, unit_class, opcode, node, start, duration, latency=1, unit_id=None,
        feeds=(), deps=(), region=None, bank=0, streams_out=1, vectors=None,
    ) -> Instruction:
        cfg = self.cfg
        iid = len(self.instructions)
        end = start + duration
        if unit_class == VXM and unit_id is None:
            unit_id = next(
                (
                    i for i in range(cfg.vxm_alu_count)
                    if self.table.is_free((VXM, i, ""), start, end)
                    and self.table.is_free((VXM, i, "out"), start + latency, end + latency)
                ),
                None,
            )
            if unit_id is None:
                raise ScheduleConflictError(
                    f"insufficient free ALUs for {node} at cycle {start}", [(start, (VXM,), None, iid)]
                )
        port = Instruction(iid, unit_class, 0, opcode, node, start, duration, latency).port
        key = (MEM, (region, bank), port) if unit_class == MEM else (unit_class, unit_id, port)
        self.table.reserve(key, start, end, iid)
        if unit_class == VXM:
            self.table.reserve((VXM, unit_id, "out"), start + latency, end + latency, iid)

        result = ()
        if streams_out:
            lo, hi = start + latency, start + latency + duration + cfg.hop
            found = self.table.first_free(lambda s: ("stream", s, ""), cfg.stream_count, lo, hi)
            if found is None:
                raise ScheduleConflictError(f"no free stream for {node} at cycle {lo}", [(lo, ("stream",), None, iid)])
            self.table.reserve(("stream", found, ""), lo, hi, iid)
            result = (found,)

        feeds = list(feeds)
        dep_list = list(deps)
        if feeds:
            dep_list.append((feeds[0].iid, "stream_head"))
            dep_list.append((feeds[-1].iid, "stream_tail"))
        operands = tuple(sorted({s for f in feeds for s in f.result_streams}))
        inst = Instruction(
            iid, unit_class, unit_id if unit_class != MEM else bank, opcode, node, start, duration,
            latency, vector_count=duration if vectors is None else vectors,
            operand_streams=operands, result_streams=result, deps=tuple(dict.fromkeys(dep_list)),
            region=region, block=self.block, layer=self.layer,
        )
        self.instructions.append(inst)
        lo, hi = self.node_windows.get(node, (start, inst.end))
        self.node_windows[node] = (min(lo, start), max(hi, inst.end))
        return inst

    def attach(self, inst: Instruction, kernel, args=(), outputs=(), **consts):
        self.ops[inst.iid].append(
            FuncOp(kernel, tuple(args), tuple(outputs), tuple(sorted(consts.items())))
        )

    def read(self, node, region, bank, start, duration, value=None) -> Instruction:
        if region not in self.writers:
            raise ScheduleConflictError(f"{node} reads region {region} before it is written")
        deps = [(w.iid, "full") for w in self.writers[region]]
        inst = self.emit(
            MEM, "read", node, start, duration, self.cfg.mem_access_latency_cycles,
            deps=deps, region=region, bank=bank,
        )
        if value is not None:
            self.attach(inst, "load", outputs=(value,), region=region)
        return inst

    def write(self, node, region, producers, start, duration, value=None, vectors=None) -> List[Instruction]:
        """
        One write per bank. `producers` holds one feed list per bank, or a single feed
        list spread over every bank.
        """
        self._scratch(region)
        banks = self.regions[region].banks
        feeds = [p if isinstance(p, list) else [p] for p in producers]
        if len(feeds) not in (1, banks):
            raise ScheduleConflictError(f"{node}: {len(feeds)} streams into {banks} banks of {region}")
        out = []
        for b in range(banks):
            inst = self.emit(
                MEM, "write", node, start, duration, self.cfg.mem_access_latency_cycles,
                feeds=feeds[b if len(feeds) == banks else 0], region=region, bank=b, streams_out=0,
                vectors=vectors,
            )
            out.append(inst)
        if value is not None:
            self.attach(max(out, key=lambda i: (i.end, i.iid)), "store", args=(("value", value),), region=region)
        self.writers[region] = out
        return out

    def reorder(self, node, port, start, duration, feeds) -> Instruction:
        return self.emit(
            SXM, "reorder", node, start, duration, self.cfg.sxm_reorder_latency_cycles,
            unit_id=port % self.cfg.sxm_port_count, feeds=feeds,
        )

    def step(self, node, opcode, start, duration, deps) -> Instruction:
        """A reduction step; its result is held in the ALU for the next pass, not streamed."""
        return self.emit(
            VXM, opcode, node, start, duration, self.cfg.latency(opcode),
            deps=[(d.iid, "full") for d in deps], streams_out=0,
        )

    def chain(self, node, ops, start, duration, feeds, side=None, vectors=None, reduce=False) -> List[Instruction]:
        """
        One ALU per stage, stage i starting at start + offset(i). `side` maps a stage
        index to extra (instruction, dep kind) inputs such as reduction results. The
        last stage of a `reduce` chain keeps its running result instead of streaming it.
        """
        side = side or {}
        offsets = pt.stage_offsets(ops, self.cfg)
        stages, prev = [], list(feeds)
        for i, op in enumerate(ops):
            extra = side.get(i, ())
            inst = self.emit(
                VXM, op, node, start + offsets[i], duration, self.cfg.latency(op),
                feeds=prev, deps=[(d.iid, kind) for d, kind in extra if kind != "stream"],
                streams_out=0 if reduce and i == len(ops) - 1 else 1, vectors=vectors,
            )
            streamed = [d for d, kind in extra if kind == "stream"]
            if streamed:
                deps = list(inst.deps) + [(streamed[0].iid, "stream_head"), (streamed[-1].iid, "stream_tail")]
                operands = tuple(sorted(set(inst.operand_streams) | {s for d in streamed for s in d.result_streams}))
                inst = replace(inst, deps=tuple(dict.fromkeys(deps)), operand_streams=operands)
                self.instructions[inst.iid] = inst
            stages.append(inst)
            prev = [inst]
        self.chains.append(AluChain(tuple(s.unit_id for s in stages), tuple(ops), node))
        return stages

    def gemm(self, node, timing: pt.GemmTiming, s0, act: Operand, targets: Sequence[GemmTarget]) -> GemmEmission:
        """
        Emit a tiled GEMM on one or more planes sharing one activation stream. Weight
        tiles come from constant memory or, for activations used as weights, from a
        region through the SXM.
        """
        cfg, H, ml, R = self.cfg, self.cfg.hop, self.cfg.mem_access_latency_cycles, self.cfg.sxm_reorder_latency_cycles
        S, I = timing.rows, timing.install
        em = GemmEmission(streams={t.out: [] for t in targets}, finals={t.out: [] for t in targets})
        for target in targets:
            if target.bias:
                self.region(target.bias, timing.n * WIDE_BYTES, kind=CONSTANT)
        for t in range(timing.tiles):
            group, n, k = timing.tile(t)
            ss, ins = timing.stream_start(s0, t), timing.install_start(s0, t)
            lead = H + ml + (R + H if act.via_sxm else 0)
            rd = self.read(node, act.region, t % self.regions[act.region].banks, ss - lead, S, value=act.value)
            em.reads.append(rd)
            src = self.reorder(act.reorder_node or node, 0, ss - H - R, S, [rd]) if act.via_sxm else rd
            for target in targets:
                w = target.weight
                if w.region is not None:
                    # one bank and one SXM port per install stream
                    reorders = []
                    for j in range(cfg.mxm_install_streams):
                        wr = self.read(
                            node, w.region, j, ins - H - R - H - ml, I, value=w.value if j == 0 else None
                        )
                        reorders.append(self.reorder(w.reorder_node or node, 1 + j, ins - H - R, I, [wr]))
                    inst = self.emit(
                        MXM, "install_weights", target.node or node, ins, I, 0, unit_id=target.plane,
                        feeds=reorders, streams_out=0,
                    )
                else:
                    self.region(w.value, timing.groups * timing.k * timing.n * INT8_BYTES, kind=CONSTANT)
                    inst = self.emit(
                        MXM, "install_weights", target.node or node, ins, I, 0, unit_id=target.plane, streams_out=0
                    )
                buffer = t % 2
                self.attach(
                    inst, "install", args=(("weights", w.value),), plane=target.plane, buffer=buffer,
                    group=group, groups=timing.groups, n=n, k=k, layout=w.layout, lane_width=timing.lane_width,
                )
                final = timing.is_final(t)
                st = self.emit(
                    MXM, "matmul_stream", target.node or node, ss, S, timing.pipeline, unit_id=target.plane, feeds=[src],
                    deps=[(inst.iid, "weights")], streams_out=1 if final else 0,
                )
                self.attach(
                    st, "macc", args=(("act", act.value),) + ((("bias", target.bias),) if target.bias else ()),
                    outputs=(target.out,), plane=target.plane, buffer=buffer, group=group, n=n, k=k,
                    final=final, last=t == timing.tiles - 1, layout=act.layout, out_layout=target.out_layout,
                    groups=timing.groups, rows=S, width=timing.n, lane_width=timing.lane_width,
                )
                em.streams[target.out].append(st)
                if final:
                    em.finals[target.out].append(st)
        return em

    def requant_chain(self, node, feed: pt.ChainFeed, producers, region, acc, out, in_scale, out_scale):
        stages = self.chain(node, feed.ops, feed.start, feed.duration, producers, vectors=feed.vectors)
        self.attach(stages[-1], "requant", (("acc", acc), ("in_scale", in_scale), ("out_scale", out_scale)), (out,))
        self.write(node, region, [stages[-1]], feed.write_start, feed.duration, value=out, vectors=feed.vectors)
        return stages

    def _pass_feeds(self, node, timing: pt.PassTiming, finals, raw_region, acc):
        """Per-chain inputs of a first pass: the producer stream, or bank reads of a stored copy."""
        H, ml = self.cfg.hop, self.cfg.mem_access_latency_cycles
        if finals is not None and timing.raw_write_start is None:
            return [list(finals)] * pt.PARALLEL_CHAINS
        if finals is not None:
            self.write(
                node, raw_region, [list(finals)], timing.raw_write_start, timing.raw_duration, value=acc,
                vectors=timing.vectors,
            )
        start = timing.starts[0] - H - ml
        return [
            [self.read(node, raw_region, b, start, timing.first_duration, value=acc)]
            for b in range(pt.PARALLEL_CHAINS)
        ]

    def _bank_reads(self, node, region, start, duration, value):
        return [self.read(node, region, b, start, duration, value=value) for b in range(pt.PARALLEL_CHAINS)]

    def layernorm(
        self, prefix, name, timing: pt.PassTiming, finals, acc, acc_scale, residual,
        out_f, out_q, q_region, out_scale, count,
    ):
        """
        Three passes on four parallel chains. Pass 1 takes the GEMM stream and the
        residual, pass 2 reads Z back once, pass 3 reads gamma * (Z - mean) and emits
        both the fp32 and the int8 result.
        """
        cfg = self.cfg
        H, ml = cfg.hop, cfg.mem_access_latency_cycles
        n1, n2, n3 = (f"{prefix}{name}_pass{i}" for i in (1, 2, 3))
        v = {k: f"{prefix}{name}_{k}" for k in ("z", "sum", "mean", "gz", "sq", "rstd")}
        gamma, beta = f"{prefix}gamma{name[-1]}", f"{prefix}beta{name[-1]}"
        for const in (gamma, beta):
            self.region(const, count * WIDE_BYTES, kind=CONSTANT)
        d, d1 = timing.duration, timing.first_duration
        c1, c2, c3 = timing.starts

        feeds = self._pass_feeds(n1, timing, finals, "acc_raw", acc)
        res_at = c1 + pt.stage_offsets(pt.LN_PASS1, cfg)[2] - H - ml
        res = self._bank_reads(n1, "resid", res_at, d1, residual)
        p1 = [
            self.chain(n1, pt.LN_PASS1, c1, d1, feeds[b], {2: [(res[b], "stream")]}, vectors=d, reduce=True)
            for b in range(len(res))
        ]
        self.attach(
            p1[-1][pt.LN_Z_STAGE], "ln_pass1",
            (("acc", acc), ("acc_scale", acc_scale), ("residual", residual)), (v["z"], v["sum"]),
        )
        self.write(n1, "z", [c[pt.LN_Z_STAGE] for c in p1], timing.writes["z"], d1, value=v["z"], vectors=d)
        op, start, duration = timing.steps[0]
        mean = self.step(n1, op, start, duration, [c[-1] for c in p1])
        self.attach(mean, "ln_mean", (("sums", v["sum"]),), (v["mean"],), count=count)

        zr = self._bank_reads(n2, "z", c2 - H - ml, d, v["z"])
        p2 = [self.chain(n2, pt.LN_PASS2, c2, d, [zr[b]], {0: [(mean, "full")]}) for b in range(len(zr))]
        self.attach(
            p2[-1][pt.LN_VAR_STAGE], "ln_pass2",
            (("z", v["z"]), ("mean", v["mean"]), ("gamma", gamma)), (v["gz"], v["sq"]),
        )
        self.write(n2, "gz", [c[pt.LN_GZ_STAGE] for c in p2], timing.writes["gz"], d, value=v["gz"])
        prev = [c[pt.LN_VAR_STAGE] for c in p2]
        for op, start, duration in timing.steps[1:]:
            prev = [self.step(n2, op, start, duration, prev)]
        rstd = prev[0]
        self.attach(rstd, "ln_rstd", (("sq", v["sq"]), ("eps", f"{prefix}eps")), (v["rstd"],), count=count)

        gr = self._bank_reads(n3, "gz", c3 - H - ml, d, v["gz"])
        p3 = [self.chain(n3, pt.LN_PASS3, c3, d, [gr[b]], {0: [(rstd, "full")]}) for b in range(len(gr))]
        self.attach(
            p3[-1][pt.LN_OUT_F_STAGE], "ln_pass3",
            (("scaled", v["gz"]), ("rstd", v["rstd"]), ("beta", beta), ("out_scale", out_scale)),
            (out_f, out_q),
        )
        self.write(n3, "resid", [c[pt.LN_OUT_F_STAGE] for c in p3], timing.writes["out_f"], d, value=out_f)
        self.write(n3, q_region, [c[pt.LN_OUT_Q_STAGE] for c in p3], timing.writes["out_q"], d, value=out_q)
        return p1, p2, p3

    def softmax(self, prefix, timing: pt.PassTiming, finals, acc):
        """Row max, exp with row sum (exp stored for reuse), then scaling by the reciprocal sum."""
        cfg = self.cfg
        H, ml = cfg.hop, cfg.mem_access_latency_cycles
        n1, n2, n3 = (f"{prefix}softmax{i}" for i in (1, 2, 3))
        v = {k: f"{prefix}{k}" for k in ("scores", "s_max", "e", "s_sum", "s_recip", "p_f", "p")}
        d, d1 = timing.duration, timing.first_duration
        c1, c2, c3 = timing.starts

        feeds = self._pass_feeds(n1, timing, finals, "acc_raw", acc)
        p1 = [self.chain(n1, pt.SOFTMAX_PASS1, c1, d1, f, vectors=d, reduce=True) for f in feeds]
        self.attach(
            p1[-1][pt.SOFTMAX_SCORES_STAGE], "softmax_pass1",
            (("acc", acc), ("scale", f"{prefix}scale.score")), (v["scores"], v["s_max"]),
        )
        self.write(
            n1, "scores", [c[pt.SOFTMAX_SCORES_STAGE] for c in p1], timing.writes["scores"], d1,
            value=v["scores"], vectors=d,
        )

        sr = self._bank_reads(n2, "scores", c2 - H - ml, d, v["scores"])
        row_max = [(c[-1], "full") for c in p1]
        p2 = [self.chain(n2, pt.SOFTMAX_PASS2, c2, d, [r], {0: row_max}, reduce=True) for r in sr]
        self.attach(
            p2[-1][pt.SOFTMAX_EXP_STAGE], "softmax_pass2",
            (("scores", v["scores"]), ("row_max", v["s_max"])), (v["e"], v["s_sum"]),
        )
        self.write(n2, "e", [c[pt.SOFTMAX_EXP_STAGE] for c in p2], timing.writes["e"], d, value=v["e"])
        op, start, duration = timing.steps[0]
        recip = self.step(n2, op, start, duration, [c[-1] for c in p2])
        self.attach(recip, "softmax_recip", (("sums", v["s_sum"]),), (v["s_recip"],))

        er = self._bank_reads(n3, "e", c3 - H - ml, d, v["e"])
        p3 = [self.chain(n3, pt.SOFTMAX_PASS3, c3, d, [r], {0: [(recip, "full")]}) for r in er]
        self.attach(
            p3[-1][pt.SOFTMAX_P_STAGE], "softmax_pass3",
            (("e", v["e"]), ("recip", v["s_recip"]), ("out_scale", f"{prefix}scale.p")), (v["p_f"], v["p"]),
        )
        self.write(n3, "p", [c[pt.SOFTMAX_P_STAGE] for c in p3], timing.writes["p"], d, value=v["p"])
        return p1, p2, p3

    def gelu(self, node, feed: pt.ChainFeed, finals, acc, out, in_scale, out_scale):
        H, ml = self.cfg.hop, self.cfg.mem_access_latency_cycles
        feeds = list(finals)
        if feed.raw_write_start is not None:
            self.write(node, "ff_raw", [feeds], feed.raw_write_start, feed.raw_duration, value=acc, vectors=feed.vectors)
            feeds = [self.read(node, "ff_raw", 0, feed.start - H - ml, feed.duration, value=acc)]
        stages = self.chain(node, feed.ops, feed.start, feed.duration, feeds, vectors=feed.vectors)
        self.attach(stages[-1], "gelu_chain", (("acc", acc), ("in_scale", in_scale), ("out_scale", out_scale)), (out,))
        self.write(node, "g", [stages[-1]], feed.write_start, feed.duration, value=out, vectors=feed.vectors)
        return stages

    def plane(self, index):
        return index % self.cfg.mxm_plane_count

    def self_attention(self, spec: ModelSpec, layer, plan: pt.LayerPlan):
        L = f"L{layer}."
        self.layer, self.block = layer, SA_BLOCK
        x = Operand(L + "x", "x")

        qk = self.gemm(L + "q_proj", plan.qk, plan.s_qk, x, [
            GemmTarget(self.plane(0), Operand(L + "w_q"), L + "q_acc", L + "b_q", node=L + "q_proj"),
            GemmTarget(self.plane(1), Operand(L + "w_k"), L + "k_acc", L + "b_k", node=L + "k_proj"),
        ])
        xd = plan.x_dequant
        stages = self.chain(L + "x_dequant", xd.ops, xd.start, xd.duration, qk.reads[: plan.qk.kt], vectors=xd.vectors)
        self.attach(stages[-1], "dequant", (("x", L + "x"), ("scale", L + "scale.x")), (L + "x_f",))
        self.write(
            L + "x_dequant", "resid", [stages[-1]], xd.write_start, xd.duration, value=L + "x_f", vectors=xd.vectors
        )
        for w in ("q", "k"):
            self.requant_chain(
                f"{L}{w}_requant", plan.q_requant, qk.finals[f"{L}{w}_acc"], w, f"{L}{w}_acc", L + w,
                f"{L}scale.{w}_in", f"{L}scale.{w}",
            )

        scores = self.gemm(
            L + "scores", plan.scores, plan.s_scores, Operand(L + "q", "q", HEADS, True, L + "q_heads"),
            [GemmTarget(
                self.plane(3), Operand(L + "k", "k", HEADS_T, True, L + "k_heads"), L + "s_acc",
                out_layout=STACKED,
            )],
        )
        self.softmax(L, plan.softmax, scores.finals[L + "s_acc"], L + "s_acc")

        vg = self.gemm(L + "v_proj", plan.qk, plan.s_v, x, [
            GemmTarget(self.plane(2), Operand(L + "w_v"), L + "v_acc", L + "b_v"),
        ])
        self.requant_chain(
            L + "v_requant", plan.v_requant, vg.finals[L + "v_acc"], "v", L + "v_acc", L + "v",
            L + "scale.v_in", L + "scale.v",
        )

        context = self.gemm(
            L + "context", plan.context, plan.s_context, Operand(L + "p", "p", STACKED),
            [GemmTarget(
                self.plane(0), Operand(L + "v", "v", HEADS, True, L + "v_heads"), L + "attn_acc",
                out_layout=CONCAT,
            )],
        )
        self.requant_chain(
            L + "attn_requant", plan.attn_requant, context.finals[L + "attn_acc"], "attn", L + "attn_acc",
            L + "attn", L + "scale.attn_in", L + "scale.attn",
        )

        out = self.gemm(L + "out_proj", plan.out_proj, plan.s_out, Operand(L + "attn", "attn"), [
            GemmTarget(self.plane(1), Operand(L + "w_o"), L + "o_acc", L + "b_o"),
        ])
        self.layernorm(
            L, "ln1", plan.ln1, out.finals[L + "o_acc"], L + "o_acc", L + "scale.o_in", L + "x_f",
            L + "sa_f", L + "sa", "sa", L + "scale.sa", spec.d_model,
        )

    def feed_forward(self, spec: ModelSpec, layer, plan: pt.LayerPlan):
        L = f"L{layer}."
        self.layer, self.block = layer, FF_BLOCK
        f1 = self.gemm(L + "ff1", plan.ff1, plan.s_ff1, Operand(L + "sa", "sa"), [
            GemmTarget(self.plane(2), Operand(L + "w_1"), L + "f1_acc", L + "b_1"),
        ])
        self.gelu(
            L + "gelu", plan.gelu, f1.finals[L + "f1_acc"], L + "f1_acc", L + "g",
            L + "scale.f1_in", L + "scale.gelu",
        )
        f2 = self.gemm(L + "ff2", plan.ff2, plan.s_ff2, Operand(L + "g", "g"), [
            GemmTarget(self.plane(3), Operand(L + "w_2"), L + "f2_acc", L + "b_2"),
        ])
        self.layernorm(
            L, "ln2", plan.ln2, f2.finals[L + "f2_acc"], L + "f2_acc", L + "scale.f2_in", L + "sa_f",
            L + "out_f", f"L{layer + 1}.x", "x", L + "scale.out", spec.d_model,
        )

    def finish(self, spec=None, outputs=(), predicted=None) -> Schedule:
        """Allocate memory, bind MEM ports to slices and validate."""
        cfg = self.cfg
        if self.instructions:
            self.region("program", len(self.instructions) * cfg.instruction_bytes, kind=INSTRUCTION)
        memory_map = alloc_memory(self.regions.values(), cfg)
        instructions = [
            replace(i, unit_id=memory_map.slices_of(i.region)[i.unit_id]) if i.unit_class == MEM else i
            for i in self.instructions
        ]
        total = max((i.end for i in instructions), default=0)
        schedule = Schedule(
            cfg, self.options, instructions, dict(self.ops), list(self.regions.values()), memory_map,
            dict(self.node_windows), list(self.chains), total if predicted is None else predicted,
            spec=spec, outputs=tuple(outputs),
        )
        conflicts = validate_schedule(schedule)
        if conflicts:
            raise ScheduleConflictError(
                f"schedule failed validation with {len(conflicts)} conflicts, first: {conflicts[0].message}",
                conflicts,
            )
        bt.logging.debug(f"scheduled {len(instructions)} instructions over {total} cycles")
        return schedule


def scratch_sizes(seq_len, d_model, d_ff, heads, install_streams=1) -> Dict[str, Tuple[int, int]]:
    """
    (bytes, banks) of every scratch region. Regions are reused by every layer. K and V
    are installed as weights, so each install stream reads its own copy.
    """
    S, act, scores = seq_len, seq_len * d_model, heads * seq_len * seq_len
    four, n = pt.PARALLEL_CHAINS, install_streams
    return {
        "x": (act, four),
        "resid": (act * WIDE_BYTES, four),
        "q": (act, 1),
        "k": (act * n, n),
        "v": (act * n, n),
        "attn": (act, 1),
        "scores": (scores * WIDE_BYTES, four),
        "e": (scores * WIDE_BYTES, four),
        "p": (scores, four),
        "z": (act * WIDE_BYTES, four),
        "gz": (act * WIDE_BYTES, four),
        "sa": (act, four),
        "g": (S * d_ff, 1),
        "acc_raw": (max(scores, act) * WIDE_BYTES, four),
        "ff_raw": (S * d_ff * WIDE_BYTES, 1),
    }


def _builder(cfg, options, seq_len, d_model, d_ff, heads):
    b = ScheduleBuilder(cfg or ArchConfig(), options)
    b.use_sizes(scratch_sizes(seq_len, d_model, d_ff, heads, b.cfg.mxm_install_streams))
    return b


def _first_stream(cfg: ArchConfig) -> int:
    """First stream cycle of a GEMM whose input was loaded before cycle 0."""
    return cfg.hop + max(cfg.mem_access_latency_cycles + cfg.hop, cfg.install_cycles)


def schedule_gelu_fused(rows, d_model, d_ff, cfg=None, options=ScheduleOptions()) -> Schedule:
    """FF1 GEMM with the GELU chain behind it, input preloaded in region `sa`."""
    cfg = cfg or ArchConfig()
    b = _builder(cfg, options, max(rows, 1), d_model, d_ff, 1)
    if rows == 0:
        return b.finish()
    b.block = FF_BLOCK
    b.preloaded("sa")
    timing = pt.GemmTiming.of(rows, d_model, d_ff, cfg, options)
    s0 = _first_stream(cfg)
    em = b.gemm("L0.ff1", timing, s0, Operand("L0.sa", "sa"), [GemmTarget(0, Operand("L0.w_1"), "L0.f1_acc", "L0.b_1")])
    feed = pt.feed_chain(
        timing.first_out(s0), timing.last_out(s0), timing.vectors_out, pt.GELU_CHAIN, cfg, options.fuse_gelu
    )
    b.gelu("L0.gelu", feed, em.finals["L0.f1_acc"], "L0.f1_acc", "L0.g", "L0.scale.f1_in", "L0.scale.gelu")
    return b.finish(outputs=("L0.f1_acc", "L0.g"))


def schedule_layernorm(rows, width, cfg=None, options=ScheduleOptions()) -> Schedule:
    """Output projection with layernorm behind it; the projection input and the residual are preloaded."""
    cfg = cfg or ArchConfig()
    b = _builder(cfg, options, rows, width, width, 1)
    b.preloaded("attn")
    b.preloaded("resid")
    timing = pt.GemmTiming.of(rows, width, width, cfg, options)
    s0 = _first_stream(cfg)
    em = b.gemm("L0.out_proj", timing, s0, Operand("L0.attn", "attn"), [
        GemmTarget(0, Operand("L0.w_o"), "L0.o_acc", "L0.b_o"),
    ])
    ln = pt.layernorm_passes(
        timing.first_out(s0), timing.last_out(s0), timing.vectors_out, cfg, overlap=options.overlap_layernorm
    )
    b.layernorm(
        "L0.", "ln1", ln, em.finals["L0.o_acc"], "L0.o_acc", "L0.scale.o_in", "L0.x_f",
        "L0.sa_f", "L0.sa", "sa", "L0.scale.sa", width,
    )
    return b.finish(outputs=("L0.sa_f", "L0.sa"))


def schedule_softmax(heads, seq_len, cfg=None, options=ScheduleOptions()) -> Schedule:
    """Three softmax passes over preloaded int32 scores of `heads` (S x S) blocks."""
    cfg = cfg or ArchConfig()
    b = _builder(cfg, options, seq_len, heads, heads, heads)
    b.preloaded("acc_raw")
    vectors = heads * seq_len * pt.cdiv(seq_len, cfg.lane_width)
    timing = pt.softmax_passes(
        0, 0, vectors, heads * seq_len, cfg, start=pt.load_start(cfg.hop, cfg)
    )
    b.softmax("L0.", timing, None, "L0.s_acc")
    return b.finish(outputs=("L0.p",))


def _spec_of(target) -> ModelSpec:
    return getattr(target, "spec", target)


def schedule_self_attention(target, cfg=None, options=ScheduleOptions()) -> Schedule:
    """Self-attention block of layer 0 (through LN1) for a ComputeGraph or ModelSpec."""
    cfg = cfg or ArchConfig()
    spec = _spec_of(target)
    b = _builder(cfg, options, spec.seq_len, spec.d_model, spec.d_ff, spec.heads)
    b.preloaded("x")
    plan = pt.plan_layer(spec, cfg, options)
    b.self_attention(spec, 0, plan)
    return b.finish(spec, outputs=("L0.sa_f", "L0.sa"))


def schedule_encoder(target, cfg=None, options=ScheduleOptions()) -> Schedule:
    """Full schedule of every layer of a ComputeGraph or ModelSpec."""
    cfg = cfg or ArchConfig()
    spec = _spec_of(target)
    b = _builder(cfg, options, spec.seq_len, spec.d_model, spec.d_ff, spec.heads)
    b.preloaded("x")
    plans = pt.plan_encoder(spec, cfg, options)
    for layer, plan in enumerate(plans):
        b.self_attention(spec, layer, plan)
        b.feed_forward(spec, layer, plan)
    predicted = spec.layers * pt.predict_layer_cycles(spec, cfg, options)
    return b.finish(spec, outputs=(f"L{spec.layers - 1}.out_f", f"L{spec.layers}.x"), predicted=predicted)


@dataclass(frozen=True)
class Conflict:
    kind: str
    cycle: int
    unit: Tuple
    iids: Tuple[int, ...]
    message: str


def validate_schedule(s: Schedule) -> List[Conflict]:
    """Every exclusivity and dependency-distance violation in `s`; empty when valid."""
    cfg, H = s.cfg, s.cfg.hop
    conflicts = []
    limits = {MXM: cfg.mxm_plane_count, VXM: cfg.vxm_alu_count, SXM: cfg.sxm_port_count, MEM: cfg.mem_slice_count}
    for i in s.instructions:
        if not 0 <= i.unit_id < limits[i.unit_class]:
            conflicts.append(Conflict("range", i.start, i.unit, (i.iid,), f"instruction {i.iid} uses missing unit {i.unit}"))
        for st in i.streams:
            if not 0 <= st < cfg.stream_count:
                conflicts.append(Conflict("range", i.start, ("stream", st, ""), (i.iid,), f"instruction {i.iid} uses missing stream {st}"))

    for key, spans in s.reservations().items():
        open_end, owner = None, None
        for start, end, iid in spans:
            if owner is not None and start < open_end:
                conflicts.append(Conflict(
                    "stream" if key[0] == "stream" else "unit", start, key, (owner, iid),
                    f"{key} claimed by instructions {owner} and {iid} at cycle {start}",
                ))
            if owner is None or end > open_end:
                open_end, owner = end, iid

    by_id = s.by_id()
    for c in s.instructions:
        for pid, kind in c.deps:
            p = by_id.get(pid)
            if p is None or kind not in DEP_KINDS:
                conflicts.append(Conflict("dependency", c.start, c.unit, (pid, c.iid), f"instruction {c.iid} has bad dependency {pid}:{kind}"))
                continue
            if kind == "full":
                need, got = p.end + H, c.start
            elif kind == "stream_head":
                need, got = p.first_out + H, c.start
            elif kind == "stream_tail":
                need, got = p.last_out + H, c.last_in
            else:
                need, got = p.end, c.start
            if got < need:
                conflicts.append(Conflict(
                    "dependency", got, c.unit, (pid, c.iid),
                    f"instruction {c.iid} ({c.opcode} {c.node}) needs {kind} of instruction {pid} "
                    f"by cycle {need}, got {got}",
                ))
    return conflicts


DUMP_COLUMNS = (
    "start_cycle", "duration", "unit_class", "unit_id", "opcode", "node_name", "stream_ids",
    "iid", "latency", "vectors", "operands", "region", "deps", "layer", "block",
)
_DUMP_DTYPES = (int, int, str, int, str, str, str, int, int, int, str, str, str, int, str)


def _ids(values):
    return ",".join(str(v) for v in values) or "-"


def schedule_table(s: Schedule) -> Table:
    """One row per instruction sorted by start cycle, ready for a Gantt chart."""
    rows = [
        (
            i.start, i.duration, i.unit_class, i.unit_id, i.opcode, i.node, _ids(i.result_streams),
            i.iid, i.latency, i.vector_count, _ids(i.operand_streams), i.region or "-",
            ";".join(f"{p}:{k}" for p, k in i.deps) or "-", i.layer, i.block.replace(" ", "_") or "-",
        )
        for i in sorted(s.instructions, key=lambda i: (i.start, i.iid))
    ]
    if not rows:
        return Table(names=DUMP_COLUMNS, dtype=_DUMP_DTYPES)
    return Table(rows=rows, names=DUMP_COLUMNS)


def dump_schedule(s: Schedule, path):
    schedule_table(s).write(str(path), format="ascii.tab", overwrite=True)
    bt.logging.info(f"wrote schedule dump with {len(s.instructions)} rows to {path}")


def _parse_ids(text):
    text = str(text)
    return () if text == "-" else tuple(int(v) for v in text.split(","))


def load_schedule_dump(path, cfg=None, options=ScheduleOptions()) -> Schedule:
    """Re-read a dump. The result carries timing only: no functional ops and no memory map."""
    cfg = cfg or ArchConfig()
    try:
        table = Table.read(str(path), format="ascii.tab")
        instructions = []
        for row in table:
            deps = () if str(row["deps"]) == "-" else tuple(
                (int(p), k) for p, k in (d.split(":") for d in str(row["deps"]).split(";"))
            )
            block = str(row["block"])
            instructions.append(Instruction(
                int(row["iid"]), str(row["unit_class"]), int(row["unit_id"]), str(row["opcode"]),
                str(row["node_name"]), int(row["start_cycle"]), int(row["duration"]), int(row["latency"]),
                vector_count=int(row["vectors"]), operand_streams=_parse_ids(row["operands"]),
                result_streams=_parse_ids(row["stream_ids"]), deps=deps,
                region=None if str(row["region"]) == "-" else str(row["region"]),
                block="" if block == "-" else block.replace("_", " "), layer=int(row["layer"]),
            ))
    except (KeyError, ValueError, TypeError, OSError, ConfigError) as exc:
        raise TensorFormatError(f"malformed schedule dump {path}: {exc}") from exc
    instructions.sort(key=lambda i: i.iid)
    return Schedule(
        cfg, options, instructions, {}, [], MemoryMap(cfg.mem_slice_count, cfg.mem_slice_bytes), {}, [],
        max((i.end for i in instructions), default=0),
    )
