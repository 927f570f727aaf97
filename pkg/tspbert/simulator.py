# simulator.py
#
# Cycle-level executor of a static schedule. Every instruction fires at its start
# cycle and retires at its end cycle; functional effects run through the same kernels
# as the reference model, so results are bit-identical by construction. Anything that
# would be a runtime conflict on real hardware aborts with a HazardError.

import bisect
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import bittensor as bt
import numpy as np
from scipy import stats

from tspbert import kernels
from tspbert.errors import ConfigError, HazardError, OracleMismatchError, ScheduleConflictError
from tspbert.machine import VXM, ArchConfig, Instruction
from tspbert.reference import EncoderParams, EncoderTrace, split_heads
from tspbert.report import CycleReport, build_report
from tspbert.scheduler import CONCAT, HEADS, HEADS_T, STACKED, FuncOp, Schedule, validate_schedule
from tspbert.tensor import QuantTensor, to_int32
from tspbert.utils.logging import log_block_events


@dataclass
class MemoryImage:
    """
    Everything the machine holds before cycle 0: named constants (weights, biases,
    normalization parameters, scales) and the contents of preloaded scratch regions.
    """

    values: Dict[str, object] = field(default_factory=dict)
    regions: Dict[str, Tuple[str, np.ndarray]] = field(default_factory=dict)

    def preload(self, region: str, name: str, data) -> "MemoryImage":
        self.regions[region] = (name, np.asarray(data))
        self.values[name] = np.asarray(data)
        return self


def layer_values(layer: int, x_scale, p: EncoderParams) -> Dict[str, object]:
    """Constants of one layer under the names the scheduler uses."""
    L = f"L{layer}."
    s = p.scales
    x_scale = np.float32(x_scale)
    values = {
        L + "scale.x": x_scale,
        L + "scale.q_in": x_scale * p.w_q.scale,
        L + "scale.k_in": x_scale * p.w_k.scale,
        L + "scale.v_in": x_scale * p.w_v.scale,
        L + "scale.q": s.q,
        L + "scale.k": s.k,
        L + "scale.v": s.v,
        L + "scale.score": p.score_scale,
        L + "scale.p": s.p,
        L + "scale.attn_in": s.p * s.v,
        L + "scale.attn": s.attn,
        L + "scale.o_in": s.attn * p.w_o.scale,
        L + "scale.sa": s.sa,
        L + "scale.f1_in": s.sa * p.w_1.scale,
        L + "scale.gelu": s.gelu,
        L + "scale.f2_in": s.gelu * p.w_2.scale,
        L + "scale.out": s.out,
        L + "eps": p.eps,
    }
    for name in ("w_q", "w_k", "w_v", "w_o", "w_1", "w_2"):
        values[L + name] = getattr(p, name).data
    for name in ("b_q", "b_k", "b_v", "b_o", "b_1", "b_2", "gamma1", "beta1", "gamma2", "beta2"):
        values[L + name] = getattr(p, name)
    return values


def memory_image(x: QuantTensor, layers) -> MemoryImage:
    """Constants of every layer plus the int8 input preloaded in region `x`."""
    image = MemoryImage()
    scale = x.scale
    for layer, p in enumerate(layers):
        image.values.update(layer_values(layer, scale, p))
        scale = p.scales.out
    return image.preload("x", "L0.x", x.data)


def _view(value, layout, groups, group):
    """Operand block `group` of `value` as the MXM sees it."""
    if layout == HEADS:
        return split_heads(value, groups)[group]
    if layout == HEADS_T:
        return split_heads(value, groups)[group].T
    if layout == STACKED:
        return value[group]
    return value


@dataclass
class MachineState:
    """
    Architectural state between cycles. Unit claims are kept as the cycle they free
    up, so a second claim before then is a hazard. Every vector put on a stream takes
    that stream's slot for one cycle; `slots` keeps the runs of claimed slots per
    stream and `pipelines` the cycle each ALU's pipeline has drained.
    """

    schedule: Schedule
    cycle: int = 0
    values: Dict[str, object] = field(default_factory=dict)
    memory: Dict[str, Tuple[str, np.ndarray]] = field(default_factory=dict)
    busy: Dict[Tuple, Tuple[int, int]] = field(default_factory=dict)
    streams: Dict[int, List[Tuple[int, int, int]]] = field(default_factory=lambda: defaultdict(list))
    slots: Dict[int, List[Tuple[int, int, int]]] = field(default_factory=lambda: defaultdict(list))
    emitted: Dict[int, Tuple[int, int]] = field(default_factory=dict)
    pipelines: Dict[int, Tuple[int, int]] = field(default_factory=dict)
    fired: Dict[int, int] = field(default_factory=dict)
    retired: Dict[int, int] = field(default_factory=dict)
    # (plane, buffer) -> (install iid, (group, n, k), tile)
    buffers: Dict[Tuple[int, int], Tuple[int, Tuple[int, int, int], np.ndarray]] = field(default_factory=dict)
    installing: Dict[Tuple[int, int], int] = field(default_factory=dict)
    bursts: Dict[Tuple[int, int], Tuple[int, int]] = field(default_factory=dict)
    products: Dict[int, List[Tuple[FuncOp, np.ndarray]]] = field(default_factory=dict)
    accumulators: Dict[Tuple[str, int, int], np.ndarray] = field(default_factory=dict)
    results: Dict[str, np.ndarray] = field(default_factory=dict)
    by_start: Dict[int, List[Instruction]] = field(default_factory=dict)
    by_end: Dict[int, List[Instruction]] = field(default_factory=dict)
    by_id: Dict[int, Instruction] = field(default_factory=dict)

    @classmethod
    def start(cls, schedule: Schedule, image: Optional[MemoryImage] = None) -> "MachineState":
        image = image or MemoryImage()
        state = cls(schedule, values=dict(image.values), memory=dict(image.regions))
        by_start, by_end = defaultdict(list), defaultdict(list)
        for inst in sorted(schedule.instructions, key=lambda i: i.iid):
            by_start[inst.start].append(inst)
            by_end[inst.end].append(inst)
        state.by_start, state.by_end = dict(by_start), dict(by_end)
        state.by_id = schedule.by_id()
        return state

    @property
    def horizon(self) -> int:
        return self.schedule.total_cycles

    @property
    def completed(self) -> int:
        """Last retirement cycle observed so far."""
        return max(self.retired.values(), default=0)

    @property
    def event_cycles(self) -> List[int]:
        return sorted(set(self.by_start) | set(self.by_end))

    def value(self, name, inst: Instruction):
        try:
            return self.values[name]
        except KeyError:
            raise HazardError(
                f"instruction {inst.iid} ({inst.opcode} {inst.node}) needs {name} at cycle {self.cycle} "
                f"but it was never produced",
                self.cycle, (inst.unit,),
            ) from None


def _hazard(state, message, *units):
    raise HazardError(f"cycle {state.cycle}: {message}", state.cycle, units)


def _check_deps(state: MachineState, inst: Instruction):
    H, c = state.schedule.cfg.hop, state.cycle
    for pid, kind in inst.deps:
        p = state.by_id[pid]
        if kind in ("full", "weights"):
            done = state.retired.get(pid)
            need = None if done is None else done + (H if kind == "full" else 0)
            ok = need is not None and need <= c
        else:
            began = state.fired.get(pid)
            if began is None:
                ok, need = False, None
            elif kind == "stream_head":
                need = began + p.latency + H
                ok = need <= c
            else:
                need = began + p.latency + p.duration - 1 + H
                ok = need <= c + inst.duration - 1
        if not ok:
            _hazard(
                state,
                f"instruction {inst.iid} ({inst.opcode} {inst.node}) fired before its {kind} input "
                f"{pid} ({p.opcode} {p.node}) was ready",
                inst.unit, p.unit,
            )


def _claim(state: MachineState, inst: Instruction):
    c = state.cycle
    held = state.busy.get(inst.unit)
    if held is not None and held[0] > c:
        _hazard(state, f"{inst.unit} is busy with instruction {held[1]} when {inst.iid} fires", inst.unit)
    state.busy[inst.unit] = (c + inst.duration, inst.iid)
    first, stop = c + inst.latency, c + inst.latency + inst.duration
    if inst.unit_class == VXM:
        drain = state.pipelines.get(inst.unit_id)
        if drain is not None and drain[0] > first:
            _hazard(
                state, f"ALU {inst.unit_id} still drains instruction {drain[1]} when {inst.iid} reaches its output",
                inst.unit,
            )
        state.pipelines[inst.unit_id] = (stop, inst.iid)
    if inst.result_streams:
        state.emitted[inst.iid] = (first, stop - 1)
    for s in inst.result_streams:
        live = [run for run in state.streams[s] if run[1] > c]
        for other_first, other_stop, other in live:
            if other_first < stop and first < other_stop:
                _hazard(
                    state,
                    f"stream {s} slot at cycle {max(first, other_first)} claimed by instructions {other} and {inst.iid}",
                    ("stream", s, ""), inst.unit,
                )
        live.append((first, stop, inst.iid))
        state.streams[s] = live
        state.slots[s].append((first, stop, inst.iid))


def _burst_contract(state: MachineState, inst: Instruction):
    """A plane emits one result vector per streamed row, starting one pipeline depth after the first."""
    depth = state.schedule.cfg.mxm_pipeline_depth_cycles
    if inst.latency != depth:
        _hazard(state, f"matmul {inst.iid} has latency {inst.latency}, the plane pipeline is {depth} deep", inst.unit)
    for op in state.schedule.ops.get(inst.iid, ()):
        if op.kernel == "macc" and op.const("rows") != inst.duration:
            _hazard(
                state, f"matmul {inst.iid} streams {inst.duration} cycles for {op.const('rows')} rows", inst.unit
            )


def _first_uncovered(windows, lo, hi):
    """First cycle of [lo, hi) outside the sorted, merged `windows`, or None."""
    idx = bisect.bisect_right(windows, (lo, float("inf"))) - 1
    if idx >= 0 and windows[idx][1] > lo:
        lo = windows[idx][1]
    return lo if lo < hi else None


def unconsumed_vectors(state: MachineState) -> List[Tuple[int, int, int]]:
    """
    (stream, cycle, producer) of each vector run that arrives while no instruction reads
    that stream. Only the first lost cycle of a run is reported.
    """
    H = state.schedule.cfg.hop
    readers = defaultdict(list)
    for iid, began in state.fired.items():
        inst = state.by_id[iid]
        for s in inst.operand_streams:
            readers[s].append((began, began + inst.duration))
    lost = []
    for s, runs in sorted(state.slots.items()):
        merged = []
        for lo, hi in sorted(readers.get(s, ())):
            if merged and lo <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
            else:
                merged.append((lo, hi))
        for first, stop, iid in runs:
            cycle = _first_uncovered(merged, first + H, stop + H)
            if cycle is not None:
                lost.append((s, cycle, iid))
    return lost


def _load(state: MachineState, inst: Instruction, op: FuncOp):
    region, expected = op.const("region"), op.outputs[0]
    if region not in state.memory:
        _hazard(state, f"uninitialized read of region {region} by instruction {inst.iid}", inst.unit)
    name, data = state.memory[region]
    if name != expected:
        _hazard(
            state, f"instruction {inst.iid} read {name} from region {region}, expected {expected}", inst.unit
        )
    state.values[expected] = data


def _install_fire(state: MachineState, inst: Instruction, op: FuncOp):
    key = (op.const("plane"), op.const("buffer"))
    burst = state.bursts.get(key)
    if burst is not None and burst[0] > state.cycle:
        _hazard(
            state, f"weight buffer {key} reinstalled by {inst.iid} during the burst of {burst[1]}", inst.unit
        )
    state.installing[key] = inst.iid


def _install_retire(state: MachineState, inst: Instruction, op: FuncOp):
    plane, buffer, group, n, k = (op.const(c) for c in ("plane", "buffer", "group", "n", "k"))
    L = op.const("lane_width")
    weights = _view(np.asarray(state.value(dict(op.args)["weights"], inst)), op.const("layout"), op.const("groups"), group)
    state.buffers[(plane, buffer)] = (inst.iid, (group, n, k), weights[k * L:(k + 1) * L, n * L:(n + 1) * L])
    state.installing.pop((plane, buffer), None)


def _macc_fire(state: MachineState, inst: Instruction, op: FuncOp):
    """Multiply the activation block by the installed tile; the product lands at retire."""
    key = (op.const("plane"), op.const("buffer"))
    if key in state.installing:
        _hazard(state, f"weight buffer {key} is still being installed when {inst.iid} streams", inst.unit)
    if key not in state.buffers:
        _hazard(state, f"instruction {inst.iid} streams through empty weight buffer {key}", inst.unit)
    _, tile_id, tile = state.buffers[key]
    group, n, k, L = op.const("group"), op.const("n"), op.const("k"), op.const("lane_width")
    if tile_id != (group, n, k):
        _hazard(state, f"weight buffer {key} holds tile {tile_id}, instruction {inst.iid} expects {(group, n, k)}", inst.unit)
    act = _view(np.asarray(state.value(dict(op.args)["act"], inst)), op.const("layout"), op.const("groups"), group)
    block = act[:, k * L:(k + 1) * L]
    if block.shape[-1] != tile.shape[0]:
        _hazard(state, f"instruction {inst.iid} streams {block.shape} through a {tile.shape} tile", inst.unit)
    state.bursts[key] = (state.cycle + inst.duration, inst.iid)
    state.products.setdefault(inst.iid, []).append((op, kernels.macc(block, tile)))


def _macc_retire(state: MachineState, inst: Instruction, op: FuncOp, product):
    args = dict(op.args)
    out, group, n, L = op.outputs[0], op.const("group"), op.const("n"), op.const("lane_width")
    key = (out, group, n)
    acc = product if op.const("k") == 0 else state.accumulators[key] + product
    if not op.const("final"):
        state.accumulators[key] = acc
        return
    state.accumulators.pop(key, None)
    if "bias" in args:
        acc = acc + np.asarray(state.value(args["bias"], inst), dtype=np.int64)[n * L:(n + 1) * L]
    result = state.results.get(out)
    if result is None:
        shape = (op.const("groups"), op.const("rows"), op.const("width"))
        result = state.results[out] = np.zeros(shape, dtype=np.int32)
    result[group, :, n * L:(n + 1) * L] = to_int32(acc)
    if op.const("last"):
        layout = op.const("out_layout")
        if layout == STACKED:
            value = result
        elif layout == CONCAT:
            value = np.ascontiguousarray(result.transpose(1, 0, 2).reshape(result.shape[1], -1))
        else:
            value = result[0]
        state.values[out] = value
        del state.results[out]


def _kernel(state: MachineState, inst: Instruction, op: FuncOp):
    try:
        fn = kernels.KERNELS[op.kernel]
    except KeyError:
        raise HazardError(f"unknown kernel {op.kernel!r} on instruction {inst.iid}", state.cycle, (inst.unit,)) from None
    kwargs = {arg: state.value(name, inst) for arg, name in op.args}
    kwargs.update(op.consts)
    results = fn(**kwargs)
    for name, result in zip(op.outputs, results):
        state.values[name] = result


def _fire(state: MachineState, inst: Instruction):
    _check_deps(state, inst)
    _claim(state, inst)
    if inst.opcode == "matmul_stream":
        _burst_contract(state, inst)
    state.fired[inst.iid] = state.cycle
    for op in state.schedule.ops.get(inst.iid, ()):
        if op.kernel == "load":
            _load(state, inst, op)
        elif op.kernel == "install":
            _install_fire(state, inst, op)
        elif op.kernel == "macc":
            _macc_fire(state, inst, op)


def _retire(state: MachineState, inst: Instruction):
    if inst.iid not in state.fired:
        _hazard(state, f"instruction {inst.iid} retires without having fired", inst.unit)
    state.retired[inst.iid] = state.cycle
    products = iter(state.products.pop(inst.iid, ()))
    for op in state.schedule.ops.get(inst.iid, ()):
        if op.kernel == "load":
            continue
        if op.kernel == "install":
            _install_retire(state, inst, op)
        elif op.kernel == "macc":
            _, product = next(products)
            _macc_retire(state, inst, op, product)
        elif op.kernel == "store":
            name = dict(op.args)["value"]
            state.memory[op.const("region")] = (name, state.value(name, inst))
        else:
            _kernel(state, inst, op)


def step(state: MachineState) -> MachineState:
    """
    Advance one cycle: retire the instructions ending now, then fire the ones
    starting now.

    Parameters
    ----------
    state : MachineState
        State at the beginning of `state.cycle`; updated in place.

    Returns
    -------
    MachineState
        The same object, one cycle later.
    """
    if state.cycle > state.horizon:
        raise HazardError(f"cycle {state.cycle} is past the last completion {state.horizon}", state.cycle)
    for inst in state.by_end.get(state.cycle, ()):
        _retire(state, inst)
    for inst in state.by_start.get(state.cycle, ()):
        _fire(state, inst)
    state.cycle += 1
    return state


def execute(schedule: Schedule, image: Optional[MemoryImage] = None) -> MachineState:
    """
    Run `schedule` to completion, skipping cycles in which nothing fires or retires.
    A vector that reaches a stream nobody reads at that cycle is lost, which is a hazard.
    """
    state = MachineState.start(schedule, image)
    for cycle in state.event_cycles:
        state.cycle = cycle
        step(state)
    lost = unconsumed_vectors(state)
    if lost:
        s, cycle, iid = lost[0]
        inst = state.by_id[iid]
        state.cycle = cycle
        _hazard(
            state, f"vector of instruction {iid} ({inst.opcode} {inst.node}) on stream {s} is never consumed",
            ("stream", s, ""), inst.unit,
        )
    state.cycle = state.horizon
    return state


def run(
    schedule: Schedule, image: Optional[MemoryImage] = None, cfg: Optional[ArchConfig] = None, events_logger=None,
    all_values: bool = False,
) -> Tuple[Dict[str, object], CycleReport]:
    """
    Validate and simulate a schedule.

    Returns
    -------
    outputs : dict
        The schedule's declared outputs by value name, or every value the run
        produced when `all_values` is set.
    report : CycleReport
    """
    if cfg is not None and cfg != schedule.cfg:
        raise ConfigError("schedule was built for a different machine configuration")
    conflicts = validate_schedule(schedule)
    if conflicts:
        raise ScheduleConflictError(
            f"refusing to run an invalid schedule, first conflict: {conflicts[0].message}", conflicts
        )
    state = execute(schedule, image)
    outputs = {}
    for name in schedule.outputs:
        if name not in state.values:
            raise HazardError(f"output {name} was never produced", state.cycle)
        outputs[name] = state.values[name]
    if all_values:
        outputs = dict(state.values)
    report = build_report(state, schedule)
    log_block_events(events_logger, schedule)
    bt.logging.debug(f"simulated {len(schedule.instructions)} instructions in {report.total_cycles} cycles")
    return outputs, report


def trace_names(trace: EncoderTrace) -> Dict[str, np.ndarray]:
    """Reference values under simulator names. A layer's int8 output is the next layer's `x`."""
    named = {}
    for layer, values in enumerate(trace.layers):
        for key, value in values.items():
            named[f"L{layer + 1}.x" if key == "x" else f"L{layer}.{key}"] = value
    return named


def check_oracle(values: Dict[str, object], trace: EncoderTrace, required=()) -> int:
    """
    Compare every simulated value the reference also produced, bit for bit.
    Returns the number of values compared.
    """
    expected = trace_names(trace)
    missing = [name for name in required if name not in values]
    if missing:
        raise OracleMismatchError(f"simulation did not produce {', '.join(missing)}")
    compared = 0
    for name, want in expected.items():
        if name not in values:
            continue
        got, want = np.asarray(values[name]), np.asarray(want)
        if got.shape != want.shape or got.dtype != want.dtype or not np.array_equal(got, want):
            detail = f"shape {got.shape} vs {want.shape}"
            if got.shape == want.shape:
                diff = np.abs(got.astype(np.float64) - want.astype(np.float64))
                detail = f"max abs difference {float(diff.max())} at {np.unravel_index(diff.argmax(), diff.shape)}"
            raise OracleMismatchError(f"{name} differs from the reference: {detail}")
        compared += 1
    if compared == 0:
        raise OracleMismatchError("no simulated value has a reference counterpart")
    return compared


def latency_statistics(schedule: Schedule, image: Optional[MemoryImage] = None, runs: int = 1000):
    """
    Repeat a simulation and summarize its latency.

    Returns a dict with the run count, mean and standard deviation, and the 1st, 95th
    and 99th percentiles, each in cycles and microseconds.
    """
    if runs < 1:
        raise ConfigError(f"need at least one run, got {runs}")
    return summarize_latency([execute(schedule, image).completed for _ in range(runs)], schedule.cfg)


def summarize_latency(cycles, cfg: ArchConfig):
    """Mean, standard deviation and 1st/95th/99th percentiles of run latencies, in cycles and microseconds."""
    runs = len(cycles)
    cycles = np.asarray(cycles, dtype=np.float64)
    summary = stats.describe(cycles) if runs > 1 else None
    std = float(np.sqrt(summary.variance)) if summary is not None else 0.0
    out = {"runs": runs, "mean": float(np.mean(cycles)), "std": std}
    for q in (1, 95, 99):
        out[f"p{q}"] = float(stats.scoreatpercentile(cycles, q))
    for key in ("mean", "std", "p1", "p95", "p99"):
        out[f"{key}_us"] = float(cfg.cycles_to_time(out[key]).value)
    return out
