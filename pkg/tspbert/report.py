# report.py
#
# Aggregation of a finished simulation into a CycleReport: per-unit busy cycles, the
# per-layer block breakdown, memory utilization and MXM idle time. Reports are saved as
# ECSV tables (one row per figure, scalars in the header) or JSON.

import heapq
import json
import re
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import astropy.units as u
import bittensor as bt
import numpy as np
from astropy.table import Table

from tspbert.errors import TensorFormatError
from tspbert.graph import FF_BLOCK, SA_BLOCK
from tspbert.machine import MXM, REGION_KINDS, SCRATCHPAD, unit_inventory

IDLE = "Idle"
BLOCKS = (SA_BLOCK, FF_BLOCK)
REPORT_FORMAT = "tspbert-report"
REPORT_VERSION = 1
COLUMNS = ("section", "name", "layer", "value", "fraction")


def unit_name(unit) -> str:
    cls, uid, port = unit
    return f"{cls}{uid}.{port}" if port else f"{cls}{uid}"


@dataclass
class CycleReport:
    total_cycles: int
    clock_hz: float
    unit_busy: Dict[str, int] = field(default_factory=dict)
    # layer -> block -> cycles, plus the unattributed total under IDLE
    breakdown: Dict[int, Dict[str, int]] = field(default_factory=dict)
    idle_cycles: int = 0
    memory: Dict[str, float] = field(default_factory=dict)
    memory_bytes: Dict[str, int] = field(default_factory=dict)
    scratch_high_water_bytes: int = 0
    mxm_idle_cycles: int = 0
    node_windows: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    # "p1" / "p99" -> block -> cycles, taken from the run at that latency percentile
    tail: Dict[str, Dict[str, int]] = field(default_factory=dict)

    @property
    def total_time(self) -> u.Quantity:
        return (self.total_cycles / (self.clock_hz * u.Hz)).to(u.us)

    @property
    def total_us(self) -> float:
        return float(self.total_time.value)

    def unit_idle(self) -> Dict[str, int]:
        return {name: self.total_cycles - busy for name, busy in self.unit_busy.items()}

    def block_totals(self) -> Dict[str, int]:
        """Cycles per block summed over layers, plus idle cycles."""
        totals = {block: 0 for block in BLOCKS}
        for blocks in self.breakdown.values():
            for block, cycles in blocks.items():
                totals[block] = totals.get(block, 0) + cycles
        totals[IDLE] = self.idle_cycles
        return totals

    def layer_cycles(self) -> List[int]:
        return [sum(self.breakdown[layer].values()) for layer in sorted(self.breakdown)]

    def encoder_fraction(self) -> float:
        """Share of all cycles attributed to a layer's self-attention or feed-forward block."""
        if self.total_cycles == 0:
            return 0.0
        totals = self.block_totals()
        return sum(totals[b] for b in BLOCKS) / self.total_cycles

    # serialization

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["breakdown"] = {str(k): v for k, v in self.breakdown.items()}
        out["node_windows"] = {k: list(v) for k, v in self.node_windows.items()}
        out["total_us"] = self.total_us
        return out

    @classmethod
    def from_dict(cls, data: Dict) -> "CycleReport":
        try:
            return cls(
                total_cycles=int(data["total_cycles"]),
                clock_hz=float(data["clock_hz"]),
                unit_busy={str(k): int(v) for k, v in data.get("unit_busy", {}).items()},
                breakdown={
                    int(layer): {str(b): int(c) for b, c in blocks.items()}
                    for layer, blocks in data.get("breakdown", {}).items()
                },
                idle_cycles=int(data.get("idle_cycles", 0)),
                memory={str(k): float(v) for k, v in data.get("memory", {}).items()},
                memory_bytes={str(k): int(v) for k, v in data.get("memory_bytes", {}).items()},
                scratch_high_water_bytes=int(data.get("scratch_high_water_bytes", 0)),
                mxm_idle_cycles=int(data.get("mxm_idle_cycles", 0)),
                node_windows={str(k): (int(v[0]), int(v[1])) for k, v in data.get("node_windows", {}).items()},
                tail={str(q): {str(b): int(c) for b, c in blocks.items()} for q, blocks in data.get("tail", {}).items()},
            )
        except (KeyError, ValueError, TypeError, IndexError, AttributeError) as exc:
            raise TensorFormatError(f"malformed report: {exc}") from exc

    def to_table(self) -> Table:
        total = max(self.total_cycles, 1)
        rows = []
        for name, busy in self.unit_busy.items():
            rows.append(("unit", name, -1, busy, busy / total))
        for layer in sorted(self.breakdown):
            for block, cycles in self.breakdown[layer].items():
                rows.append(("block", block, layer, cycles, cycles / total))
        rows.append(("block", IDLE, -1, self.idle_cycles, self.idle_cycles / total))
        for kind, fraction in self.memory.items():
            rows.append(("memory", kind, -1, self.memory_bytes.get(kind, 0), fraction))
        for node, (start, end) in self.node_windows.items():
            rows.append(("node_start", node, -1, start, 0.0))
            rows.append(("node_end", node, -1, end, 0.0))
        for q, blocks in self.tail.items():
            for block, cycles in blocks.items():
                rows.append(("tail", f"{q}:{block}", -1, cycles, cycles / total))
        table = Table(rows=rows, names=COLUMNS, dtype=(str, str, int, int, float)) if rows else Table(
            names=COLUMNS, dtype=(str, str, int, int, float)
        )
        table.meta.update(
            format=REPORT_FORMAT, version=REPORT_VERSION, total_cycles=int(self.total_cycles),
            clock_hz=float(self.clock_hz), scratch_high_water_bytes=int(self.scratch_high_water_bytes),
            mxm_idle_cycles=int(self.mxm_idle_cycles),
        )
        return table

    @classmethod
    def from_table(cls, table: Table) -> "CycleReport":
        meta = table.meta
        if meta.get("format") != REPORT_FORMAT:
            raise TensorFormatError(f"not a cycle report (format {meta.get('format')!r})")
        missing = [c for c in COLUMNS if c not in table.colnames]
        if missing:
            raise TensorFormatError(f"report lacks columns {missing}")
        data = {
            "total_cycles": meta["total_cycles"], "clock_hz": meta["clock_hz"],
            "scratch_high_water_bytes": meta.get("scratch_high_water_bytes", 0),
            "mxm_idle_cycles": meta.get("mxm_idle_cycles", 0),
            "unit_busy": {}, "breakdown": {}, "memory": {}, "memory_bytes": {}, "node_windows": {}, "tail": {},
        }
        starts = {}
        for row in table:
            section, name, layer, value = str(row["section"]), str(row["name"]), int(row["layer"]), int(row["value"])
            if section == "unit":
                data["unit_busy"][name] = value
            elif section == "block" and name == IDLE:
                data["idle_cycles"] = value
            elif section == "block":
                data["breakdown"].setdefault(layer, {})[name] = value
            elif section == "memory":
                data["memory"][name] = float(row["fraction"])
                data["memory_bytes"][name] = value
            elif section == "node_start":
                starts[name] = value
            elif section == "node_end":
                data["node_windows"][name] = (starts.get(name, value), value)
            elif section == "tail":
                q, _, block = name.partition(":")
                data["tail"].setdefault(q, {})[block] = value
            else:
                raise TensorFormatError(f"unknown report section {section!r}")
        return cls.from_dict(data)

    def summary(self) -> str:
        """Human-readable key: value sections."""
        total = self.total_cycles
        pct = (lambda c: 100.0 * c / total) if total else (lambda c: 0.0)
        lines = ["[total]", f"cycles: {total}", f"time_us: {self.total_us:.3f}", "", "[blocks]"]
        for block, cycles in self.block_totals().items():
            lines.append(f"{block}: {cycles} cycles ({pct(cycles):.1f}%)")
        lines.append(f"encoder blocks: {100.0 * self.encoder_fraction():.1f}%")
        if self.breakdown:
            lines += ["", "[layers]"]
            for layer in sorted(self.breakdown):
                parts = ", ".join(f"{b}: {c}" for b, c in self.breakdown[layer].items())
                lines.append(f"layer {layer}: {parts}")
        for q, blocks in sorted(self.tail.items()):
            lines += ["", f"[{q} latency]"]
            lines += [f"{block}: {cycles} cycles ({pct(cycles):.1f}%)" for block, cycles in blocks.items()]
        lines += ["", "[memory]"]
        for kind, fraction in self.memory.items():
            lines.append(f"{kind}: {100.0 * fraction:.2f}%")
        lines.append(f"scratchpad high water: {self.scratch_high_water_bytes} bytes")
        lines += ["", "[units]", f"mxm idle: {self.mxm_idle_cycles} cycles"]
        by_class = {}
        for name, busy in self.unit_busy.items():
            cls = re.match(r"[A-Z]+", name).group(0)
            by_class.setdefault(cls, []).append(busy)
        for cls, busy in by_class.items():
            mean = float(np.mean(busy)) if busy else 0.0
            lines.append(f"{cls}: mean busy {pct(mean):.1f}% over {len(busy)} units")
        return "\n".join(lines) + "\n"


def write_report(report: CycleReport, path):
    """ECSV for `.ecsv` paths, JSON otherwise."""
    path = str(path)
    if path.endswith(".ecsv"):
        report.to_table().write(path, format="ascii.ecsv", overwrite=True)
    else:
        with open(path, "w") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    bt.logging.info(f"wrote cycle report to {path}")


def read_report(path) -> CycleReport:
    path = str(path)
    try:
        if path.endswith(".ecsv"):
            return CycleReport.from_table(Table.read(path, format="ascii.ecsv"))
        with open(path) as f:
            return CycleReport.from_dict(json.load(f))
    except (TensorFormatError, OSError):
        raise
    except Exception as exc:
        raise TensorFormatError(f"malformed report {path}: {exc}") from exc


def attribute_blocks(instructions, total: int) -> Tuple[Dict[int, Dict[str, int]], int]:
    """
    Assign every cycle in [0, total) to one (layer, block): the block of the active
    instruction that completes latest. Cycles with nothing active are idle.
    """
    events = sorted({0, total} | {i.start for i in instructions} | {i.end for i in instructions})
    starting = {}
    for i in instructions:
        starting.setdefault(i.start, []).append(i)
    breakdown: Dict[int, Dict[str, int]] = {}
    idle, heap = 0, []
    for a, b in zip(events, events[1:]):
        if a >= total:
            break
        for i in starting.get(a, ()):
            heapq.heappush(heap, (-i.end, -i.iid, i.layer, i.block or SA_BLOCK))
        while heap and -heap[0][0] <= a:
            heapq.heappop(heap)
        span = min(b, total) - a
        if not heap:
            idle += span
            continue
        _, _, layer, block = heap[0]
        blocks = breakdown.setdefault(layer, {bk: 0 for bk in BLOCKS})
        blocks[block] = blocks.get(block, 0) + span
    return breakdown, idle


def merged_length(intervals: Iterable[Tuple[int, int]]) -> int:
    """Cycles covered by the union of [start, end) intervals."""
    covered, reach = 0, None
    for start, end in sorted(intervals):
        if reach is None or start >= reach:
            covered += end - start
            reach = end
        elif end > reach:
            covered += end - reach
            reach = end
    return covered


def mxm_idle_cycles(instructions) -> int:
    """Cycles between the first and last MXM stream burst in which no plane streams."""
    bursts = [(i.start, i.busy_end) for i in instructions if i.unit_class == MXM and i.opcode == "matmul_stream"]
    if not bursts:
        return 0
    span = max(e for _, e in bursts) - min(s for s, _ in bursts)
    return span - merged_length(bursts)


def busy_units(instructions, unit_class: str, start: int, end: int) -> Set[int]:
    """Ids of `unit_class` units reserved at some point of [start, end)."""
    return {i.unit_id for i in instructions if i.unit_class == unit_class and i.start < end and start < i.busy_end}


def scratch_high_water(instructions, regions) -> int:
    """
    Peak bytes of scratch regions live at once. A region is live from its first write
    (or cycle 0 when read before any write) to its last read.
    """
    sizes = {r.name: r.nbytes for r in regions if r.kind == SCRATCHPAD}
    first, last = {}, {}
    for i in instructions:
        if i.region not in sizes:
            continue
        if i.opcode == "write":
            first[i.region] = min(first.get(i.region, i.start), i.start)
        last[i.region] = max(last.get(i.region, i.end), i.end)
    for i in instructions:
        if i.region in sizes and i.opcode == "read" and i.start < first.get(i.region, i.start + 1):
            first[i.region] = 0
    deltas = []
    for name, begin in first.items():
        deltas += [(begin, sizes[name]), (last[name], -sizes[name])]
    live = peak = 0
    for _, delta in sorted(deltas, key=lambda d: (d[0], d[1])):
        live += delta
        peak = max(peak, live)
    return peak


def build_report(state, schedule) -> CycleReport:
    """Aggregate a finished MachineState. Only instructions that retired are counted."""
    done = [i for i in schedule.instructions if i.iid in state.retired]
    total = max((state.retired[i.iid] for i in done), default=0)
    busy = {unit_name(unit): 0 for unit in unit_inventory(schedule.cfg)}
    for i in done:
        busy[unit_name(i.unit)] = busy.get(unit_name(i.unit), 0) + i.duration
    breakdown, idle = attribute_blocks(done, total)
    mm = schedule.memory_map
    windows = {}
    for i in done:
        lo, hi = windows.get(i.node, (state.fired[i.iid], state.retired[i.iid]))
        windows[i.node] = (min(lo, state.fired[i.iid]), max(hi, state.retired[i.iid]))
    return CycleReport(
        total_cycles=total,
        clock_hz=float(schedule.cfg.clock_hz),
        unit_busy=busy,
        breakdown=breakdown,
        idle_cycles=idle,
        memory=mm.fractions(),
        memory_bytes={**{kind: mm.bytes_of(kind) for kind in REGION_KINDS}, "unused": mm.capacity_bytes - sum(
            mm.bytes_of(kind) for kind in REGION_KINDS
        )},
        scratch_high_water_bytes=scratch_high_water(done, schedule.regions),
        mxm_idle_cycles=mxm_idle_cycles(done),
        node_windows=windows,
    )


def percentile_run(reports: Sequence[CycleReport], q: float) -> CycleReport:
    """The report whose latency sits at percentile `q` (nearest rank)."""
    ranked = sorted(reports, key=lambda r: r.total_cycles)
    index = min(len(ranked) - 1, max(0, int(np.ceil(q / 100.0 * len(ranked))) - 1))
    return ranked[index]


def with_tail(report: CycleReport, reports: Optional[Sequence[CycleReport]] = None) -> CycleReport:
    """Attach the 1st and 99th percentile block breakdowns of repeated runs."""
    reports = list(reports or [report])
    for q in (1, 99):
        report.tail[f"p{q}"] = percentile_run(reports, q).block_totals()
    return report
