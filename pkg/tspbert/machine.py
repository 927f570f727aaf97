# machine.py
#
# Parameterized description of the streaming processor: units, streams, memory and
# latencies, plus the instruction vocabulary shared by the scheduler and the simulator.

import math
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Iterable, List, Optional, Tuple

import astropy.units as u
import bittensor as bt

from tspbert import constants
from tspbert.errors import ConfigError
from tspbert.tensor import Shape

MXM = "MXM"
VXM = "VXM"
SXM = "SXM"
MEM = "MEM"
UNIT_CLASSES = (MXM, VXM, SXM, MEM)

ALU_OPCODES = tuple(constants.ALU_LATENCY)
OPCODES = ("read", "write", "install_weights", "matmul_stream", "reorder") + ALU_OPCODES

CONSTANT = "constant"
SCRATCHPAD = "scratchpad"
INSTRUCTION = "instruction"
REGION_KINDS = (CONSTANT, SCRATCHPAD, INSTRUCTION)


@dataclass(frozen=True)
class ArchConfig:
    """
    Machine description. Plane geometry and the weight install time default to the
    lane width when left unset.
    """

    lane_width: int = constants.LANE_WIDTH
    vxm_alu_count: int = constants.VXM_ALU_COUNT
    mxm_plane_count: int = constants.MXM_PLANE_COUNT
    mxm_plane_rows: Optional[int] = None
    mxm_plane_cols: Optional[int] = None
    mem_slice_count: int = constants.MEM_SLICE_COUNT
    mem_slice_bytes: int = constants.MEM_SLICE_BYTES
    streams_per_direction: int = constants.STREAMS_PER_DIRECTION
    sxm_port_count: int = constants.SXM_PORT_COUNT
    stream_hop_latency_cycles: int = constants.STREAM_HOP_LATENCY
    mem_access_latency_cycles: int = constants.MEM_ACCESS_LATENCY
    mxm_install_latency_cycles: Optional[int] = None
    mxm_install_streams: int = constants.MXM_INSTALL_STREAMS
    mxm_pipeline_depth_cycles: int = constants.MXM_PIPELINE_DEPTH
    sxm_reorder_latency_cycles: int = constants.SXM_REORDER_LATENCY
    instruction_bytes: int = constants.INSTRUCTION_BYTES
    clock_hz: float = constants.CLOCK_HZ
    alu_latency: Dict[str, int] = field(default_factory=lambda: dict(constants.ALU_LATENCY))

    def __post_init__(self):
        for name in ("mxm_plane_rows", "mxm_plane_cols", "mxm_install_latency_cycles"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, self.lane_width)
        latency = dict(constants.ALU_LATENCY)
        latency.update(self.alu_latency)
        object.__setattr__(self, "alu_latency", latency)

    @property
    def hop(self) -> int:
        return self.stream_hop_latency_cycles

    @property
    def install_cycles(self) -> int:
        """Cycles to install one weight tile with its rows split over the install streams."""
        return -(-self.mxm_install_latency_cycles // self.mxm_install_streams)

    @property
    def stream_count(self) -> int:
        return 2 * self.streams_per_direction

    @property
    def capacity_bytes(self) -> int:
        return self.mem_slice_count * self.mem_slice_bytes

    def latency(self, opcode: str) -> int:
        try:
            return self.alu_latency[opcode]
        except KeyError:
            raise ConfigError(f"no latency configured for ALU opcode {opcode!r}") from None

    def cycles_to_time(self, cycles) -> u.Quantity:
        """Cycle count as an astropy Quantity in microseconds."""
        return (cycles / (self.clock_hz * u.Hz)).to(u.us)


def validate_config(c: ArchConfig) -> List[str]:
    """Every invariant violation of `c`; empty when the configuration is usable."""
    errors = []
    if c.lane_width < 4:
        errors.append("lane width must be at least 4")
    if c.lane_width % 4:
        errors.append("lane width not divisible by 4")
    for name in (
        "vxm_alu_count", "mxm_plane_count", "mxm_plane_rows", "mxm_plane_cols",
        "mem_slice_count", "mem_slice_bytes", "streams_per_direction", "sxm_port_count",
        "mxm_install_streams", "instruction_bytes",
    ):
        if getattr(c, name) < 1:
            errors.append(f"{name} must be >= 1")
    for name in (
        "stream_hop_latency_cycles", "mem_access_latency_cycles", "mxm_install_latency_cycles",
        "mxm_pipeline_depth_cycles", "sxm_reorder_latency_cycles",
    ):
        if getattr(c, name) < 1:
            errors.append(f"{name} must be >= 1")
    for opcode, cycles in sorted(c.alu_latency.items()):
        if opcode not in ALU_OPCODES:
            errors.append(f"unknown ALU opcode {opcode!r} in latency table")
        elif cycles < 1:
            errors.append(f"latency of {opcode} must be >= 1")
    if c.mxm_plane_rows < c.lane_width or c.mxm_plane_cols < c.lane_width:
        errors.append("MXM planes must be at least lane_width x lane_width")
    if c.mxm_install_streams >= c.sxm_port_count:
        errors.append("mxm_install_streams must leave one SXM port for activations")
    if not c.clock_hz > 0:
        errors.append("clock_hz must be positive")
    return errors


def _parse_value(key, text, kind):
    try:
        if kind is float:
            return float(text)
        return int(text, 0)
    except ValueError:
        raise ConfigError(f"invalid value {text!r} for {key}") from None


def parse_arch(text: str, source: str = "<string>") -> ArchConfig:
    """
    Parse a key = value machine description. Keys are ArchConfig field names; single
    ALU latencies are set with `alu_latency.<opcode> = <cycles>`. Unknown keys are errors.
    """
    kinds = {f.name: (float if f.name == "clock_hz" else int) for f in fields(ArchConfig)}
    del kinds["alu_latency"]
    values, latency = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key.startswith("alu_latency."):
            opcode = key.split(".", 1)[1]
            if opcode not in ALU_OPCODES:
                raise ConfigError(f"{source}:{lineno}: unknown ALU opcode {opcode!r}")
            latency[opcode] = _parse_value(key, value, int)
        elif key in kinds:
            values[key] = _parse_value(key, value, kinds[key])
        else:
            raise ConfigError(f"{source}:{lineno}: unknown configuration key {key!r}")
    config = ArchConfig(alu_latency=latency, **values)
    errors = validate_config(config)
    if errors:
        raise ConfigError(f"{source}: " + "; ".join(errors))
    return config


def load_arch(path) -> ArchConfig:
    try:
        with open(path, "r") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read machine configuration {path}: {e}") from e
    config = parse_arch(text, source=str(path))
    bt.logging.debug(f"Loaded machine configuration from {path}: lane width {config.lane_width}")
    return config


def format_arch(c: ArchConfig) -> str:
    """Inverse of parse_arch."""
    lines = [f"{f.name} = {getattr(c, f.name)}" for f in fields(c) if f.name != "alu_latency"]
    lines += [f"alu_latency.{op} = {cycles}" for op, cycles in sorted(c.alu_latency.items())]
    return "\n".join(lines) + "\n"


def arch_with(c: ArchConfig, **overrides) -> ArchConfig:
    return replace(c, **overrides)


def physical_vectors(shape: Shape, lane_width: int) -> int:
    """Number of lane-width vectors a tensor decomposes into: outer * ceil(inner / L)."""
    return shape.outer * math.ceil(shape.inner / lane_width)


@dataclass(frozen=True)
class Instruction:
    """
    One statically scheduled instruction.

    The unit is busy on [start, start + duration). Results leave the unit on
    [start + latency, start + latency + duration), one vector per cycle.
    `deps` holds (instruction id, kind) pairs; see scheduler.DEP_KINDS.
    """

    iid: int
    unit_class: str
    unit_id: int
    opcode: str
    node: str
    start: int
    duration: int
    latency: int = 1
    vector_count: int = 0
    operand_streams: Tuple[int, ...] = ()
    result_streams: Tuple[int, ...] = ()
    deps: Tuple[Tuple[int, str], ...] = ()
    region: Optional[str] = None
    block: str = ""
    layer: int = 0

    def __post_init__(self):
        if self.unit_class not in UNIT_CLASSES:
            raise ConfigError(f"unknown unit class {self.unit_class!r}")
        if self.opcode not in OPCODES:
            raise ConfigError(f"unknown opcode {self.opcode!r}")
        if self.start < 0 or self.duration < 1 or self.latency < 0:
            raise ConfigError(
                f"instruction {self.iid} has start {self.start}, duration {self.duration}, "
                f"latency {self.latency}"
            )

    @property
    def port(self) -> str:
        return {
            "read": "r", "write": "w", "install_weights": "install", "matmul_stream": "stream",
        }.get(self.opcode, "")

    @property
    def unit(self) -> Tuple[str, int, str]:
        return (self.unit_class, self.unit_id, self.port)

    @property
    def busy_end(self) -> int:
        return self.start + self.duration

    @property
    def end(self) -> int:
        """Cycle after the last result leaves the unit."""
        return self.start + self.latency + self.duration

    @property
    def first_out(self) -> int:
        return self.start + self.latency

    @property
    def last_out(self) -> int:
        return self.end - 1

    @property
    def last_in(self) -> int:
        return self.busy_end - 1

    @property
    def streams(self) -> Tuple[int, ...]:
        return tuple(sorted(set(self.operand_streams) | set(self.result_streams)))


def unit_inventory(c: ArchConfig) -> List[Tuple[str, int, str]]:
    """Every reservable (class, id, port) of the machine, in report order."""
    units = []
    for plane in range(c.mxm_plane_count):
        units += [(MXM, plane, "install"), (MXM, plane, "stream")]
    units += [(VXM, alu, "") for alu in range(c.vxm_alu_count)]
    units += [(SXM, port, "") for port in range(c.sxm_port_count)]
    for s in range(c.mem_slice_count):
        units += [(MEM, s, "r"), (MEM, s, "w")]
    return units


@dataclass(frozen=True)
class MemoryRegion:
    name: str
    nbytes: int
    kind: str = SCRATCHPAD
    banks: int = 1

    def __post_init__(self):
        if self.kind not in REGION_KINDS:
            raise ConfigError(f"region {self.name} has unknown kind {self.kind!r}")
        if self.nbytes < 1 or self.banks < 1:
            raise ConfigError(f"region {self.name} must have positive size and bank count")


@dataclass(frozen=True)
class Placement:
    region: MemoryRegion
    slices: Tuple[int, ...]
    offset: int
    bank_bytes: int


@dataclass(frozen=True)
class MemoryMap:
    """
    Static SRAM allocation. Scratchpad regions own their slices outright so that
    their read and write ports are never shared with another region.
    """

    slice_count: int
    slice_bytes: int
    placements: Dict[str, Placement] = field(default_factory=dict)

    @property
    def capacity_bytes(self) -> int:
        return self.slice_count * self.slice_bytes

    def slices_of(self, name: str) -> Tuple[int, ...]:
        try:
            return self.placements[name].slices
        except KeyError:
            raise ConfigError(f"region {name!r} is not allocated") from None

    def bytes_of(self, kind: str) -> int:
        return sum(p.region.nbytes for p in self.placements.values() if p.region.kind == kind)

    def fractions(self) -> Dict[str, float]:
        """Share of total capacity per region kind, plus the unused remainder."""
        total = self.capacity_bytes
        out = {kind: self.bytes_of(kind) / total for kind in REGION_KINDS}
        out["unused"] = 1.0 - sum(out.values())
        return out


def alloc_memory(regions: Iterable[MemoryRegion], c: ArchConfig) -> MemoryMap:
    """
    First-fit placement. Constants are packed first, then instruction memory, then
    scratchpad regions, each kind in the order given.
    """
    regions = list(regions)
    total = sum(r.nbytes for r in regions)
    if total > c.capacity_bytes:
        raise ConfigError(
            f"regions need {total} bytes but memory holds {c.capacity_bytes} bytes"
        )
    names = [r.name for r in regions]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate region names")

    used = [0] * c.mem_slice_count
    owned = [False] * c.mem_slice_count
    placements = {}
    order = {CONSTANT: 0, INSTRUCTION: 1, SCRATCHPAD: 2}
    for region in sorted(regions, key=lambda r: order[r.kind]):
        banks = max(region.banks, math.ceil(region.nbytes / c.mem_slice_bytes))
        bank_bytes = math.ceil(region.nbytes / banks)
        exclusive = region.kind == SCRATCHPAD

        def fits(start):
            span = range(start, start + banks)
            if any(owned[s] for s in span):
                return False
            if exclusive:
                return all(used[s] == 0 for s in span)
            # every bank sits at the same offset in its slice
            return c.mem_slice_bytes - max(used[s] for s in span) >= bank_bytes

        start = next((s for s in range(c.mem_slice_count - banks + 1) if fits(s)), None)
        if start is None:
            raise ConfigError(f"out of memory placing region {region.name!r} ({region.nbytes} bytes)")
        slices = tuple(range(start, start + banks))
        offset = max(used[s] for s in slices)
        for s in slices:
            used[s] = offset + bank_bytes
            owned[s] = exclusive
        placements[region.name] = Placement(region, slices, offset, bank_bytes)
    return MemoryMap(c.mem_slice_count, c.mem_slice_bytes, placements)
