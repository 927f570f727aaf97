# Machine and model constants.
# Machine defaults follow the production chip; the latency table is a configuration
# choice since only throughput is published.

MIB = 1024 * 1024

# Vector length in lanes (elements per physical vector)
LANE_WIDTH = 320

# Pointwise ALUs in the vector unit
VXM_ALU_COUNT = 16

# Matrix planes, each a LANE_WIDTH x LANE_WIDTH int8 MACC array
MXM_PLANE_COUNT = 4

# On-chip SRAM
MEM_SLICE_COUNT = 88
MEM_CAPACITY_BYTES = 220 * MIB
MEM_SLICE_BYTES = MEM_CAPACITY_BYTES // MEM_SLICE_COUNT

# Streams per direction (East and West)
STREAMS_PER_DIRECTION = 32

# Switch unit ports usable for reshaping in flight
SXM_PORT_COUNT = 4

# Weight rows of one tile are spread over this many streams while installing
MXM_INSTALL_STREAMS = 3

CLOCK_HZ = 900e6

STREAM_HOP_LATENCY = 1
MEM_ACCESS_LATENCY = 1
MXM_PIPELINE_DEPTH = 20
SXM_REORDER_LATENCY = 4
INSTRUCTION_BYTES = 32

# Pipeline latency per ALU opcode, in cycles. Throughput is one vector per cycle for all.
ALU_LATENCY = {
    "add": 1,
    "sub": 1,
    "mul": 1,
    "max": 1,
    "cast": 1,
    "clamp_round": 1,
    "pass": 1,
    "tanh": 4,
    "exp": 4,
    "rsqrt": 4,
    "recip": 4,
}

# GELU tanh approximation constants
GELU_CUBIC = 0.044715
GELU_SQRT_2_OVER_PI = 0.7978845608

LAYERNORM_EPS = 1e-12

INT8_MIN = -128
INT8_MAX = 127

# Model presets: heads, head_size, d_model, d_ff, layers, seq_len
MODEL_PRESETS = {
    "tiny": dict(heads=2, head_size=8, d_model=16, d_ff=64, layers=1, seq_len=8),
    "bert-base": dict(heads=12, head_size=64, d_model=768, d_ff=3072, layers=12, seq_len=128),
}

# Machine overrides that go with the tiny preset
TINY_ARCH = dict(lane_width=32)
