# graph.py
#
# Typed operator DAG for a stack of encoder layers.

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Tuple

from tspbert import constants
from tspbert.errors import ConfigError
from tspbert.reference import check_hyperparameters


class NodeKind(str, Enum):
    GEMM = "GEMM"
    BATCHED_GEMM = "BatchedGEMM"
    GELU_CHAIN = "GeluChain"
    LN_PASS1 = "LnPass1"
    LN_PASS2 = "LnPass2"
    LN_PASS3 = "LnPass3"
    SOFTMAX_PASS = "SoftmaxPass"
    REORDER = "Reorder"
    RESIDUAL_ADD = "ResidualAdd"
    QUANTIZE = "Quantize"
    DEQUANTIZE = "Dequantize"


INT8 = "int8"
INT32 = "int32"
FP32 = "fp32"

# Resource class each node kind executes on
RESOURCE = {
    NodeKind.GEMM: "MXM",
    NodeKind.BATCHED_GEMM: "MXM",
    NodeKind.REORDER: "SXM",
}

# Allowed input dtypes per node kind; outputs are checked against OUTPUT_DTYPES
INPUT_DTYPES = {
    NodeKind.GEMM: {INT8},
    NodeKind.BATCHED_GEMM: {INT8},
    NodeKind.GELU_CHAIN: {INT32},
    NodeKind.LN_PASS1: {INT32, FP32},
    NodeKind.LN_PASS2: {FP32},
    NodeKind.LN_PASS3: {FP32},
    NodeKind.SOFTMAX_PASS: {INT32, FP32},
    NodeKind.REORDER: {INT8},
    NodeKind.RESIDUAL_ADD: {FP32},
    NodeKind.QUANTIZE: {INT32, FP32},
    NodeKind.DEQUANTIZE: {INT8},
}
OUTPUT_DTYPES = {
    NodeKind.GEMM: {INT32},
    NodeKind.BATCHED_GEMM: {INT32},
    NodeKind.GELU_CHAIN: {INT8},
    NodeKind.LN_PASS1: {FP32},
    NodeKind.LN_PASS2: {FP32},
    NodeKind.LN_PASS3: {FP32, INT8},
    NodeKind.SOFTMAX_PASS: {FP32, INT8},
    NodeKind.REORDER: {INT8},
    NodeKind.RESIDUAL_ADD: {FP32},
    NodeKind.QUANTIZE: {INT8},
    NodeKind.DEQUANTIZE: {FP32},
}


@dataclass(frozen=True)
class ModelSpec:
    """Encoder hyper-parameters."""

    heads: int
    head_size: int
    d_model: int
    d_ff: int
    seq_len: int
    layers: int = 1

    def __post_init__(self):
        check_hyperparameters(self.heads, self.head_size, self.d_model, self.d_ff, self.seq_len)
        if self.layers < 1:
            raise ConfigError(f"layer count must be >= 1, got {self.layers}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelSpec":
        try:
            values = dict(constants.MODEL_PRESETS[name])
        except KeyError:
            raise ConfigError(f"unknown model preset {name!r}") from None
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass(frozen=True)
class Value:
    name: str
    dtype: str
    dims: Tuple[int, ...]


@dataclass(frozen=True)
class Node:
    name: str
    kind: NodeKind
    inputs: Tuple[str, ...]
    outputs: Tuple[str, ...]
    layer: int
    block: str
    attrs: Tuple[Tuple[str, object], ...] = ()

    @property
    def resource(self) -> str:
        return RESOURCE.get(self.kind, "VXM")

    def attr(self, key, default=None):
        return dict(self.attrs).get(key, default)


@dataclass
class ComputeGraph:
    spec: ModelSpec
    nodes: Dict[str, Node] = field(default_factory=dict)
    values: Dict[str, Value] = field(default_factory=dict)

    def add_value(self, name, dtype, dims):
        self.values[name] = Value(name, dtype, tuple(dims))

    def add_node(self, name, kind, inputs, outputs, layer, block, **attrs):
        if name in self.nodes:
            raise ConfigError(f"duplicate node {name}")
        self.nodes[name] = Node(name, kind, tuple(inputs), tuple(outputs), layer, block, tuple(sorted(attrs.items())))

    def producer(self) -> Dict[str, str]:
        return {v: n.name for n in self.nodes.values() for v in n.outputs}

    def edges(self) -> List[Tuple[str, str]]:
        """Distinct (producer node, consumer node) pairs."""
        producer = self.producer()
        pairs = []
        for node in self.nodes.values():
            for src in dict.fromkeys(producer[v] for v in node.inputs if v in producer):
                pairs.append((src, node.name))
        return pairs

    def topological_order(self) -> List[str]:
        incoming = {name: set() for name in self.nodes}
        for src, dst in self.edges():
            incoming[dst].add(src)
        order, ready = [], [n for n in self.nodes if not incoming[n]]
        while ready:
            name = ready.pop(0)
            order.append(name)
            for other, deps in incoming.items():
                if name in deps:
                    deps.discard(name)
                    if not deps and other not in order and other not in ready:
                        ready.append(other)
        if len(order) != len(self.nodes):
            raise ConfigError("compute graph has a cycle")
        return order

    def check(self) -> List[str]:
        """Dtype-consistency problems; raises ConfigError on a cycle."""
        self.topological_order()
        problems = []
        for node in self.nodes.values():
            for name in node.inputs:
                if self.values[name].dtype not in INPUT_DTYPES[node.kind]:
                    problems.append(f"{node.name}: input {name} is {self.values[name].dtype}")
            for name in node.outputs:
                if self.values[name].dtype not in OUTPUT_DTYPES[node.kind]:
                    problems.append(f"{node.name}: output {name} is {self.values[name].dtype}")
        return problems

    def layer_nodes(self, layer: int) -> Dict[str, Node]:
        """Nodes of one layer keyed by their short name (without the layer prefix)."""
        prefix = f"L{layer}."
        return {n[len(prefix):]: node for n, node in self.nodes.items() if n.startswith(prefix)}


SA_BLOCK = "SA Block"
FF_BLOCK = "FF Block"


def build_encoder_graph(spec: ModelSpec) -> ComputeGraph:
    """
    Operator graph of `spec.layers` encoder layers. Q, K and V each use one GEMM over
    the head-concatenated weights; the per-head score and context products form one
    batched GEMM each (a plain GEMM when there is a single head).
    """
    g = ComputeGraph(spec)
    S, dm, dff, h, dk = spec.seq_len, spec.d_model, spec.d_ff, spec.heads, spec.head_size
    batched = NodeKind.BATCHED_GEMM if h > 1 else NodeKind.GEMM

    g.add_value("L0.x", INT8, (S, dm))
    for layer in range(spec.layers):
        def v(name):
            return f"L{layer}.{name}"

        def node(name, kind, inputs, outputs, block=SA_BLOCK, **attrs):
            g.add_node(v(name), kind, [v(i) for i in inputs], outputs, layer, block, **attrs)

        for name, dtype, dims in (
            ("x_f", FP32, (S, dm)),
            ("q_acc", INT32, (S, dm)), ("k_acc", INT32, (S, dm)), ("v_acc", INT32, (S, dm)),
            ("q", INT8, (S, dm)), ("k", INT8, (S, dm)), ("v", INT8, (S, dm)),
            ("q_h", INT8, (h, S, dk)), ("k_h", INT8, (h, dk, S)), ("v_h", INT8, (h, S, dk)),
            ("s_acc", INT32, (h, S, S)), ("scores", FP32, (h, S, S)), ("s_max", FP32, (h, S)),
            ("e", FP32, (h, S, S)), ("s_sum", FP32, (h, S)), ("p", INT8, (h, S, S)),
            ("attn_acc", INT32, (S, dm)), ("attn", INT8, (S, dm)), ("o_acc", INT32, (S, dm)),
            ("ln1_z", FP32, (S, dm)), ("ln1_sum", FP32, (S,)),
            ("ln1_gz", FP32, (S, dm)), ("ln1_sq", FP32, (S,)),
            ("sa_f", FP32, (S, dm)), ("sa", INT8, (S, dm)),
            ("f1_acc", INT32, (S, dff)), ("g", INT8, (S, dff)), ("f2_acc", INT32, (S, dm)),
            ("ln2_z", FP32, (S, dm)), ("ln2_sum", FP32, (S,)),
            ("ln2_gz", FP32, (S, dm)), ("ln2_sq", FP32, (S,)),
            ("out_f", FP32, (S, dm)),
        ):
            g.add_value(v(name), dtype, dims)
        g.add_value(f"L{layer + 1}.x", INT8, (S, dm))

        node("x_dequant", NodeKind.DEQUANTIZE, ["x"], [v("x_f")])
        for w in ("q", "k", "v"):
            node(f"{w}_proj", NodeKind.GEMM, ["x"], [v(f"{w}_acc")], weights=f"w_{w}", k=dm, n=dm)
            node(f"{w}_requant", NodeKind.QUANTIZE, [f"{w}_acc"], [v(w)])
        node("q_heads", NodeKind.REORDER, ["q"], [v("q_h")])
        node("k_heads", NodeKind.REORDER, ["k"], [v("k_h")], transpose=True)
        node("scores", batched, ["q_h", "k_h"], [v("s_acc")], heads=h, k=dk, n=S)
        node("softmax1", NodeKind.SOFTMAX_PASS, ["s_acc"], [v("scores"), v("s_max")], pass_index=1)
        node("softmax2", NodeKind.SOFTMAX_PASS, ["scores", "s_max"], [v("e"), v("s_sum")], pass_index=2)
        node("softmax3", NodeKind.SOFTMAX_PASS, ["e", "s_sum"], [v("p")], pass_index=3)
        node("v_heads", NodeKind.REORDER, ["v"], [v("v_h")])
        node("context", batched, ["p", "v_h"], [v("attn_acc")], heads=h, k=S, n=dk)
        node("attn_requant", NodeKind.QUANTIZE, ["attn_acc"], [v("attn")])
        node("out_proj", NodeKind.GEMM, ["attn"], [v("o_acc")], weights="w_o", k=dm, n=dm)
        node("ln1_pass1", NodeKind.LN_PASS1, ["o_acc", "x_f"], [v("ln1_z"), v("ln1_sum")])
        node("ln1_pass2", NodeKind.LN_PASS2, ["ln1_z", "ln1_sum"], [v("ln1_gz"), v("ln1_sq")])
        node("ln1_pass3", NodeKind.LN_PASS3, ["ln1_gz", "ln1_sq"], [v("sa_f"), v("sa")])
        node("ff1", NodeKind.GEMM, ["sa"], [v("f1_acc")], FF_BLOCK, weights="w_1", k=dm, n=dff)
        node("gelu", NodeKind.GELU_CHAIN, ["f1_acc"], [v("g")], FF_BLOCK)
        node("ff2", NodeKind.GEMM, ["g"], [v("f2_acc")], FF_BLOCK, weights="w_2", k=dff, n=dm)
        node("ln2_pass1", NodeKind.LN_PASS1, ["f2_acc", "sa_f"], [v("ln2_z"), v("ln2_sum")], FF_BLOCK)
        node("ln2_pass2", NodeKind.LN_PASS2, ["ln2_z", "ln2_sum"], [v("ln2_gz"), v("ln2_sq")], FF_BLOCK)
        node("ln2_pass3", NodeKind.LN_PASS3, ["ln2_gz", "ln2_sq"], [v("out_f"), f"L{layer + 1}.x"], FF_BLOCK)

    problems = g.check()
    if problems:
        raise ConfigError("inconsistent compute graph: " + "; ".join(problems))
    return g
