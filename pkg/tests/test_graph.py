# The MIT License (MIT)
# Copyright © 2024 tspbert developers

# Permission is hereby granted, free of charge, to any person obtaining a copy of this software and associated
# documentation files (the “Software”), to deal in the Software without restriction, including without limitation
# the rights to use, copy, modify, merge, publish, distribute, sublicense, and/or sell copies of the Software,
# and to permit persons to whom the Software is furnished to do so, subject to the following conditions:

# The above copyright notice and this permission notice shall be included in all copies or substantial portions of
# the Software.

# THE SOFTWARE IS PROVIDED “AS IS”, WITHOUT WARRANTY OF ANY KIND, EXPRESS OR IMPLIED, INCLUDING BUT NOT LIMITED TO
# THE WARRANTIES OF MERCHANTABILITY, FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL
# THE AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER LIABILITY, WHETHER IN AN ACTION
# OF CONTRACT, TORT OR OTHERWISE, ARISING FROM, OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER
# DEALINGS IN THE SOFTWARE.


import unittest

import pytest

from tspbert.errors import ConfigError
from tspbert.graph import (
    FF_BLOCK, INT8, INT32, SA_BLOCK, ComputeGraph, ModelSpec, NodeKind, build_encoder_graph,
)

from tests.helpers import tiny_spec

NODES_PER_LAYER = 26


class EncoderGraphTestCase(unittest.TestCase):
    def setUp(self):
        self.spec = tiny_spec(layers=2)
        self.graph = build_encoder_graph(self.spec)

    def test_node_count(self):
        self.assertEqual(len(self.graph.nodes), NODES_PER_LAYER * 2)
        self.assertEqual(len(self.graph.layer_nodes(1)), NODES_PER_LAYER)

    def test_dtypes_consistent(self):
        self.assertEqual(self.graph.check(), [])

    def test_topological_order(self):
        order = self.graph.topological_order()
        position = {name: i for i, name in enumerate(order)}
        self.assertEqual(len(order), len(self.graph.nodes))
        for src, dst in self.graph.edges():
            self.assertLess(position[src], position[dst])

    def test_layers_chain_through_quantized_output(self):
        producer = self.graph.producer()
        self.assertEqual(producer["L1.x"], "L0.ln2_pass3")
        self.assertIn(("L0.ln2_pass3", "L1.q_proj"), self.graph.edges())

    def test_blocks(self):
        nodes = self.graph.layer_nodes(0)
        self.assertEqual(nodes["out_proj"].block, SA_BLOCK)
        self.assertEqual(nodes["ln1_pass3"].block, SA_BLOCK)
        self.assertEqual(nodes["gelu"].block, FF_BLOCK)
        self.assertEqual(nodes["ln2_pass1"].block, FF_BLOCK)

    def test_resources(self):
        nodes = self.graph.layer_nodes(0)
        self.assertEqual(nodes["ff1"].resource, "MXM")
        self.assertEqual(nodes["scores"].resource, "MXM")
        self.assertEqual(nodes["k_heads"].resource, "SXM")
        self.assertEqual(nodes["softmax2"].resource, "VXM")

    def test_gemm_attributes(self):
        nodes = self.graph.layer_nodes(0)
        self.assertEqual(nodes["ff1"].attr("weights"), "w_1")
        self.assertEqual((nodes["ff2"].attr("k"), nodes["ff2"].attr("n")), (64, 16))
        self.assertEqual(nodes["scores"].kind, NodeKind.BATCHED_GEMM)
        self.assertEqual(nodes["scores"].attr("heads"), 2)
        self.assertIsNone(nodes["gelu"].attr("weights"))

    def test_single_head_uses_plain_gemm(self):
        graph = build_encoder_graph(ModelSpec(heads=1, head_size=16, d_model=16, d_ff=32, seq_len=4))
        self.assertEqual(graph.layer_nodes(0)["scores"].kind, NodeKind.GEMM)

    def test_value_shapes(self):
        self.assertEqual(self.graph.values["L0.s_acc"].dims, (2, 8, 8))
        self.assertEqual(self.graph.values["L0.k_h"].dims, (2, 8, 8))
        self.assertEqual(self.graph.values["L0.f1_acc"].dims, (8, 64))


class ComputeGraphTestCase(unittest.TestCase):
    def small_graph(self):
        g = ComputeGraph(tiny_spec())
        g.add_value("a", INT8, (4, 4))
        g.add_value("b", INT32, (4, 4))
        g.add_value("c", INT8, (4, 4))
        g.add_node("mm", NodeKind.GEMM, ["a"], ["b"], 0, SA_BLOCK)
        g.add_node("rq", NodeKind.QUANTIZE, ["b"], ["c"], 0, SA_BLOCK)
        return g

    def test_duplicate_node(self):
        g = self.small_graph()
        with self.assertRaises(ConfigError):
            g.add_node("mm", NodeKind.GEMM, ["a"], ["b"], 0, SA_BLOCK)

    def test_dtype_problem_reported(self):
        g = self.small_graph()
        g.add_node("bad", NodeKind.GEMM, ["b"], ["c"], 0, SA_BLOCK)
        problems = g.check()
        self.assertEqual(len(problems), 2)
        self.assertTrue(all(p.startswith("bad:") for p in problems))

    def test_cycle(self):
        g = self.small_graph()
        g.add_node("loop", NodeKind.REORDER, ["c"], ["a"], 0, SA_BLOCK)
        with self.assertRaises(ConfigError):
            g.topological_order()


@pytest.mark.parametrize("preset", ["tiny", "bert-base"])
def test_presets_build(preset):
    spec = ModelSpec.preset(preset)
    assert build_encoder_graph(spec).check() == []


def test_unknown_preset():
    with pytest.raises(ConfigError):
        ModelSpec.preset("bert-huge")


def test_zero_layers():
    with pytest.raises(ConfigError):
        tiny_spec(layers=0)
