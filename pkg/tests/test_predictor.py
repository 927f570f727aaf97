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
from hypothesis import given, settings
from hypothesis import strategies as st

from tspbert.graph import ModelSpec, build_encoder_graph
from tspbert.machine import ArchConfig
from tspbert.predictor import (
    GELU_CHAIN, LN_PASS1, GemmTiming, ScheduleOptions, block_breakdown, cdiv, chain_depth,
    feed_chain, gelu_gap, layernorm_passes, ln_constant, ln_cycles, plan_encoder, plan_layer,
    predict_cycles, predict_layer_cycles, predict_time, softmax_passes, stage_offsets,
)

from tests.helpers import tiny_arch, tiny_spec

SERIAL = ScheduleOptions(
    fuse_gelu=False, overlap_layernorm=False, overlap_softmax=False, overlap_v_gemm=False,
    double_buffer_weights=False,
)


class ChainTestCase(unittest.TestCase):
    def test_depth_and_offsets(self):
        cfg = ArchConfig()
        self.assertEqual(chain_depth(LN_PASS1, cfg), 7)
        self.assertEqual(stage_offsets(("mul", "tanh", "add"), cfg), (0, 2, 7))
        self.assertEqual(chain_depth(GELU_CHAIN, cfg), 34)

    def test_fused_feed_keeps_pace_with_producer(self):
        feed = feed_chain(10, 109, 40, GELU_CHAIN, ArchConfig())
        self.assertEqual(feed.start, 11)
        self.assertEqual(feed.duration, 100)

    def test_unfused_feed_stores_first(self):
        cfg = ArchConfig()
        fused = feed_chain(10, 109, 40, GELU_CHAIN, cfg)
        stored = feed_chain(10, 109, 40, GELU_CHAIN, cfg, fused=False)
        self.assertIsNone(fused.raw_write_start)
        self.assertEqual(stored.raw_write_start, fused.start)
        self.assertEqual(stored.raw_duration, 100)
        self.assertEqual(stored.duration, 40)
        self.assertGreater(stored.start, fused.start)


class GemmTimingTestCase(unittest.TestCase):
    def setUp(self):
        self.t = GemmTiming(rows=8, k=64, n=64, lane_width=32, install=32, pipeline=20)

    def test_tiles_visit_k_first(self):
        self.assertEqual((self.t.kt, self.t.nt, self.t.tiles), (2, 2, 4))
        self.assertEqual([self.t.tile(i) for i in range(4)], [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)])
        self.assertEqual([self.t.is_final(i) for i in range(4)], [False, True, False, True])

    def test_groups(self):
        t = GemmTiming(rows=8, k=8, n=8, lane_width=32, install=32, pipeline=20, groups=3)
        self.assertEqual(t.tiles, 3)
        self.assertEqual(t.tile(2), (2, 0, 0))
        self.assertEqual(t.vectors_out, 24)

    def test_double_buffered_installs_overlap_streams(self):
        self.assertEqual(self.t.period, 32)
        self.assertEqual(self.t.install_start(100, 0), 68)
        self.assertEqual(self.t.install_start(100, 1), 100)
        self.assertEqual(self.t.cycles(), 32 + 3 * 32 + 20 + 8)

    def test_single_buffer_serializes(self):
        t = GemmTiming(rows=8, k=64, n=64, lane_width=32, install=32, pipeline=20, double_buffer=False)
        self.assertEqual(t.period, 40)
        self.assertEqual(t.install_start(100, 1), 108)
        self.assertEqual(t.stream_start(100, 1), 140)

    def test_output_window(self):
        self.assertEqual(self.t.first_out(0), 32 + 20)
        self.assertEqual(self.t.last_out(0), 3 * 32 + 20 + 7)
        self.assertEqual(self.t.streams_end(0), 3 * 32 + 8)

    def test_bert_base_streams_back_to_back(self):
        t = GemmTiming.of(128, 768, 768, ArchConfig(), ScheduleOptions())
        self.assertEqual(t.install, 107)
        self.assertEqual(t.period, 128)
        self.assertEqual(t.stream_start(0, 1) - t.stream_start(0, 0), t.rows)


def test_layernorm_constant_at_defaults():
    assert ln_constant(ArchConfig()) == 36


@settings(deadline=None)
@given(
    k=st.integers(1, 4096),
    j=st.integers(1, 512),
    head=st.integers(0, 10_000),
    lanes=st.sampled_from([32, 320]),
)
def test_layernorm_window_closed_form(k, j, head, lanes):
    cfg = ArchConfig(lane_width=lanes)
    vectors = j * cdiv(k, lanes)
    timing = layernorm_passes(0, 0, vectors, cfg, start=head)
    assert timing.window == ln_cycles(k, j, cfg)
    assert timing.window == 3 * cdiv(vectors, 4) + ln_constant(cfg)


def test_layernorm_pass_order():
    t = layernorm_passes(100, 199, 100, ArchConfig())
    assert t.starts[0] < t.starts[1] < t.starts[2]
    assert t.ends[0] < t.starts[2]
    assert t.ready["z"] <= t.starts[1]
    assert [op for op, _, _ in t.steps] == ["mul", "mul", "add", "rsqrt"]


def test_softmax_reciprocal_between_passes():
    t = softmax_passes(0, 63, 64, 16, ArchConfig(lane_width=32))
    (op, start, duration), = t.steps
    assert op == "recip"
    assert t.ends[1] < start < t.starts[2]
    assert duration == 1


def test_gelu_gap_at_defaults():
    assert gelu_gap(ArchConfig()) == 20 + 34 + 4 + 2


@pytest.mark.parametrize("d_ff", [64, 128, 256])
def test_gelu_gap_in_layer_plan(d_ff):
    cfg = tiny_arch()
    plan = plan_layer(tiny_spec(d_ff=d_ff), cfg)
    assert plan.s_ff2 - plan.ff1.streams_end(plan.s_ff1) == gelu_gap(cfg)


class PlanTestCase(unittest.TestCase):
    def test_layers_are_identical(self):
        spec, cfg = tiny_spec(layers=3), tiny_arch()
        plans = plan_encoder(spec, cfg)
        self.assertEqual(len({p.cycles for p in plans}), 1)
        self.assertEqual(plans[1].origin, plans[0].end)
        self.assertEqual(predict_cycles(build_encoder_graph(spec), cfg), 3 * plans[0].cycles)

    def test_block_breakdown_sums_to_layer(self):
        plan = plan_layer(tiny_spec(), tiny_arch())
        breakdown = block_breakdown(plan)
        self.assertEqual(sum(breakdown.values()), plan.cycles)
        self.assertTrue(all(v > 0 for v in breakdown.values()))

    def test_serialized_baseline_is_slower(self):
        spec, cfg = tiny_spec(), tiny_arch()
        self.assertGreater(plan_layer(spec, cfg, SERIAL).cycles, plan_layer(spec, cfg).cycles)

    def test_predict_time_units(self):
        cycles, time = predict_time(build_encoder_graph(tiny_spec()), tiny_arch())
        self.assertAlmostEqual(float(time.to("s").value), cycles / 900e6)

    def test_bert_base_in_expected_range(self):
        cycles = predict_cycles(build_encoder_graph(ModelSpec.preset("bert-base")))
        self.assertGreater(cycles, 0)
        self.assertEqual(cycles % 12, 0)


@settings(deadline=None, max_examples=50)
@given(seq_len=st.integers(1, 96), d_ff=st.sampled_from([32, 64, 96, 128]))
def test_prediction_monotonic(seq_len, d_ff):
    cfg = tiny_arch()
    base = plan_layer(tiny_spec(seq_len=seq_len, d_ff=d_ff), cfg).cycles
    assert plan_layer(tiny_spec(seq_len=seq_len + 1, d_ff=d_ff), cfg).cycles >= base
    assert plan_layer(tiny_spec(seq_len=seq_len, d_ff=d_ff + 32), cfg).cycles >= base


@settings(deadline=None, max_examples=60)
@given(
    seq_len=st.integers(1, 40),
    d_ff=st.sampled_from([32, 64, 96]),
    heads=st.sampled_from([1, 2, 4]),
    flags=st.tuples(*[st.booleans()] * 5),
)
def test_closed_form_matches_plan(seq_len, d_ff, heads, flags):
    spec = tiny_spec(seq_len=seq_len, d_ff=d_ff, heads=heads, head_size=16 // heads)
    cfg, options = tiny_arch(), ScheduleOptions(*flags)
    assert predict_layer_cycles(spec, cfg, options) == plan_layer(spec, cfg, options).cycles


@pytest.mark.parametrize("options", [ScheduleOptions(), SERIAL], ids=["fused", "serial"])
def test_closed_form_matches_plan_at_bert_base(options):
    spec, cfg = ModelSpec.preset("bert-base"), ArchConfig()
    assert predict_layer_cycles(spec, cfg, options) == plan_layer(spec, cfg, options).cycles
