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


import json
import unittest
from dataclasses import replace

import numpy as np
import pytest

from tspbert import kernels
from tspbert import predictor as pt
from tspbert.errors import ConfigError, HazardError, OracleMismatchError, ScheduleConflictError, TensorFormatError
from tspbert.graph import ModelSpec, build_encoder_graph
from tspbert.machine import CONSTANT, MXM, SCRATCHPAD, VXM, ArchConfig, Instruction, MemoryMap
from tspbert.predictor import ScheduleOptions
from tspbert.report import IDLE, CycleReport, build_report, read_report, with_tail, write_report
from tspbert.scheduler import (
    FuncOp, Schedule, ScheduleBuilder, schedule_encoder, schedule_gelu_fused, schedule_layernorm, schedule_softmax,
    scratch_sizes,
)
from tspbert.simulator import (
    MachineState, MemoryImage, check_oracle, execute, latency_statistics, run, step, summarize_latency,
    trace_names, unconsumed_vectors,
)

from tspbert.weights import generate_model

from tests.helpers import CLOSE_IN_VALUE, model_image, random_int8, reference_trace, tiny_arch, tiny_model, tiny_spec


@pytest.fixture(scope="module")
def tiny_schedule():
    return schedule_encoder(tiny_spec(), tiny_arch())


@pytest.mark.parametrize("seed", range(100))
def test_matches_reference_bit_for_bit(tiny_schedule, seed):
    model = tiny_model(seed)
    values, _ = run(tiny_schedule, model_image(model), all_values=True)
    compared = check_oracle(values, reference_trace(model), required=tiny_schedule.outputs)
    assert compared > 20


def test_stacked_layers_match_reference():
    model = tiny_model(3, layers=3)
    schedule = schedule_encoder(model.spec, tiny_arch())
    values, _ = run(schedule, model_image(model), all_values=True)
    check_oracle(values, reference_trace(model), required=("L2.out_f", "L3.x"))
    np.testing.assert_array_equal(values["L3.x"], reference_trace(model).layers[-1]["x"])


def test_oracle_reports_mismatch(tiny_schedule):
    model = tiny_model(0)
    values, _ = run(tiny_schedule, model_image(model), all_values=True)
    values["L0.q"] = values["L0.q"].copy()
    values["L0.q"][0, 0] ^= 1
    with pytest.raises(OracleMismatchError):
        check_oracle(values, reference_trace(model))


def test_oracle_requires_outputs():
    with pytest.raises(OracleMismatchError):
        check_oracle({}, reference_trace(tiny_model(0)), required=("L1.x",))


def test_trace_names_shift_layer_output():
    names = trace_names(reference_trace(tiny_model(0, layers=2)))
    assert "L1.x" in names and "L2.x" in names
    assert "L0.x" not in names
    assert "L1.s_acc" in names


class StandaloneKernelsTestCase(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(11)
        self.cfg = tiny_arch()

    def test_gelu_fused(self):
        sa = random_int8(self.rng, (8, 16))
        w = random_int8(self.rng, (16, 64))
        b = self.rng.integers(-500, 500, 64).astype(np.int32)
        in_scale, out_scale = np.float32(1e-3), np.float32(0.02)
        image = MemoryImage({"L0.w_1": w, "L0.b_1": b, "L0.scale.f1_in": in_scale, "L0.scale.gelu": out_scale})
        image.preload("sa", "L0.sa", sa)
        outputs, _ = run(schedule_gelu_fused(8, 16, 64, self.cfg), image)
        acc = kernels.gemm_int(sa, w, b)
        np.testing.assert_array_equal(outputs["L0.f1_acc"], acc)
        np.testing.assert_array_equal(outputs["L0.g"], kernels.gelu_chain(acc, in_scale, out_scale))

    def test_gelu_unfused_gives_same_values(self):
        sa = random_int8(self.rng, (8, 16))
        w = random_int8(self.rng, (16, 64))
        image = MemoryImage({
            "L0.w_1": w, "L0.b_1": np.zeros(64, np.int32), "L0.scale.f1_in": np.float32(1e-3),
            "L0.scale.gelu": np.float32(0.02),
        }).preload("sa", "L0.sa", sa)
        fused, _ = run(schedule_gelu_fused(8, 16, 64, self.cfg), image)
        stored, report = run(schedule_gelu_fused(8, 16, 64, self.cfg, ScheduleOptions(fuse_gelu=False)), image)
        np.testing.assert_array_equal(fused["L0.g"], stored["L0.g"])
        self.assertGreater(report.total_cycles, 0)

    def test_softmax(self):
        acc = self.rng.integers(-3000, 3000, (2, 8, 8)).astype(np.int32)
        score, p_scale = np.float32(1e-3), np.float32(1 / 127)
        image = MemoryImage({"L0.scale.score": score, "L0.scale.p": p_scale}).preload("acc_raw", "L0.s_acc", acc)
        outputs, _ = run(schedule_softmax(2, 8, self.cfg), image)
        scores, row_max = kernels.softmax_pass1(acc, score)
        e, sums = kernels.softmax_pass2(scores, row_max)
        _, p = kernels.softmax_pass3(e, kernels.softmax_recip(sums), p_scale)
        np.testing.assert_array_equal(outputs["L0.p"], p)

    def test_layernorm(self):
        width = 64
        attn = random_int8(self.rng, (8, width))
        w = random_int8(self.rng, (width, width))
        b = self.rng.integers(-500, 500, width).astype(np.int32)
        resid = self.rng.standard_normal((8, width)).astype(np.float32)
        gamma = (1 + 0.1 * self.rng.standard_normal(width)).astype(np.float32)
        beta = (0.1 * self.rng.standard_normal(width)).astype(np.float32)
        acc_scale, out_scale, eps = np.float32(1e-4), np.float32(0.03), np.float32(1e-12)
        image = MemoryImage({
            "L0.w_o": w, "L0.b_o": b, "L0.scale.o_in": acc_scale, "L0.gamma1": gamma, "L0.beta1": beta,
            "L0.eps": eps, "L0.scale.sa": out_scale,
        })
        image.preload("attn", "L0.attn", attn).preload("resid", "L0.x_f", resid)
        outputs, _ = run(schedule_layernorm(8, width, self.cfg), image)

        acc = kernels.gemm_int(attn, w, b)
        z, sums = kernels.ln_pass1(acc, acc_scale, resid)
        scaled, sq = kernels.ln_pass2(z, kernels.ln_mean(sums, width), gamma)
        out_f, out_q = kernels.ln_pass3(scaled, kernels.ln_rstd(sq, width, eps), beta, out_scale)
        np.testing.assert_array_equal(outputs["L0.sa_f"], out_f)
        np.testing.assert_array_equal(outputs["L0.sa"], out_q)
        np.testing.assert_allclose(out_f, kernels.layernorm(z, gamma, beta, eps), rtol=1e-5, atol=1e-5)


STORED = ScheduleOptions(overlap_layernorm=False)


def layernorm_window(schedule):
    state = execute(replace(schedule, ops={}))
    first = min(state.fired[i.iid] for i in schedule.instructions if i.unit_class == VXM and i.node == "L0.ln1_pass1")
    last = max(state.retired[i.iid] for i in schedule.instructions if i.unit_class == VXM and i.node == "L0.ln1_pass3")
    return last - first


@pytest.mark.parametrize("rows", [1, 8, 33])
@pytest.mark.parametrize("width", [16, 64, 100])
def test_layernorm_window_matches_closed_form(rows, width):
    cfg = tiny_arch()
    assert layernorm_window(schedule_layernorm(rows, width, cfg, STORED)) == pt.ln_cycles(width, rows, cfg)


@pytest.mark.parametrize("rows", [8, 64, 256])
@pytest.mark.parametrize("width", [64, 320, 768, 1024])
def test_layernorm_window_at_full_lane_width(rows, width):
    cfg = ArchConfig()
    assert layernorm_window(schedule_layernorm(rows, width, cfg, STORED)) == pt.ln_cycles(width, rows, cfg)


class DeterminismTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.model = tiny_model(5)
        cls.schedule = schedule_encoder(cls.model.spec, tiny_arch())
        cls.image = model_image(cls.model)

    def test_repeated_runs_have_no_jitter(self):
        latency = latency_statistics(self.schedule, self.image, runs=25)
        self.assertEqual(latency["runs"], 25)
        self.assertEqual(latency["std"], 0.0)
        self.assertEqual(latency["p1"], latency["p99"])
        self.assertEqual(latency["mean"], self.schedule.total_cycles)

    def test_prediction_within_one_percent(self):
        _, report = run(self.schedule, self.image)
        predicted = self.schedule.predicted_total
        self.assertEqual(CLOSE_IN_VALUE(report.total_cycles, 0.01 * report.total_cycles), predicted)

    def test_graph_prediction_within_one_percent(self):
        _, report = run(self.schedule, self.image)
        predicted = pt.predict_cycles(build_encoder_graph(self.model.spec), tiny_arch())
        self.assertEqual(CLOSE_IN_VALUE(report.total_cycles, 0.01 * report.total_cycles), predicted)

    def test_values_identical_across_runs(self):
        a, _ = run(self.schedule, self.image, all_values=True)
        b, _ = run(self.schedule, self.image, all_values=True)
        self.assertEqual(set(a), set(b))
        for name in a:
            np.testing.assert_array_equal(np.asarray(a[name]), np.asarray(b[name]))

    def test_latency_needs_a_run(self):
        with self.assertRaises(ConfigError):
            latency_statistics(self.schedule, self.image, runs=0)


@pytest.mark.slow
def test_thousand_runs_have_no_jitter():
    model = tiny_model(9)
    schedule = schedule_encoder(model.spec, tiny_arch())
    latency = latency_statistics(schedule, model_image(model), runs=1000)
    assert latency["std"] == 0.0
    assert latency["p99"] - latency["p1"] == 0.0


def test_summarize_latency_units():
    out = summarize_latency([900, 900, 1800], ArchConfig())
    assert out["p1"] == pytest.approx(900.0)
    assert out["mean_us"] == pytest.approx(1.3333333, rel=1e-6)
    assert out["std"] > 0


class HazardTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.schedule = schedule_encoder(tiny_spec(), tiny_arch())

    def test_uninitialized_memory(self):
        with self.assertRaises(HazardError):
            execute(self.schedule, MemoryImage())

    def test_double_booked_alu(self):
        inst = next(i for i in self.schedule.instructions if i.unit_class == VXM)
        extra = replace(inst, iid=len(self.schedule.instructions), result_streams=())
        broken = replace(self.schedule, instructions=self.schedule.instructions + [extra])
        with self.assertRaises(HazardError) as cm:
            execute(broken, model_image(tiny_model(0)))
        self.assertIn(inst.unit, cm.exception.units)

    def test_run_refuses_invalid_schedule(self):
        inst = next(i for i in self.schedule.instructions if i.unit_class == VXM)
        broken = replace(self.schedule, instructions=self.schedule.instructions + [replace(inst, iid=len(self.schedule.instructions))])
        with self.assertRaises(ScheduleConflictError):
            run(broken, model_image(tiny_model(0)))

    def test_machine_mismatch(self):
        with self.assertRaises(ConfigError):
            run(self.schedule, model_image(tiny_model(0)), cfg=ArchConfig())


def manual_schedule(*instructions, ops=None):
    cfg = tiny_arch()
    return Schedule(
        cfg, ScheduleOptions(), list(instructions), ops or {}, [],
        MemoryMap(cfg.mem_slice_count, cfg.mem_slice_bytes), {}, [], 0,
    )


def run_timing(schedule):
    """Step through every event without the end-of-run checks."""
    state = MachineState.start(schedule)
    for cycle in state.event_cycles:
        state.cycle = cycle
        step(state)
    return state


class StreamHazardTestCase(unittest.TestCase):
    def test_two_producers_on_one_stream(self):
        a = Instruction(0, VXM, 0, "add", "L0.a", start=5, duration=4, result_streams=(3,))
        b = Instruction(1, VXM, 1, "add", "L0.b", start=7, duration=4, result_streams=(3,))
        with self.assertRaises(HazardError) as cm:
            execute(manual_schedule(a, b))
        self.assertIn(("stream", 3, ""), cm.exception.units)
        self.assertIn("claimed by instructions 0 and 1", str(cm.exception))

    def test_back_to_back_producers_share_a_stream(self):
        a = Instruction(0, VXM, 0, "add", "L0.a", start=5, duration=4, result_streams=(3,))
        b = Instruction(1, VXM, 1, "add", "L0.b", start=9, duration=4, result_streams=(3,))
        reader = Instruction(2, VXM, 2, "add", "L0.c", start=7, duration=8, operand_streams=(3,))
        state = execute(manual_schedule(a, b, reader))
        self.assertEqual(state.slots[3], [(6, 10, 0), (10, 14, 1)])
        self.assertEqual(state.emitted, {0: (6, 9), 1: (10, 13)})

    def test_vector_nobody_reads(self):
        a = Instruction(0, VXM, 0, "add", "L0.a", start=5, duration=4, result_streams=(3,))
        reader = Instruction(1, VXM, 1, "add", "L0.b", start=7, duration=3, operand_streams=(3,))
        schedule = manual_schedule(a, reader)
        self.assertEqual(unconsumed_vectors(run_timing(schedule)), [(3, 10, 0)])
        with self.assertRaises(HazardError) as cm:
            execute(schedule)
        self.assertIn("never consumed", str(cm.exception))
        self.assertEqual(cm.exception.cycle, 10)

    def test_lone_read_is_lost(self):
        b = ScheduleBuilder(tiny_arch())
        b.use_sizes(scratch_sizes(8, 16, 64, 1))
        b.preloaded("x")
        b.read("L0.x_load", "x", 0, 5, 8)
        with self.assertRaises(HazardError) as cm:
            execute(b.finish())
        self.assertIn("never consumed", str(cm.exception))

    def test_alu_pipeline_still_draining(self):
        a = Instruction(0, VXM, 0, "tanh", "L0.a", start=0, duration=2, latency=5)
        b = Instruction(1, VXM, 0, "add", "L0.b", start=2, duration=2, latency=1)
        with self.assertRaises(HazardError) as cm:
            execute(manual_schedule(a, b))
        self.assertIn("still drains", str(cm.exception))
        self.assertIn((VXM, 0, ""), cm.exception.units)

    def test_alu_reused_once_drained(self):
        a = Instruction(0, VXM, 0, "tanh", "L0.a", start=0, duration=2, latency=5)
        b = Instruction(1, VXM, 0, "add", "L0.b", start=6, duration=2, latency=1)
        state = execute(manual_schedule(a, b))
        self.assertEqual(state.pipelines[0], (9, 1))


class BurstContractTestCase(unittest.TestCase):
    def test_latency_must_match_plane_depth(self):
        depth = tiny_arch().mxm_pipeline_depth_cycles
        inst = Instruction(0, MXM, 0, "matmul_stream", "L0.mm", start=0, duration=8, latency=depth - 1)
        with self.assertRaises(HazardError) as cm:
            execute(manual_schedule(inst))
        self.assertIn(f"pipeline is {depth} deep", str(cm.exception))

    def test_one_cycle_per_row(self):
        depth = tiny_arch().mxm_pipeline_depth_cycles
        inst = Instruction(0, MXM, 0, "matmul_stream", "L0.mm", start=0, duration=8, latency=depth)
        ops = {0: [FuncOp("macc", consts=(("rows", 4),))]}
        with self.assertRaises(HazardError) as cm:
            execute(manual_schedule(inst, ops=ops))
        self.assertIn("streams 8 cycles for 4 rows", str(cm.exception))


def test_results_leave_one_pipeline_depth_after_rows(tiny_schedule):
    cfg = tiny_schedule.cfg
    depth = cfg.mxm_pipeline_depth_cycles
    state = execute(replace(tiny_schedule, ops={}))
    finals = [i for i in tiny_schedule.instructions if i.opcode == "matmul_stream" and i.result_streams]
    assert finals
    for i in finals:
        assert i.duration == tiny_schedule.spec.seq_len
        assert state.emitted[i.iid] == (i.start + depth, i.start + depth + i.duration - 1)
    for runs in state.slots.values():
        runs = sorted(runs)
        assert all(a[1] <= b[0] for a, b in zip(runs, runs[1:]))
    assert unconsumed_vectors(state) == []


class StepTestCase(unittest.TestCase):
    def setUp(self):
        cfg = tiny_arch()
        inst = Instruction(0, VXM, 0, "add", "L0.n", start=5, duration=2, latency=1)
        self.schedule = Schedule(
            cfg, ScheduleOptions(), [inst], {}, [], MemoryMap(cfg.mem_slice_count, cfg.mem_slice_bytes), {}, [], 8,
        )
        self.state = MachineState.start(self.schedule)

    def test_idle_cycle_only_advances(self):
        step(self.state)
        self.assertEqual(self.state.cycle, 1)
        self.assertEqual(self.state.fired, {})
        self.assertEqual(self.state.retired, {})
        self.assertEqual(self.state.values, {})

    def test_fire_and_retire(self):
        self.state.cycle = 5
        step(self.state)
        self.assertEqual(self.state.fired, {0: 5})
        self.state.cycle = 8
        step(self.state)
        self.assertEqual(self.state.retired, {0: 8})
        self.assertEqual(self.state.completed, 8)

    def test_stepping_past_the_end(self):
        self.state.cycle = 9
        with self.assertRaises(HazardError):
            step(self.state)

    def test_retire_without_fire(self):
        self.state.cycle = 8
        with self.assertRaises(HazardError):
            step(self.state)


class ReportTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        model = tiny_model(1, layers=3)
        cls.schedule = schedule_encoder(model.spec, tiny_arch())
        _, cls.report = run(cls.schedule, model_image(model))
        with_tail(cls.report)

    def test_unit_time_adds_up(self):
        r = self.report
        for name, busy in r.unit_busy.items():
            self.assertGreaterEqual(busy, 0)
            self.assertEqual(busy + r.unit_idle()[name], r.total_cycles)
            self.assertLessEqual(busy, r.total_cycles)

    def test_breakdown_covers_every_cycle(self):
        self.assertEqual(sum(self.report.block_totals().values()), self.report.total_cycles)
        self.assertGreater(self.report.encoder_fraction(), 0.9)

    def test_layers_take_equal_time(self):
        cycles = self.report.layer_cycles()
        self.assertEqual(len(cycles), 3)
        self.assertEqual(len(set(cycles)), 1)

    def test_memory_fractions(self):
        self.assertAlmostEqual(sum(self.report.memory.values()), 1.0)
        self.assertGreater(self.report.scratch_high_water_bytes, 0)
        self.assertGreaterEqual(self.report.mxm_idle_cycles, 0)

    def test_tail_from_single_run(self):
        self.assertEqual(self.report.tail["p1"], self.report.tail["p99"])
        self.assertEqual(self.report.tail["p1"][IDLE], self.report.idle_cycles)

    def test_summary_sections(self):
        text = self.report.summary()
        for section in ("[total]", "[blocks]", "[layers]", "[memory]", "[units]", "[p99 latency]"):
            self.assertIn(section, text)


@pytest.fixture(scope="module")
def stack_report():
    model = tiny_model(2, layers=2)
    _, report = run(schedule_encoder(model.spec, tiny_arch()), model_image(model))
    return with_tail(report)


@pytest.mark.parametrize("name", ["report.ecsv", "report.json"])
def test_report_round_trip(stack_report, tmp_path, name):
    path = tmp_path / name
    write_report(stack_report, path)
    assert read_report(path) == stack_report


def test_report_files_are_reproducible(stack_report, tmp_path):
    write_report(stack_report, tmp_path / "a.json")
    write_report(stack_report, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert json.loads((tmp_path / "a.json").read_text())["total_cycles"] == stack_report.total_cycles


@pytest.mark.parametrize(
    "name, content",
    [
        ("bad.json", "{not json"),
        ("bad.json", '{"clock_hz": 1.0}'),
        ("bad.ecsv", "# %ECSV 1.0\n# ---\n# datatype:\n# - {name: a, datatype: int64}\na\n1\n"),
    ],
)
def test_malformed_report(tmp_path, name, content):
    path = tmp_path / name
    path.write_text(content)
    with pytest.raises(TensorFormatError):
        read_report(path)


def test_missing_report(tmp_path):
    with pytest.raises(OSError):
        read_report(tmp_path / "absent.json")


def test_empty_report_dict():
    report = CycleReport.from_dict({"total_cycles": 0, "clock_hz": 900e6})
    assert report.encoder_fraction() == 0.0
    assert report.block_totals()[IDLE] == 0


@pytest.fixture(scope="module")
def bert_layer():
    return schedule_encoder(ModelSpec.preset("bert-base", layers=1))


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_bert_base_layer_matches_reference(bert_layer, seed):
    model = generate_model(bert_layer.spec, seed)
    values, report = run(bert_layer, model_image(model), all_values=True)
    assert check_oracle(values, reference_trace(model), required=bert_layer.outputs) > 20
    assert report.total_cycles == bert_layer.total_cycles


@pytest.mark.slow
def test_bert_base_prediction_within_one_percent(bert_layer):
    simulated = build_report(execute(replace(bert_layer, ops={})), bert_layer).total_cycles
    predicted = pt.predict_cycles(build_encoder_graph(bert_layer.spec), bert_layer.cfg)
    assert CLOSE_IN_VALUE(simulated, 0.01 * simulated) == predicted


@pytest.mark.slow
def test_twelve_layers_timing_only():
    spec = ModelSpec.preset("bert-base")
    schedule = schedule_encoder(spec)
    report = build_report(execute(replace(schedule, ops={})), schedule)
    cycles = report.layer_cycles()
    assert len(cycles) == spec.layers
    assert len(set(cycles)) == 1
    assert report.memory_bytes[SCRATCHPAD] < report.memory_bytes[CONSTANT] / 10
    assert 0 < report.scratch_high_water_bytes <= report.memory_bytes[SCRATCHPAD]
    predicted = pt.predict_cycles(build_encoder_graph(spec))
    assert CLOSE_IN_VALUE(report.total_cycles, 0.01 * report.total_cycles) == predicted
