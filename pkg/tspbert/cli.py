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
import os
import sys

import bittensor as bt

from tspbert import constants
from tspbert.errors import ConfigError, OracleMismatchError, TspError
from tspbert.graph import ModelSpec, build_encoder_graph
from tspbert.machine import ArchConfig, load_arch
from tspbert.predictor import ScheduleOptions, block_breakdown, plan_layer, predict_time
from tspbert.reference import EncoderTrace, encoder_ref, precision_report
from tspbert.report import read_report, with_tail, write_report
from tspbert.scheduler import dump_schedule, schedule_encoder
from tspbert.simulator import check_oracle, memory_image, run, summarize_latency
from tspbert.utils.config import add_args, check_config, config
from tspbert.weights import generate_model, load_model, save_model

SCHEDULE_DUMP = "schedule.tsv"
REPORT_FILE = "report.ecsv"


class TspBert:
    """
    Command-line front end. Each command reads the parsed config, does its work and
    returns a dict that is printed as `key: value` lines or as JSON.
    """

    @classmethod
    def check_config(cls, config: "bt.Config"):
        return check_config(cls, config)

    @classmethod
    def add_args(cls, parser):
        add_args(cls, parser)

    @classmethod
    def config(cls, args=None):
        return config(cls, args)

    def __init__(self, config=None, args=None):
        self.config = config or TspBert.config(args)
        self.events_logger = self.check_config(self.config)
        bt.logging(config=self.config, logging_dir=self.config.full_path)

    # inputs

    def arch(self) -> ArchConfig:
        if self.config.arch:
            return load_arch(self.config.arch)
        if self.config.preset == "tiny":
            return ArchConfig(**constants.TINY_ARCH)
        return ArchConfig()

    def spec(self) -> ModelSpec:
        if self.config.model:
            return self.model().spec
        return ModelSpec.preset(self.config.preset, seq_len=self.config.seq_len, layers=self.config.layers)

    def model(self):
        if not self.config.model:
            return generate_model(self.spec(), self.config.seed)
        if getattr(self, "_model", None) is None:
            model = load_model(self.config.model, seq_len=self.config.seq_len)
            if self.config.layers is not None and self.config.layers != model.spec.layers:
                raise ConfigError(f"model has {model.spec.layers} layers, not {self.config.layers}")
            self._model = model
        return self._model

    def options(self) -> ScheduleOptions:
        s = self.config.schedule
        return ScheduleOptions(
            fuse_gelu=not s.no_fuse_gelu,
            overlap_layernorm=not s.no_overlap_layernorm,
            overlap_softmax=not s.no_overlap_softmax,
            overlap_v_gemm=not s.no_overlap_v_gemm,
            double_buffer_weights=not s.single_buffer,
        )

    def path(self, name):
        return os.path.join(self.config.full_path, name)

    # commands

    def gen_weights(self):
        model = generate_model(self.spec(), self.config.seed)
        save_model(model, self.config.full_path)
        return {"model": self.config.full_path, "layers": model.spec.layers, "seed": self.config.seed}

    def schedule(self):
        cfg, spec, options = self.arch(), self.spec(), self.options()
        schedule = schedule_encoder(spec, cfg, options)
        predicted, time = predict_time(build_encoder_graph(spec), cfg, options)
        dump_schedule(schedule, self.path(SCHEDULE_DUMP))
        return {
            "instructions": len(schedule.instructions),
            "predicted_cycles": predicted,
            "predicted_us": round(float(time.value), 3),
            "scheduled_cycles": schedule.total_cycles,
            "dump": self.path(SCHEDULE_DUMP),
        }

    def predict(self):
        cfg, spec, options = self.arch(), self.spec(), self.options()
        cycles, time = predict_time(build_encoder_graph(spec), cfg, options)
        out = {"predicted_cycles": cycles, "predicted_us": round(float(time.value), 3), "layers": spec.layers}
        for block, block_cycles in block_breakdown(plan_layer(spec, cfg, options)).items():
            out[f"layer {block}"] = block_cycles
        return out

    def simulate(self):
        if self.config.runs < 1:
            raise ConfigError(f"--runs must be >= 1, got {self.config.runs}")
        cfg, options, model = self.arch(), self.options(), self.model()
        spec = model.spec
        schedule = schedule_encoder(spec, cfg, options)
        if self.config.dump_schedule:
            dump_schedule(schedule, self.path(SCHEDULE_DUMP))
        image = memory_image(model.x, model.layers)

        values, report = run(schedule, image, cfg, self.events_logger, all_values=True)
        reports = [report] + [run(schedule, image, cfg)[1] for _ in range(self.config.runs - 1)]
        with_tail(report, reports)
        latency = summarize_latency([r.total_cycles for r in reports], cfg)

        trace = EncoderTrace()
        encoder_ref(model.x, model.layers, trace)
        verdict, compared = "PASS", 0
        try:
            compared = check_oracle(values, trace, required=schedule.outputs)
        except OracleMismatchError as e:
            verdict = "FAIL"
            bt.logging.error(f"oracle mismatch: {e}")
        write_report(report, self.path(REPORT_FILE))

        predicted = schedule.predicted_total
        out = {
            "oracle": verdict,
            "values_compared": compared,
            "simulated_cycles": report.total_cycles,
            "simulated_us": round(report.total_us, 3),
            "predicted_cycles": predicted,
            "prediction_error": round(abs(predicted - report.total_cycles) / max(report.total_cycles, 1), 6),
            "latency_std_cycles": latency["std"],
            "latency_p99_cycles": latency["p99"],
            "report": self.path(REPORT_FILE),
            "precision": precision_report(model.x, model.layers),
        }
        if verdict == "FAIL":
            self.emit(out)
            raise OracleMismatchError("simulated values differ from the reference model")
        self.summary = report.summary()
        return out

    def report(self):
        path = self.config.report or self.path(REPORT_FILE)
        report = read_report(path)
        if self.config.json:
            return report.to_dict()
        self.summary = report.summary()
        return {}

    # output

    def emit(self, result):
        if self.config.json:
            print(json.dumps(result, indent=2, sort_keys=True, default=float))
            return
        summary = getattr(self, "summary", None)
        if summary:
            print(summary, end="")
        for key, value in result.items():
            if isinstance(value, dict):
                value = ", ".join(f"{k}={v}" for k, v in value.items())
            print(f"{key}: {value}")

    def run(self) -> int:
        command = self.config.command.replace("-", "_")
        result = getattr(self, command)()
        self.emit(result)
        bt.logging.success(f"{self.config.command} finished")
        return 0


def main(argv=None) -> int:
    """Entry point; converts library errors into exit codes."""
    try:
        return TspBert(args=argv).run()
    except TspError as e:
        bt.logging.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        bt.logging.error(f"{e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
