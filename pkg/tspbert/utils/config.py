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

import os
import argparse
import bittensor as bt
from .logging import setup_events_logger

COMMANDS = ("gen-weights", "schedule", "predict", "simulate", "report")


def check_config(cls, config: "bt.Config"):
    r"""Checks/validates the config namespace object and prepares the output directory."""
    bt.logging.check_config(config)

    config.full_path = os.path.expanduser(config.out)
    if not os.path.exists(config.full_path):
        os.makedirs(config.full_path, exist_ok=True)

    events_logger = None
    if not config.events.off:
        # Add custom event logger for the simulated blocks.
        events_logger = setup_events_logger(config.full_path, config.events.retention_size)
    return events_logger


def add_args(cls, parser):
    """
    Adds relevant arguments to the parser for operation.
    """

    parser.add_argument("command", choices=COMMANDS, help="Command to run.")

    parser.add_argument(
        "--arch",
        type=str,
        help="Machine description file (key = value). Defaults to the built-in machine.",
        default=None,
    )

    parser.add_argument(
        "--model",
        type=str,
        help="Model directory holding model.cfg and the tensor files.",
        default=None,
    )

    parser.add_argument(
        "--preset",
        type=str,
        help="Built-in model hyper-parameters used when no model directory is given.",
        default="bert-base",
    )

    parser.add_argument("--seed", type=int, help="Seed for generated weights and inputs.", default=0)

    parser.add_argument("--seq-len", "--seq_len", dest="seq_len", type=int, help="Sequence length.", default=None)

    parser.add_argument("--layers", type=int, help="Number of encoder layers.", default=None)

    parser.add_argument("--out", type=str, help="Output directory.", default="./tspbert_out")

    parser.add_argument(
        "--report",
        type=str,
        help="Report file read by the report command. Defaults to <out>/report.ecsv.",
        default=None,
    )

    parser.add_argument(
        "--dump-schedule",
        "--dump_schedule",
        dest="dump_schedule",
        action="store_true",
        help="Write the schedule dump (schedule.tsv) to the output directory.",
        default=False,
    )

    parser.add_argument(
        "--json",
        action="store_true",
        help="Print machine-readable JSON instead of text.",
        default=False,
    )

    parser.add_argument(
        "--runs",
        type=int,
        help="Number of repeated simulations used for the latency statistics.",
        default=1,
    )

    parser.add_argument(
        "--schedule.no_fuse_gelu",
        action="store_true",
        help="Store the FF1 result before running GELU.",
        default=False,
    )

    parser.add_argument(
        "--schedule.no_overlap_layernorm",
        action="store_true",
        help="Store the GEMM result before the first layernorm pass.",
        default=False,
    )

    parser.add_argument(
        "--schedule.no_overlap_softmax",
        action="store_true",
        help="Store the attention scores before the first softmax pass.",
        default=False,
    )

    parser.add_argument(
        "--schedule.no_overlap_v_gemm",
        action="store_true",
        help="Start the V projection only after the softmax finishes.",
        default=False,
    )

    parser.add_argument(
        "--schedule.single_buffer",
        action="store_true",
        help="Install each weight tile only after the previous tile finished streaming.",
        default=False,
    )

    parser.add_argument(
        "--events.retention_size",
        type=int,
        help="Events retention size in bytes.",
        default=16 * 1024 * 1024,
    )

    parser.add_argument(
        "--events.off",
        action="store_true",
        help="If set, simulated block events are not saved to a log file.",
        default=False,
    )


def config(cls, args=None):
    """
    Returns the configuration object after adding relevant arguments.
    """
    parser = argparse.ArgumentParser(prog="tspbert")
    bt.logging.add_args(parser)
    cls.add_args(parser)
    return bt.config(parser, args=args)
