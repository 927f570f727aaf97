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
import tempfile
import unittest

import numpy as np
import pytest

from tspbert.errors import ConfigError, TensorFormatError
from tspbert.graph import ModelSpec
from tspbert.reference import encoder_ref
from tspbert.weights import (
    BIASES, INPUT_FILE, MODEL_CONFIG, NORMS, WEIGHTS, format_model_config, generate_model, load_model,
    parameter_bytes, parse_model_config, save_model,
)

from tests.helpers import tiny_model, tiny_spec


def files_of(directory):
    return {name: (directory / name).read_bytes() for name in sorted(os.listdir(directory))}


def test_same_seed_same_bytes(tmp_path):
    save_model(tiny_model(4, layers=2), tmp_path / "a")
    save_model(tiny_model(4, layers=2), tmp_path / "b")
    a, b = files_of(tmp_path / "a"), files_of(tmp_path / "b")
    assert a == b
    assert MODEL_CONFIG in a and INPUT_FILE in a
    assert len(a) == 2 + 2 * (len(WEIGHTS) + len(BIASES) + len(NORMS) + 1)


def test_different_seeds_differ():
    a, b = tiny_model(1), tiny_model(2)
    assert not np.array_equal(a.layers[0].w_q.data, b.layers[0].w_q.data)


class SaveLoadTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = self.tmp.name
        self.model = tiny_model(6, layers=2)
        save_model(self.model, self.dir)

    def test_round_trip(self):
        loaded = load_model(self.dir)
        self.assertEqual(loaded.spec, self.model.spec)
        self.assertEqual(loaded.eps, self.model.eps)
        np.testing.assert_array_equal(loaded.x.data, self.model.x.data)
        self.assertEqual(loaded.x.scale, self.model.x.scale)
        for got, want in zip(loaded.layers, self.model.layers):
            for name in WEIGHTS:
                np.testing.assert_array_equal(getattr(got, name).data, getattr(want, name).data)
                self.assertEqual(getattr(got, name).scale, getattr(want, name).scale)
            for name in BIASES + NORMS:
                np.testing.assert_array_equal(getattr(got, name), getattr(want, name))
            self.assertEqual(got.scales, want.scales)

    def test_loaded_model_computes_the_same(self):
        loaded = load_model(self.dir)
        _, a = encoder_ref(self.model.x, self.model.layers)
        _, b = encoder_ref(loaded.x, loaded.layers)
        np.testing.assert_array_equal(a.data, b.data)

    def test_corrupted_magic(self):
        path = os.path.join(self.dir, "L1.w_o.qtsr")
        with open(path, "r+b") as f:
            f.write(b"XXXX")
        with self.assertRaises(TensorFormatError):
            load_model(self.dir)

    def test_wrong_tensor_kind(self):
        os.replace(os.path.join(self.dir, "L0.gamma1.qtsr"), os.path.join(self.dir, "L0.b_q.qtsr"))
        with self.assertRaises(TensorFormatError):
            load_model(self.dir)

    def test_missing_tensor(self):
        os.remove(os.path.join(self.dir, "L0.w_2.qtsr"))
        with self.assertRaises(TensorFormatError):
            load_model(self.dir)

    def test_sequence_length_mismatch(self):
        with self.assertRaises(ConfigError):
            load_model(self.dir, seq_len=16)

    def test_missing_config(self):
        os.remove(os.path.join(self.dir, MODEL_CONFIG))
        with self.assertRaises(ConfigError):
            load_model(self.dir)


class ModelConfigTestCase(unittest.TestCase):
    def test_round_trip(self):
        spec = tiny_spec(layers=3, seq_len=12)
        self.assertEqual(parse_model_config(format_model_config(spec, 1e-6)), (spec, 1e-6))

    def test_eps_defaults(self):
        text = "heads = 2\nhead_size = 8\nd_model = 16\nd_ff = 64\nlayers = 1\nseq_len = 8  # tokens\n"
        spec, eps = parse_model_config(text)
        self.assertEqual(spec.seq_len, 8)
        self.assertEqual(eps, 1e-12)

    def test_heads_times_head_size(self):
        text = "heads = 2\nhead_size = 8\nd_model = 15\nd_ff = 64\nlayers = 1\nseq_len = 8\n"
        with self.assertRaises(ConfigError):
            parse_model_config(text)

    def test_errors(self):
        for text in ("heads = 2\n", "heads 2\n", "heads = two\n", "colour = red\n"):
            with self.assertRaises(ConfigError):
                parse_model_config(text)


def test_generated_scales_chain_layers():
    model = tiny_model(8, layers=2)
    first, second = model.layers
    assert first.scales.x == model.x.scale
    assert second.scales.x == first.scales.out
    assert first.b_q.dtype == np.int32


def test_parameter_bytes():
    assert parameter_bytes(ModelSpec.preset("bert-base")) == 85_413_888
    spec = tiny_spec()
    assert parameter_bytes(spec) == 4 * 16 * 16 + 2 * 16 * 64 + 4 * (5 * 16 + 64) + 16 * 16


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_generated_model_is_finite(seed):
    model = tiny_model(seed)
    out_f, out_q = encoder_ref(model.x, model.layers)
    assert np.isfinite(out_f.data).all()
    assert out_q.data.dtype == np.int8
