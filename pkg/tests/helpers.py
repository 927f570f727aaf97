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


from typing import Union

import numpy as np

from tspbert import constants
from tspbert.graph import ModelSpec
from tspbert.machine import ArchConfig
from tspbert.reference import EncoderTrace, encoder_ref
from tspbert.simulator import memory_image
from tspbert.weights import generate_model


def tiny_arch(**overrides) -> ArchConfig:
    """The small machine used with the tiny model preset."""
    return ArchConfig(**{**constants.TINY_ARCH, **overrides})


def tiny_spec(**overrides) -> ModelSpec:
    return ModelSpec.preset("tiny", **overrides)


def tiny_model(seed=0, **overrides):
    return generate_model(tiny_spec(**overrides), seed)


def model_image(model):
    return memory_image(model.x, model.layers)


def reference_trace(model) -> EncoderTrace:
    trace = EncoderTrace()
    encoder_ref(model.x, model.layers, trace)
    return trace


def random_int8(rng, shape):
    return rng.integers(-128, 128, size=shape, dtype=np.int64).astype(np.int8)


class CLOSE_IN_VALUE:
    value: Union[float, int]
    tolerance: Union[float, int]

    def __init__(
        self,
        value: Union[float, int],
        tolerance: Union[float, int] = 0.0,
    ) -> None:
        self.value = value
        self.tolerance = tolerance

    def __eq__(self, __o: Union[float, int]) -> bool:
        # True if __o \in [value - tolerance, value + tolerance]
        # or if value \in [__o - tolerance, __o + tolerance]
        return (
            (self.value - self.tolerance) <= __o
            and __o <= (self.value + self.tolerance)
        ) or (
            (__o - self.tolerance) <= self.value
            and self.value <= (__o + self.tolerance)
        )

    def __repr__(self) -> str:
        return f"CLOSE_IN_VALUE({self.value} ± {self.tolerance})"
