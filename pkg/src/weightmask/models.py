"""Maskable feedforward and LSTM networks.

Both models read their weights from a mapping ``name -> Tensor`` at call
time, so the same network can be evaluated with raw parameters, a sampled
mask or a thresholded mask without copying anything.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .optim import ParamStore
from .tensor import ShapeError, Tensor


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class FeedForwardNet:
    """ReLU MLP; the last layer is linear and produces logits."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        self.sizes = sizes
        self.params = ParamStore()
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params.add(f"layer{i}.weight", kaiming_uniform(rng, fan_in, (fan_in, fan_out)))
            self.params.add(f"layer{i}.bias", np.zeros(fan_out))

    @property
    def num_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def input_size(self) -> int:
        return self.sizes[0]

    @property
    def output_size(self) -> int:
        return self.sizes[-1]

    def logits(self, x, weights: Mapping[str, Tensor] | None = None) -> Tensor:
        w = self.params if weights is None else weights
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ShapeError(f"expected input [batch, {self.sizes[0]}], got {x.shape}")
        h = T.Tensor(x)
        for i in range(self.num_layers):
            h = h @ w[f"layer{i}.weight"] + w[f"layer{i}.bias"]
            if i < self.num_layers - 1:
                h = T.relu(h)
        return h

    def layer_groups(self) -> list[tuple[str, list[str]]]:
        return [(f"layer{i}", [f"layer{i}.weight", f"layer{i}.bias"]) for i in range(self.num_layers)]

    def weight_names(self) -> list[str]:
        return [f"layer{i}.weight" for i in range(self.num_layers)]

    def io_names(self) -> tuple[list[str], list[str]]:
        last = self.num_layers - 1
        return ["layer0.weight", "layer0.bias"], [f"layer{last}.weight", f"layer{last}.bias"]

    def layer_census(self) -> dict[str, int]:
        return {f"layer{i}": a * b + b for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:]))}


@dataclass(frozen=True)
class PresentationSchedule:
    """How a static input is shown to a recurrent net over time.

    ``repeat-all`` shows the whole input for ``steps_per_segment`` steps and
    reads the output once at the end.  ``sequential-pairs`` walks through
    ``segments``: segment ``j`` shows only the input columns
    ``segments[j][0]`` (the rest zeroed) and its readout supplies the output
    columns ``segments[j][1]``.  The recurrent state is carried across
    segments.
    """

    mode: str = "repeat-all"
    steps_per_segment: int = 3
    segments: tuple = ()

    def __post_init__(self):
        if self.mode not in ("repeat-all", "sequential-pairs"):
            raise ValueError(f"unknown presentation mode {self.mode!r}")
        if self.steps_per_segment < 1:
            raise ValueError("steps_per_segment must be >= 1")
        if self.mode == "sequential-pairs" and not self.segments:
            raise ValueError("sequential-pairs needs at least one segment")

    @property
    def num_segments(self) -> int:
        return 1 if self.mode == "repeat-all" else len(self.segments)

    @property
    def horizon(self) -> int:
        return self.steps_per_segment * self.num_segments

    @property
    def readout_steps(self) -> list[int]:
        return [self.steps_per_segment * (j + 1) for j in range(self.num_segments)]

    def step_inputs(self, x: np.ndarray) -> list[np.ndarray]:
        if self.mode == "repeat-all":
            return [x] * self.horizon
        steps = []
        for (lo, hi), _ in self.segments:
            shown = np.zeros_like(x)
            shown[:, lo:hi] = x[:, lo:hi]
            steps.extend([shown] * self.steps_per_segment)
        return steps


class LSTMNet:
    """Single-layer LSTM (gate order i, f, g, o; no peepholes) with a linear readout."""

    def __init__(self, input_size: int, hidden_size: int, output_size: int,
                 rng: np.random.Generator, schedule: PresentationSchedule | None = None):
        if min(input_size, hidden_size, output_size) < 1:
            raise ValueError("LSTM sizes must be positive")
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.output_size = output_size
        self.schedule = schedule or PresentationSchedule()
        H = hidden_size
        bias = np.zeros(4 * H)
        bias[H:2 * H] = 1.0
        self.params = ParamStore()
        self.params.add("lstm.w_ih", kaiming_uniform(rng, input_size, (input_size, 4 * H)) / np.sqrt(3))
        self.params.add("lstm.w_hh", kaiming_uniform(rng, H, (H, 4 * H)) / np.sqrt(3))
        self.params.add("lstm.bias", bias)
        self.params.add("out.weight", kaiming_uniform(rng, H, (H, output_size)) / np.sqrt(3))
        self.params.add("out.bias", np.zeros(output_size))

    def initial_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.hidden_size))
        return T.Tensor(z), T.Tensor(z)

    def step(self, x: np.ndarray, state, w: Mapping[str, Tensor]):
        h, c = state
        H = self.hidden_size
        z = T.Tensor(x) @ w["lstm.w_ih"] + h @ w["lstm.w_hh"] + w["lstm.bias"]
        i = T.sigmoid(z[:, :H])
        f = T.sigmoid(z[:, H:2 * H])
        g = T.tanh(z[:, 2 * H:3 * H])
        o = T.sigmoid(z[:, 3 * H:])
        c = f * c + i * g
        h = o * T.tanh(c)
        return h, c

    def run(self, steps: Sequence[np.ndarray], weights: Mapping[str, Tensor] | None = None,
            state=None, readout: Sequence[int] = ()):
        """Feed ``steps`` in order; return readout logits (1-based step indices) and final state."""
        w = self.params if weights is None else weights
        if state is None:
            state = self.initial_state(len(steps[0]))
        outs = []
        wanted = set(readout)
        for t, x in enumerate(steps, start=1):
            x = np.asarray(x)
            if x.ndim != 2 or x.shape[1] != self.input_size:
                raise ShapeError(f"expected input [batch, {self.input_size}], got {x.shape}")
            state = self.step(x, state, w)
            if t in wanted:
                outs.append(state[0] @ w["out.weight"] + w["out.bias"])
        return outs, state

    def logits(self, x, weights: Mapping[str, Tensor] | None = None) -> Tensor:
        sched = self.schedule
        outs, _ = self.run(sched.step_inputs(np.asarray(x)), weights, readout=sched.readout_steps)
        if sched.mode == "repeat-all":
            return outs[0]
        pieces = []
        for out, (_, (lo, hi)) in zip(outs, sched.segments):
            pieces.append(out[:, lo:hi])
        return T.concat(pieces, axis=1)

    def layer_groups(self) -> list[tuple[str, list[str]]]:
        return [
            ("input", ["lstm.w_ih"]),
            ("recurrent", ["lstm.w_hh", "lstm.bias"]),
            ("output", ["out.weight", "out.bias"]),
        ]

    def weight_names(self) -> list[str]:
        return ["lstm.w_ih", "lstm.w_hh", "out.weight"]

    def io_names(self) -> tuple[list[str], list[str]]:
        return ["lstm.w_ih"], ["out.weight", "out.bias"]
