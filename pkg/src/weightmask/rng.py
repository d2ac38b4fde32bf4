"""Named, independently seeded random streams.

Each stream is a Philox counter-based generator keyed by the experiment seed
and the stream name, so adding draws to one stream never shifts another.
"""
from __future__ import annotations

import zlib

import numpy as np

WEIGHTS_INIT = "weights-init"
MASK_SAMPLE = "mask-sample"
DATA_SHUFFLE = "data-shuffle"


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_generator(seed: int, name: str) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(_stream_key(name),))
    return np.random.Generator(np.random.Philox(seq))


class RngStreams:
    """Lazily created generators, one per stream name."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        gen = self._gens.get(name)
        if gen is None:
            gen = self._gens[name] = make_generator(self.seed, name)
        return gen

    def get_state(self) -> dict:
        return {name: _jsonable(g.bit_generator.state) for name, g in self._gens.items()}

    def set_state(self, state: dict) -> None:
        for name, st in state.items():
            self[name].bit_generator.state = _from_jsonable(st)


def _jsonable(state):
    if isinstance(state, dict):
        return {k: _jsonable(v) for k, v in state.items()}
    if isinstance(state, np.ndarray):
        return {"__ndarray__": state.tolist(), "dtype": str(state.dtype)}
    if isinstance(state, np.integer):
        return int(state)
    return state


def _from_jsonable(state):
    if isinstance(state, dict):
        if "__ndarray__" in state:
            return np.array(state["__ndarray__"], dtype=state["dtype"])
        return {k: _from_jsonable(v) for k, v in state.items()}
    return state
