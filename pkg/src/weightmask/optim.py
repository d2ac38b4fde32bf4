"""Parameter storage, Adam and global-norm gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor, get_dtype


class ParamStore:
    """Ordered named tensors with per-tensor and per-element freezing.

    A frozen tensor is excluded from gradient computation entirely.  An
    element freeze mask keeps the tensor trainable but pins the selected
    entries during optimizer updates.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        self.frozen_elements: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=get_dtype()), requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def numel(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def trainable(self) -> list[str]:
        return [n for n in self._tensors if n not in self.frozen]

    def freeze(self, names=None) -> None:
        for n in self._tensors if names is None else names:
            self.frozen.add(n)
            self._tensors[n].requires_grad = False

    def unfreeze(self, names=None) -> None:
        for n in self._tensors if names is None else names:
            self.frozen.discard(n)
            self._tensors[n].requires_grad = True

    def freeze_elements(self, name: str, where: np.ndarray) -> None:
        """Pin the entries of ``name`` where ``where`` is true (union with earlier pins)."""
        where = np.asarray(where, dtype=bool)
        if where.shape != self._tensors[name].shape:
            raise ValueError(f"freeze mask shape {where.shape} != {self._tensors[name].shape}")
        prev = self.frozen_elements.get(name)
        self.frozen_elements[name] = where.copy() if prev is None else prev | where

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        for n, arr in arrays.items():
            t = self._tensors[n]
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch loading {n}: {arr.shape} vs {t.shape}")
            t.data = np.array(arr, dtype=t.data.dtype)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place, skipping everything frozen."""
    names = params.trainable()
    for n in names:
        if n not in grads:
            raise KeyError(f"no gradient for trainable parameter {n!r}")
        if grads[n].shape != params[n].shape:
            raise ValueError(f"gradient shape {grads[n].shape} != parameter shape {params[n].shape} for {n!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for n in names:
        p = params[n]
        g = grads[n]
        m = state.m.get(n)
        if m is None:
            m = state.m[n] = np.zeros_like(p.data)
            state.v[n] = np.zeros_like(p.data)
        v = state.v[n]
        pinned = params.frozen_elements.get(n)
        if pinned is not None:
            g = np.where(pinned, 0, g)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        if pinned is not None:
            update[pinned] = 0
        p.data = (p.data - update).astype(p.data.dtype, copy=False)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values())))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {n: g * scale for n, g in grads.items()}, norm
