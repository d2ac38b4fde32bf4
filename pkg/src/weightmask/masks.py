"""Probabilistic binary weight masks.

A :class:`MaskSet` holds one logit per maskable weight.  Training samples
binary masks through a Gumbel-Sigmoid relaxation with a straight-through
estimator, so the keep decision is hard in the forward pass while gradients
reach the logits.  After training, :func:`threshold` turns logits into a
deterministic :class:`BinaryMask`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import tensor as T
from .optim import ParamStore
from .tensor import Tensor

UNIFORM_EPS = 2.0**-24


def logit(p: float) -> float:
    if not 0 < p < 1:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    return float(np.log(p / (1 - p)))


@dataclass
class BinaryMask:
    """Deterministic keep (1) / remove (0) decisions for maskable parameters."""

    bits: dict[str, np.ndarray]
    stage: str = ""

    def __post_init__(self):
        self.bits = {n: np.asarray(b).astype(bool) for n, b in self.bits.items()}

    def names(self) -> list[str]:
        return list(self.bits)

    def kept(self, name: str | None = None) -> int:
        if name is not None:
            return int(self.bits[name].sum())
        return int(sum(b.sum() for b in self.bits.values()))

    def total(self, name: str | None = None) -> int:
        if name is not None:
            return int(self.bits[name].size)
        return int(sum(b.size for b in self.bits.values()))

    def invert(self) -> "BinaryMask":
        return invert(self)

    def replace(self, other: "BinaryMask", names: Iterable[str]) -> "BinaryMask":
        """Copy with the bits of ``names`` taken from ``other``."""
        bits = dict(self.bits)
        for n in names:
            bits[n] = other.bits[n]
        return BinaryMask(bits, self.stage)

    def ones_like(self) -> "BinaryMask":
        return BinaryMask({n: np.ones_like(b) for n, b in self.bits.items()}, self.stage)

    def pack(self) -> dict[str, np.ndarray]:
        return {n: np.packbits(b.ravel()) for n, b in self.bits.items()}

    @classmethod
    def unpack(cls, packed: Mapping[str, np.ndarray], shapes: Mapping[str, tuple], stage: str = "") -> "BinaryMask":
        bits = {}
        for n, blob in packed.items():
            shape = tuple(shapes[n])
            count = int(np.prod(shape))
            bits[n] = np.unpackbits(blob, count=count).astype(bool).reshape(shape)
        return cls(bits, stage)

    def equals(self, other: "BinaryMask") -> bool:
        return self.bits.keys() == other.bits.keys() and all(
            np.array_equal(b, other.bits[n]) for n, b in self.bits.items()
        )


@dataclass
class MaskSet:
    """Trainable mask logits aligned with a parameter store.

    ``fixed`` maps parameter names to constant bits that are applied as-is
    and never trained (e.g. an output layer pinned to a control mask).
    """

    logits: ParamStore
    excluded: frozenset = frozenset()
    tau: float = 1.0
    stage: str = ""
    fixed: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")

    def trained_names(self) -> list[str]:
        return self.logits.names()

    def maskable_names(self) -> list[str]:
        return self.logits.names() + [n for n in self.fixed if n not in self.logits]

    def check_aligned(self, params: ParamStore) -> None:
        for n in self.maskable_names():
            if n not in params:
                raise ValueError(f"mask entry {n!r} has no matching parameter")
            shape = self.logits[n].shape if n in self.logits else self.fixed[n].shape
            if shape != params[n].shape:
                raise ValueError(f"mask entry {n!r} shape {shape} != parameter shape {params[n].shape}")
        for n in params:
            if n not in self.excluded and n not in self.logits and n not in self.fixed:
                raise ValueError(f"parameter {n!r} is neither masked nor excluded")


def init_mask(
    params: ParamStore,
    keep_prob: float = 0.9,
    exclude: Iterable[str] = (),
    tau: float = 1.0,
    stage: str = "",
    fixed: Mapping[str, np.ndarray] | None = None,
) -> MaskSet:
    """Logits for every non-excluded parameter, all set to ``logit(keep_prob)``."""
    value = logit(keep_prob)
    excluded = frozenset(exclude)
    fixed = {n: np.asarray(b).astype(bool) for n, b in (fixed or {}).items()}
    store = ParamStore()
    for name, p in params.items():
        if name in excluded or name in fixed:
            continue
        store.add(name, np.full(p.shape, value))
    mask = MaskSet(store, excluded, tau, stage, fixed)
    mask.check_aligned(params)
    return mask


def draw_uniforms(mask: MaskSet, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh per-element (U1, U2) pairs, stacked on a leading axis of size 2."""
    names = mask.trained_names()
    sizes = [mask.logits[n].size for n in names]
    flat = rng.random((2, sum(sizes)), dtype=np.float32)
    # float32 draws are multiples of 2**-24 below 1, so only the lower end needs the clamp
    np.maximum(flat, UNIFORM_EPS, out=flat)
    out = {}
    offset = 0
    for n, size in zip(names, sizes):
        out[n] = flat[:, offset:offset + size].reshape((2,) + mask.logits[n].shape)
        offset += size
    return out


def gumbel_noise(u: np.ndarray) -> np.ndarray:
    """``log(log U1 / log U2)`` for stacked uniforms, computed in the active precision."""
    lu = np.log(u.astype(T.get_dtype(), copy=False))
    return np.log(lu[0] / lu[1])


def sample_soft(
    mask: MaskSet,
    rng: np.random.Generator | None = None,
    uniforms: Mapping[str, np.ndarray] | None = None,
) -> dict[str, Tensor]:
    """Gumbel-Sigmoid relaxed samples ``s`` in (0, 1), differentiable w.r.t. the logits."""
    if uniforms is None:
        if rng is None:
            raise ValueError("sample_soft needs an rng or explicit uniforms")
        uniforms = draw_uniforms(mask, rng)
    out = {}
    for n in mask.trained_names():
        z = mask.logits[n] - gumbel_noise(uniforms[n])
        if mask.tau != 1.0:
            z = z * (1.0 / mask.tau)
        out[n] = T.sigmoid(z)
    return out


def binarize_ste(s: Tensor) -> Tensor:
    """Hard 0/1 forward value, identity gradient backward."""
    hard = (s.data > 0.5).astype(s.data.dtype)
    return T.stop_gradient(hard - s.data) + s


def sample_binary(
    mask: MaskSet,
    rng: np.random.Generator | None = None,
    uniforms: Mapping[str, np.ndarray] | None = None,
) -> dict[str, Tensor]:
    """One straight-through binary sample per maskable tensor (fixed bits included).

    Equal to ``binarize_ste(sample_soft(...))`` but fused into one graph node per tensor.
    """
    if uniforms is None:
        if rng is None:
            raise ValueError("sample_binary needs an rng or explicit uniforms")
        uniforms = draw_uniforms(mask, rng)
    scale = 1.0 if mask.tau == 1.0 else 1.0 / mask.tau
    bits = {n: T.ste_sigmoid(mask.logits[n], gumbel_noise(uniforms[n]), scale) for n in mask.trained_names()}
    for n, b in mask.fixed.items():
        bits[n] = Tensor(b)
    return bits


def apply_mask(params: ParamStore, bits: Mapping[str, Tensor | np.ndarray] | "BinaryMask") -> dict[str, Tensor]:
    """Masked weights ``w * b`` for every masked tensor; the rest pass through."""
    if isinstance(bits, BinaryMask):
        bits = bits.bits
    for n, b in bits.items():
        if n not in params:
            raise ValueError(f"mask entry {n!r} has no matching parameter")
        if tuple(np.shape(b.data if isinstance(b, Tensor) else b)) != params[n].shape:
            raise ValueError(f"mask entry {n!r} is misaligned with its parameter")
    out = {}
    for n, p in params.items():
        b = bits.get(n)
        if b is None:
            out[n] = p
        elif isinstance(b, Tensor):
            out[n] = p * b
        else:
            out[n] = p * Tensor(b)
    return out


def regularizer(mask: MaskSet, alpha: float) -> Tensor:
    """``alpha`` times the signed sum of all trained logits."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    total = None
    for n in mask.trained_names():
        s = mask.logits[n].sum()
        total = s if total is None else total + s
    if total is None:
        return Tensor(0.0)
    return total * alpha


def threshold(mask: MaskSet) -> BinaryMask:
    """Keep a weight iff its logit is strictly positive, i.e. sigma(l) > 0.5."""
    bits = {}
    for n in mask.maskable_names():
        bits[n] = mask.logits[n].data > 0 if n in mask.logits else mask.fixed[n].copy()
    return BinaryMask(bits, mask.stage)


def invert(mask: BinaryMask) -> BinaryMask:
    return BinaryMask({n: ~b for n, b in mask.bits.items()}, mask.stage + "~" if mask.stage else "")


def split_sizes(n: int, k: int) -> list[int]:
    """Contiguous near-equal part sizes, remainder going to the first parts."""
    if not 1 <= k <= n:
        raise ValueError(f"cannot split a batch of {n} into {k} parts")
    base, extra = divmod(n, k)
    return [base + 1 if i < extra else base for i in range(k)]


def multi_sample_step(
    forward: Callable[[np.ndarray, Mapping[str, Tensor]], Tensor],
    loss_fn: Callable[[Tensor, slice], Tensor],
    params: ParamStore,
    mask: MaskSet,
    x: np.ndarray,
    k: int,
    rng: np.random.Generator,
) -> Tensor:
    """Size-weighted mean loss over ``k`` batch parts, each under its own mask sample.

    ``forward(x_part, weights)`` returns logits; ``loss_fn(logits, rows)``
    returns the mean loss of the rows selected by the slice.
    """
    n = len(x)
    total = None
    start = 0
    for size in split_sizes(n, k):
        rows = slice(start, start + size)
        start += size
        weights = apply_mask(params, sample_binary(mask, rng))
        part = loss_fn(forward(x[rows], weights), rows) * (size / n)
        total = part if total is None else total + part
    return total


def biased_reinit(mask: MaskSet, prev_bits: BinaryMask, p_old: float, p_new: float) -> MaskSet:
    """New logits: ``logit(p_old)`` where ``prev_bits`` keeps a weight, ``logit(p_new)`` elsewhere."""
    if not 0 < p_new <= p_old < 1:
        raise ValueError("need 0 < p_new <= p_old < 1")
    hi, lo = logit(p_old), logit(p_new)
    store = ParamStore()
    for n in mask.trained_names():
        prev = prev_bits.bits.get(n)
        shape = mask.logits[n].shape
        store.add(n, np.full(shape, lo) if prev is None else np.where(prev, hi, lo))
    return MaskSet(store, mask.excluded, mask.tau, mask.stage, dict(mask.fixed))
