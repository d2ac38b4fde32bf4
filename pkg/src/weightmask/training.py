"""Optimization loops shared by every experiment pipeline."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .masks import MaskSet, multi_sample_step, regularizer
from .optim import AdamState, ParamStore, adam_step, clip_global_norm
from .tasks import DatasetBatch, Sampler

log = logging.getLogger(__name__)


class FrozenWeightsChanged(AssertionError):
    """A tensor that must stay frozen was modified."""


def assert_unchanged(params: ParamStore, snapshot: dict[str, np.ndarray], names=None, where=None) -> None:
    """Bitwise comparison against an earlier snapshot (optionally only at ``where`` positions)."""
    for n in snapshot if names is None else names:
        now, before = params[n].data, snapshot[n]
        if where is not None and n in where:
            now, before = now[where[n]], before[where[n]]
        if now.tobytes() != before.tobytes():
            raise FrozenWeightsChanged(f"frozen parameter {n!r} was modified")


def task_loss(model, batch: DatasetBatch, weights=None) -> T.Tensor:
    return T.cross_entropy(model.logits(batch.x, weights), batch.targets, batch.group_size)


@dataclass
class LoopResult:
    steps: int
    last_loss: float
    stopped_early: bool = False


def _early_exit(evaluate: Callable[[], float] | None, every: int, step: int, target: float | None) -> bool:
    if evaluate is None or target is None or every <= 0 or step % every:
        return False
    return evaluate() >= target


def train_weights(model, sampler: Sampler, steps: int, rng: np.random.Generator, *,
                  batch_size: int = 128, lr: float = 1e-3, clip: float = 1.0,
                  state: AdamState | None = None, evaluate: Callable[[], float] | None = None,
                  eval_every: int = 0, target: float | None = None) -> LoopResult:
    """Plain supervised training of every unfrozen parameter."""
    params = model.params
    state = state or AdamState(lr=lr)
    loss_value = float("nan")
    for step in range(1, steps + 1):
        batch = sampler(batch_size, rng)
        loss = task_loss(model, batch)
        names = params.trainable()
        grads = dict(zip(names, T.grad(loss, [params[n] for n in names])))
        grads, _ = clip_global_norm(grads, clip)
        adam_step(params, grads, state)
        loss_value = loss.item()
        if _early_exit(evaluate, eval_every, step, target):
            return LoopResult(step, loss_value, True)
    return LoopResult(steps, loss_value)


def mask_loss(model, mask: MaskSet, batch: DatasetBatch, k: int, alpha: float,
              rng: np.random.Generator) -> T.Tensor:
    def part_loss(logits, rows):
        return T.cross_entropy(logits, batch.targets[rows], batch.group_size)

    loss = multi_sample_step(model.logits, part_loss, model.params, mask, batch.x, k, rng)
    return loss + regularizer(mask, alpha)


def train_mask(model, mask: MaskSet, sampler: Sampler, steps: int, data_rng: np.random.Generator,
               mask_rng: np.random.Generator, *, batch_size: int = 128, lr: float = 1e-2,
               alpha: float = 0.0, k: int = 4, clip: float = 1.0, state: AdamState | None = None,
               train_weights: bool = False, weight_state: AdamState | None = None,
               evaluate: Callable[[], float] | None = None, eval_every: int = 0,
               target: float | None = None) -> LoopResult:
    """Optimize mask logits (and, with ``train_weights``, the unfrozen weights too)."""
    params = model.params
    state = state or AdamState(lr=lr)
    if train_weights:
        weight_state = weight_state or AdamState(lr=lr)
    loss_value = float("nan")
    for step in range(1, steps + 1):
        batch = sampler(batch_size, data_rng)
        loss = mask_loss(model, mask, batch, k, alpha, mask_rng)
        mnames = mask.trained_names()
        wnames = params.trainable() if train_weights else []
        leaves = [mask.logits[n] for n in mnames] + [params[n] for n in wnames]
        g = T.grad(loss, leaves)
        grads = {("mask", n): v for n, v in zip(mnames, g)}
        grads.update({("weight", n): v for n, v in zip(wnames, g[len(mnames):])})
        grads, _ = clip_global_norm(grads, clip)
        adam_step(mask.logits, {n: grads[("mask", n)] for n in mnames}, state)
        if train_weights:
            adam_step(params, {n: grads[("weight", n)] for n in wnames}, weight_state)
        loss_value = loss.item()
        if _early_exit(evaluate, eval_every, step, target):
            return LoopResult(step, loss_value, True)
    return LoopResult(steps, loss_value)


def joint_train(model, mask: MaskSet, sampler: Sampler, steps: int, data_rng: np.random.Generator,
                mask_rng: np.random.Generator, *, k: int = 8, lr: float = 1e-2, **kw) -> LoopResult:
    """Masks and unfrozen weights trained together (8 mask samples per batch by default)."""
    return train_mask(model, mask, sampler, steps, data_rng, mask_rng, k=k, lr=lr, train_weights=True,
                      weight_state=kw.pop("weight_state", None) or AdamState(lr=lr), **kw)
