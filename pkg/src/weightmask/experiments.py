"""Config-driven experiment pipelines.

A :class:`Session` bundles one seed's network, task, random streams, trained
masks and optimizer states.  Pipelines mutate a session stage by stage and
can be checkpointed between stages.  Every function returns plain
JSON-friendly dicts, so the CLI can dump them straight into a report.
"""
from __future__ import annotations

import copy
import logging
import os
import re
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import masks as M
from . import metrics
from . import tasks
from .checkpoint import Checkpoint, MaskRecord, OptimRecord
from .config import ExperimentConfig, ModelConfig, StageConfig
from .models import FeedForwardNet, LSTMNet, PresentationSchedule
from .optim import AdamState, ParamStore
from .rng import DATA_SHUFFLE, MASK_SAMPLE, WEIGHTS_INIT, RngStreams, make_generator
from .tasks import DatasetBatch, Sampler
from .training import assert_unchanged, joint_train, train_mask, train_weights

log = logging.getLogger(__name__)


# model and task construction

def build_model(mc: ModelConfig, rng: np.random.Generator):
    mc = mc.resolved()
    if mc.kind == "ffn":
        return FeedForwardNet(mc.sizes, rng)
    if mc.kind == "lstm":
        if mc.schedule == "sequential-pairs":
            half_in, half_out = mc.input // 2, mc.output // 2
            segments = (((0, half_in), (0, half_out)), ((half_in, mc.input), (half_out, mc.output)))
            sched = PresentationSchedule("sequential-pairs", mc.steps_per_segment, segments)
        else:
            sched = PresentationSchedule(mc.schedule, mc.steps_per_segment)
        return LSTMNet(mc.input, mc.hidden, mc.output, rng, sched)
    raise ValueError(f"unknown model kind {mc.kind!r}")


_FILTER = re.compile(r"^\s*(\w+)\s*(!=|=)\s*(\w+)\s*$")
_OP_VALUES = {"add": tasks.ADD, "mul": tasks.MUL}


def parse_filter(spec: str) -> tuple[str, bool, int] | None:
    """``"all"`` -> None; ``"op=add"`` -> ("op", True, 0); ``"label!=3"`` -> ("label", False, 3)."""
    if spec.strip() == "all":
        return None
    m = _FILTER.match(spec)
    if not m:
        raise ValueError(f"cannot parse data filter {spec!r}")
    key, rel, raw = m.groups()
    value = _OP_VALUES[raw] if key == "op" and raw in _OP_VALUES else int(raw)
    return key, rel == "=", value


def focus_pair(batch: DatasetBatch, pair: int) -> DatasetBatch:
    """Drop the loss on the other pair's output groups (used when both pairs are shown)."""
    targets = batch.targets.copy()
    lo, hi = (2, 4) if pair == 1 else (0, 2)
    targets[:, lo:hi] = -1
    return DatasetBatch(batch.x, targets, batch.group_size, dict(batch.meta))


@dataclass
class TaskSpec:
    """Training distribution, stage filters and fixed evaluation splits of one task."""

    name: str
    sampler: Sampler
    eval_builder: Callable[[], dict[str, DatasetBatch]]
    pair_by_targets: bool = False
    _eval: dict | None = field(default=None, repr=False)

    def stage_sampler(self, spec: str) -> Sampler:
        parsed = parse_filter(spec)
        if parsed is None:
            return self.sampler
        key, equal, value = parsed
        if key == "pair" and self.pair_by_targets:
            if not equal:
                value = 3 - value
            base = self.sampler
            return lambda n, rng: focus_pair(base(n, rng), value)

        def predicate(b: DatasetBatch) -> np.ndarray:
            if key not in b.meta:
                raise ValueError(f"task {self.name!r} has no {key!r} metadata for filter {spec!r}")
            hit = b.meta[key] == value
            return hit if equal else ~hit

        return tasks.filter_subtask(self.sampler, predicate)

    def eval_splits(self) -> dict[str, DatasetBatch]:
        if self._eval is None:
            self._eval = self.eval_builder()
        return self._eval


def _addmul_task(cfg: ExperimentConfig) -> TaskSpec:
    def build():
        full = tasks.gen_addmul(cfg.eval.samples, make_generator(cfg.eval.seed, "eval"))
        op = full.meta["op"]
        return {"all": full, "add": full.take(op == tasks.ADD), "mul": full.take(op == tasks.MUL)}

    return TaskSpec("addmul", tasks.gen_addmul, build)


def _double_add_task(cfg: ExperimentConfig, recurrent: bool) -> TaskSpec:
    if recurrent:
        def build():
            full = tasks.gen_double_add(cfg.eval.samples, make_generator(cfg.eval.seed, "eval"))
            return {"all": full, "pair1": focus_pair(full, 1), "pair2": focus_pair(full, 2)}

        return TaskSpec("double-add", lambda n, rng: tasks.gen_double_add(n, rng), build, pair_by_targets=True)

    def sampler(n, rng):
        # each sample yields one row per pair, so draw half as many
        return tasks.two_pass(tasks.gen_double_add(max(n // 2, 1), rng))

    def build():
        rows = tasks.two_pass(tasks.gen_double_add(cfg.eval.samples, make_generator(cfg.eval.seed, "eval")))
        pair = rows.meta["pair"]
        return {"all": rows, "pair1": rows.take(pair == 1), "pair2": rows.take(pair == 2)}

    return TaskSpec("double-add", sampler, build)


def load_mnist_data(cfg: ExperimentConfig) -> tuple[tasks.MnistData, tasks.MnistData]:
    """Train and test sets from ``data.mnist_dir`` (or ``$MNIST_DIR``), IDX files plain or gzipped."""
    d = cfg.data.mnist_dir or os.environ.get("MNIST_DIR", "")
    if not d:
        raise FileNotFoundError("no MNIST directory: set data.mnist_dir in the config or $MNIST_DIR")
    if cfg.data.fetch:
        tasks.fetch_mnist(d, cfg.data.base_url, cfg.data.sha256)

    def find(stem):
        for name in (stem, stem + ".gz"):
            p = os.path.join(d, name)
            if os.path.exists(p):
                return p
        raise FileNotFoundError(f"{stem}[.gz] not found in {d}")

    train = tasks.load_mnist_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    test = tasks.load_mnist_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
    if cfg.data.train_limit:
        train = train.split(cfg.data.train_limit)[0]
    if cfg.data.test_limit:
        test = test.split(cfg.data.test_limit)[0]
    return train, test


def mnist_task(cfg: ExperimentConfig, train: tasks.MnistData, test: tasks.MnistData,
               permutation: np.ndarray | None = None, task_id: int = 0) -> TaskSpec:
    def build():
        full = tasks.mnist_eval_batch(test, permutation, task_id)
        return {"all": full}

    return TaskSpec(f"mnist{task_id}", tasks.mnist_sampler(train, permutation, task_id), build)


def build_task(cfg: ExperimentConfig) -> TaskSpec:
    if cfg.task == "addmul":
        return _addmul_task(cfg)
    if cfg.task == "double-add":
        return _double_add_task(cfg, cfg.model.resolved().kind == "lstm")
    train, test = load_mnist_data(cfg)
    return mnist_task(cfg, train, test)


# sessions

class Session:
    """One seed's network, task data, masks and optimizer states."""

    def __init__(self, cfg: ExperimentConfig, seed: int, task: TaskSpec | None = None):
        self.cfg = cfg
        self.seed = int(seed)
        self.streams = RngStreams(seed)
        self.model = build_model(cfg.model, self.streams[WEIGHTS_INIT])
        self.task = task or build_task(cfg)
        self.masks: dict[str, M.MaskSet] = {}
        self.bits: dict[str, M.BinaryMask] = {}
        self.optim: dict[str, AdamState] = {}
        self.meta: dict = {"seed": self.seed, "weight_steps": 0, "stages": {}, "integrity": []}

    @property
    def params(self) -> ParamStore:
        return self.model.params

    def fork(self) -> "Session":
        """Independent copy sharing only the (read-only) task data."""
        other = Session.__new__(Session)
        task = self.task
        self.task = None
        try:
            other.__dict__.update(copy.deepcopy(self.__dict__))
        finally:
            self.task = task
        other.task = task
        return other

    def stage_rng(self, kind: str, stage: str, mask_seed: int | None = None) -> np.random.Generator:
        name = f"{kind}/{stage}" if mask_seed is None else f"{kind}/{stage}/{mask_seed}"
        return self.streams[name]

    # checkpoint conversion

    def to_checkpoint(self) -> Checkpoint:
        p = self.params
        masks = {}
        for name, ms in self.masks.items():
            masks[name] = MaskRecord({n: p_.data.copy() for n, p_ in ms.logits.items()}, self.bits[name],
                                     ms.tau, sorted(ms.excluded), dict(ms.fixed))
        optim = {k: OptimRecord(s.lr, s.beta1, s.beta2, s.eps, s.step, dict(s.m), dict(s.v))
                 for k, s in self.optim.items()}
        return Checkpoint(self.cfg.digest(), p.snapshot(), sorted(p.frozen), dict(p.frozen_elements),
                          masks, optim, self.streams.get_state(), copy.deepcopy(self.meta))

    @classmethod
    def from_checkpoint(cls, cfg: ExperimentConfig, ckpt: Checkpoint, task: TaskSpec | None = None) -> "Session":
        if ckpt.config_digest != cfg.digest():
            log.warning("checkpoint was written for a different config digest")
        s = cls(cfg, ckpt.meta.get("seed", 0), task)
        s.params.load(ckpt.params)
        s.params.unfreeze()
        s.params.freeze(ckpt.frozen)
        for n, where in ckpt.frozen_elements.items():
            s.params.freeze_elements(n, where)
        for name, rec in ckpt.masks.items():
            store = ParamStore()
            for n, a in rec.logits.items():
                store.add(n, a)
            s.masks[name] = M.MaskSet(store, frozenset(rec.excluded), rec.tau, name, dict(rec.fixed))
            s.bits[name] = rec.bits
        for k, r in ckpt.optim.items():
            s.optim[k] = AdamState(r.lr, r.beta1, r.beta2, r.eps, r.step, dict(r.m), dict(r.v))
        s.streams.set_state(ckpt.rng_state)
        s.meta = copy.deepcopy(ckpt.meta)
        return s


def _acc(session: Session, mask: M.BinaryMask | None, split: str) -> float:
    return metrics.accuracy(session.model, mask, session.task.eval_splits()[split])


# weight training

def train_weights_stage(session: Session, steps: int | None = None) -> dict:
    """Supervised training of all weights; the weights are frozen afterwards."""
    cfg = session.cfg
    steps = cfg.weights.steps if steps is None else steps
    p = session.params
    p.unfreeze()
    state = session.optim.setdefault("weights", AdamState(lr=cfg.optim.weight_lr))
    split = session.task.eval_splits()["all"]
    evaluate = (lambda: metrics.accuracy(session.model, None, split)) if cfg.weights.target else None
    t0 = time.perf_counter()
    res = train_weights(session.model, session.task.sampler, steps, session.streams[DATA_SHUFFLE],
                        batch_size=cfg.optim.batch_size, lr=cfg.optim.weight_lr, clip=cfg.optim.clip,
                        state=state, evaluate=evaluate, eval_every=cfg.weights.eval_every,
                        target=cfg.weights.target)
    p.freeze()
    session.meta["weight_steps"] += res.steps
    out = {"steps": res.steps, "total_steps": session.meta["weight_steps"], "loss": res.last_loss,
           "accuracy": _acc(session, None, "all"), "seconds": time.perf_counter() - t0}
    session.meta["weights"] = out
    log.info("seed %d weights: %s", session.seed, out)
    return out


# mask stages

def _stage_splits(session: Session, stage: StageConfig) -> str:
    """Evaluation split matching a stage filter (falls back to 'all')."""
    parsed = parse_filter(stage.filter)
    splits = session.task.eval_splits()
    if parsed is None:
        return "all"
    key, equal, value = parsed
    for name in (f"{key}{value}", {v: k for k, v in _OP_VALUES.items()}.get(value, "") if key == "op" else ""):
        if equal and name in splits:
            return name
    return "all"


def kept_fraction(bits: M.BinaryMask, names=None) -> float:
    names = bits.names() if names is None else names
    return sum(bits.kept(n) for n in names) / max(sum(bits.total(n) for n in names), 1)


def train_mask_stage(session: Session, stage: StageConfig, *, force: bool = False, alpha: float | None = None,
                     steps: int | None = None, mask_seed: int | None = None, record: str | None = None) -> dict:
    """Train one stage's mask logits on frozen weights and store the thresholded mask.

    Rerunning a completed stage is a no-op unless ``force`` is set.  The
    frozen weights are snapshotted and compared bitwise afterwards.
    """
    cfg = session.cfg
    name = record or stage.name
    if name in session.bits and not force:
        return session.meta["stages"][name]
    p = session.params
    joint = stage.frozen == "none"
    if joint:
        p.unfreeze()
    else:
        p.freeze()
    fixed = {}
    if stage.fixed_output_from:
        src = session.bits[stage.fixed_output_from]
        fixed = {n: src.bits[n] for n in session.model.io_names()[1]}
    mask = M.init_mask(p, cfg.mask.keep_prob, cfg.mask.exclude, cfg.mask.tau, name, fixed)
    alpha = cfg.alpha_for(stage) if alpha is None else alpha
    steps = (stage.steps if stage.steps is not None else cfg.mask.steps) if steps is None else steps
    split = _stage_splits(session, stage)
    state = AdamState(lr=cfg.optim.mask_lr)
    evaluate = None
    if cfg.mask.target is not None:
        batch = session.task.eval_splits()[split]
        evaluate = lambda: metrics.accuracy(session.model, M.threshold(mask), batch)
    snapshot = p.snapshot()
    t0 = time.perf_counter()
    res = train_mask(session.model, mask, session.task.stage_sampler(stage.filter), steps,
                     session.stage_rng(DATA_SHUFFLE, name, mask_seed), session.stage_rng(MASK_SAMPLE, name, mask_seed),
                     batch_size=cfg.optim.batch_size, lr=cfg.optim.mask_lr, alpha=alpha, k=cfg.mask.k,
                     clip=cfg.optim.clip, state=state, train_weights=joint,
                     weight_state=session.optim.setdefault("weights", AdamState(lr=cfg.optim.weight_lr)) if joint else None,
                     evaluate=evaluate, eval_every=cfg.mask.eval_every, target=cfg.mask.target)
    if not joint:
        assert_unchanged(p, snapshot)
        session.meta["integrity"].append({"stage": name, "frozen_weights_unchanged": True})
    p.freeze()
    bits = M.threshold(mask)
    session.masks[name], session.bits[name], session.optim[f"mask:{name}"] = mask, bits, state
    out = {
        "stage": name, "filter": stage.filter, "alpha": alpha, "steps": res.steps, "loss": res.last_loss,
        "kept_fraction": kept_fraction(bits),
        "kept_per_tensor": {n: bits.kept(n) / bits.total(n) for n in bits.names()},
        "split": split, "accuracy": _acc(session, bits, split), "seconds": time.perf_counter() - t0,
    }
    session.meta["stages"][name] = out
    log.info("seed %d stage %s: acc %.4f kept %.3f", session.seed, name, out["accuracy"], out["kept_fraction"])
    return out


def run_stages(session: Session, names=None, force: bool = False) -> dict:
    stages = session.cfg.stages if names is None else [session.cfg.stage(n) for n in names]
    return {s.name: train_mask_stage(session, s, force=force) for s in stages}


# evaluation

def hybrid_mask(model, bits: M.BinaryMask) -> M.BinaryMask:
    """Inverted mask on hidden layers, the regular mask on the input and output layers."""
    first, last = model.io_names()
    inv = bits.invert()
    return inv.replace(bits, [n for n in first + last if n in bits.bits])


def resolve_variants(session: Session, variants) -> dict[str, M.BinaryMask | None]:
    out: dict[str, M.BinaryMask | None] = {}
    for v in variants:
        if v == "none":
            out["none"] = None
        elif v == "stages":
            out.update(session.bits)
        elif v == "inverted":
            out.update({f"~{k}": b.invert() for k, b in session.bits.items()})
        elif v == "hybrid":
            out.update({f"hybrid:{k}": hybrid_mask(session.model, b) for k, b in session.bits.items()})
        elif v.startswith("~"):
            out[v] = session.bits[v[1:]].invert()
        elif v.startswith("hybrid:"):
            out[v] = hybrid_mask(session.model, session.bits[v[len("hybrid:"):]])
        elif v in session.bits:
            out[v] = session.bits[v]
        else:
            raise KeyError(f"unknown mask variant {v!r}")
    return out


def layer_groups(model) -> list[tuple[str, list[str]]]:
    """Weight matrices only, one group per layer (biases are reported per tensor)."""
    if isinstance(model, FeedForwardNet):
        return [(f"layer{i}", [f"layer{i}.weight"]) for i in range(model.num_layers)]
    return [("input", ["lstm.w_ih"]), ("recurrent", ["lstm.w_hh"]), ("output", ["out.weight"])]


def sharing_table(session: Session, a: str, b: str) -> dict:
    rep = metrics.per_layer_sharing(session.bits[a], session.bits[b], layer_groups(session.model), (a, b))
    return rep.to_dict()


def evaluate_matrix(session: Session, variants=None, splits=None) -> dict:
    """Accuracy for every (mask variant, split) cell plus behavior grids on add/mul."""
    variants = session.cfg.eval.variants if variants is None else variants
    masks = resolve_variants(session, variants)
    data = session.task.eval_splits()
    splits = list(data) if splits is None else splits
    grid = {}
    for vname, bits in masks.items():
        weights = metrics.masked_weights(session.params, bits)
        grid[vname] = {s: metrics.accuracy(session.model, None, data[s], weights) for s in splits}
    missing = [(v, s) for v in masks for s in splits if grid.get(v, {}).get(s) is None]
    if missing:
        raise RuntimeError(f"incomplete accuracy grid: {missing}")
    out = {"accuracy": grid, "kept": {v: (1.0 if b is None else kept_fraction(b)) for v, b in masks.items()},
           "census": {}}
    for name, b in session.bits.items():
        inv = b.invert()
        out["census"][name] = {"kept": b.kept(), "kept_inverted": inv.kept(), "total": b.total()}
    if session.cfg.task == "addmul":
        out["behavior"] = behavior_grid(session, masks)
    return out


def behavior_grid(session: Session, masks: dict) -> dict:
    batch = session.task.eval_splits()["all"]
    out = {}
    for vname, bits in masks.items():
        preds = metrics.predict_groups(session.model, metrics.masked_weights(session.params, bits),
                                       batch.x, batch.group_size)
        labels, tie = metrics.classify_behavior(batch.meta["a"], batch.meta["b"], metrics.decode_number(preds),
                                                batch.meta["op"])
        grid = metrics.behavior_matrix(labels, batch.meta["op"])
        grid["tie_fraction"] = float(tie.mean())
        out[vname] = grid
    return out


# protocols

def copy_io(session: Session) -> None:
    """Overwrite pair-2's input rows and output columns with pair-1's (double-add FFN)."""
    model = session.model
    if not isinstance(model, FeedForwardNet) or session.cfg.task != "double-add":
        raise ValueError("the copy-I/O protocol needs a double-add feedforward network")
    p = session.params
    (i1, i2), (o1, o2) = tasks.PAIR_INPUT_COLS[1], tasks.PAIR_INPUT_COLS[2]
    (a1, a2), (b1, b2) = tasks.PAIR_OUTPUT_COLS[1], tasks.PAIR_OUTPUT_COLS[2]
    last = model.num_layers - 1
    w0 = p["layer0.weight"].data
    w0[o1:o2] = w0[i1:i2]
    wl, bl = p[f"layer{last}.weight"].data, p[f"layer{last}.bias"].data
    wl[:, b1:b2] = wl[:, a1:a2]
    bl[b1:b2] = bl[a1:a2]


def copy_io_sanity(session: Session, stages=("pair1", "pair2")) -> dict:
    """Copy pair-1's I/O weights onto pair-2, retrain both pair masks and report sharing."""
    s = session.fork()
    s.bits.clear(), s.masks.clear()
    s.meta["stages"] = {}
    copy_io(s)
    before = {k: _acc(s, None, k) for k in ("pair1", "pair2")}
    for name in stages:
        train_mask_stage(s, s.cfg.stage(name), force=True, steps=s.cfg.copy_io.steps)
    return {"accuracy_after_copy": before, "stages": {n: s.meta["stages"][n] for n in stages},
            "sharing": sharing_table(s, *stages), "integrity": s.meta["integrity"]}


def half_mask(session: Session, stage: str, split: str | None = None) -> dict:
    if not isinstance(session.model, FeedForwardNet):
        raise ValueError("the half-mask protocol is implemented for feedforward networks")
    split = split or _stage_splits(session, session.cfg.stage(stage))
    data = session.task.eval_splits()[split]
    sp = metrics.half_split(session.model)
    return {side: metrics.half_mask_eval(session.model, session.bits[stage], side, data, sp)
            for side in ("mask-late", "mask-early")} | {"stage": stage, "split": split}


def stability(session: Session, stage: str, mask_seeds=(1, 2)) -> dict:
    """IoU between masks of the same stage trained from two mask seeds on identical weights."""
    st = session.cfg.stage(stage)
    runs = {}
    for ms in mask_seeds:
        rec = f"{stage}@{ms}"
        runs[rec] = train_mask_stage(session, st, mask_seed=ms, record=rec, force=True)
    a, b = (session.bits[f"{stage}@{ms}"] for ms in mask_seeds)
    return {"stage": stage, "mask_seeds": list(mask_seeds), "iou": metrics.iou(a, b),
            "iomin": metrics.iomin(a, b), "runs": runs}


def stability_iou(session: Session, stage: str, mask_seed1: int, mask_seed2: int) -> float:
    return stability(session, stage, (mask_seed1, mask_seed2))["iou"]


def alpha_sweep(session: Session, alphas=None) -> dict:
    """Control-mask accuracy, kept fraction and sharing for each regularization strength."""
    cfg = session.cfg
    alphas = sorted(cfg.sweep.alphas if alphas is None else alphas)
    if len(alphas) < 3 or alphas[-1] / max(alphas[0], 1e-300) < 100:
        log.warning("alpha sweep should span at least 3 values and 2 orders of magnitude")
    unmasked = _acc(session, None, "all")
    control = cfg.stage(cfg.sweep.stage)
    others = [s for s in cfg.stages if s.name != control.name][:2]
    rows = []
    for a in alphas:
        s = session.fork()
        s.bits.clear(), s.masks.clear()
        s.meta["stages"] = {}
        c = train_mask_stage(s, control, alpha=a, steps=cfg.sweep.steps, force=True)
        row = {"alpha": a, "beta": a * cfg.optim.batch_size, "accuracy": _acc(s, s.bits[control.name], "all"),
               "kept_fraction": c["kept_fraction"]}
        if len(others) == 2:
            for o in others:
                train_mask_stage(s, o, alpha=a, steps=cfg.sweep.steps, force=True)
            row["sharing_iou"] = metrics.iou(s.bits[others[0].name], s.bits[others[1].name])
        rows.append(row)
    ok = [r["alpha"] for r in rows if r["accuracy"] >= 0.95 * unmasked]
    return {"unmasked_accuracy": unmasked, "rows": rows, "recommended_alpha": max(ok) if ok else None}


def leave_one_out(session: Session, classes=None, control: str = "full") -> dict:
    """Masks trained without one class (output layer pinned to the control mask) and their confusion deltas."""
    cfg = session.cfg
    classes = cfg.leave_one_out.classes if classes is None else classes
    if control not in session.bits:
        train_mask_stage(session, _control_stage(cfg, control))
    data = session.task.eval_splits()["all"]
    deltas, stages = {}, {}
    for c in classes:
        st = StageConfig(name=f"without-{c}", filter=f"label!={c}", steps=cfg.leave_one_out.steps,
                         fixed_output_from=control)
        stages[st.name] = train_mask_stage(session, st)
        d = metrics.confusion_delta(session.model, session.bits[control], session.bits[st.name], data, c)
        deltas[c] = d
    return {
        "control_accuracy": _acc(session, session.bits[control], "all"),
        "stages": stages,
        "deltas": {str(c): d.to_dict() | {"removed_is_largest_drop": d.removed_is_largest_drop(),
                                          "max_row_sum_error": float(np.abs(d.delta.sum(axis=1)).max())}
                   for c, d in deltas.items()},
        "largest_drop_count": sum(d.removed_is_largest_drop() for d in deltas.values()),
    }


def _control_stage(cfg: ExperimentConfig, name: str) -> StageConfig:
    try:
        return cfg.stage(name)
    except KeyError:
        return StageConfig(name=name)


# permuted-MNIST transfer

def _weight_layers(model: FeedForwardNet) -> list[tuple[str, list[str]]]:
    return [(f"layer{i}", [f"layer{i}.weight"]) for i in range(model.num_layers)]


def task_relative_sharing(current: M.BinaryMask, previous: M.BinaryMask, groups) -> dict[str, float]:
    """Per layer, the fraction of the current mask's weights already used by earlier tasks."""
    out = {}
    for label, names in groups:
        kept = sum(current.kept(n) for n in names)
        both = sum(int(np.count_nonzero(current.bits[n] & previous.bits[n])) for n in names)
        out[label] = both / kept if kept else 0.0
    return out


def transfer_sequence(cfg: ExperimentConfig, seed: int, biased: bool | None = None,
                      data: tuple[tasks.MnistData, tasks.MnistData] | None = None) -> dict:
    """Sequential permuted-MNIST training with weight freezing.

    For each task, weights and a fresh mask are trained jointly.  Weights
    kept by the thresholded mask become frozen for all later tasks, free
    weights are reinitialized, and the first layer is always reset and never
    frozen.  Sharing is measured against the union of all earlier masks.
    """
    tc = cfg.transfer
    biased = tc.biased if biased is None else biased
    train, test = data or load_mnist_data(cfg)
    streams = RngStreams(seed)
    model = build_model(cfg.model, streams[WEIGHTS_INIT])
    if not isinstance(model, FeedForwardNet):
        raise ValueError("the transfer pipeline uses a feedforward network")
    p = model.params
    first = model.io_names()[0]
    perms = tasks.make_permutation_sequence(tc.num_tasks, streams["permutations"], model.input_size)
    occupied = M.BinaryMask({n: np.zeros(t.shape, bool) for n, t in p.items()})
    groups = _weight_layers(model)
    history = []
    for t, perm in enumerate(perms):
        if t > 0:
            fresh = build_model(cfg.model, streams[WEIGHTS_INIT]).params
            for n, tensor in p.items():
                keep = np.zeros(tensor.shape, bool) if n in first else occupied.bits[n]
                tensor.data = np.where(keep, tensor.data, fresh[n].data).astype(tensor.data.dtype)
        pins = {n: occupied.bits[n].copy() for n in p.names() if n not in first}
        p.unfreeze()
        p.frozen_elements = {}
        for n, where in pins.items():
            if where.any():
                p.freeze_elements(n, where)
        mask = M.init_mask(p, cfg.mask.keep_prob, cfg.mask.exclude, cfg.mask.tau, f"task{t}")
        if biased and t > 0:
            mask = M.biased_reinit(mask, occupied, tc.p_old, tc.p_new)
        task = mnist_task(cfg, train, test, perm, t)
        snapshot = p.snapshot()
        t0 = time.perf_counter()
        res = joint_train(model, mask, task.sampler, tc.steps, streams[f"{DATA_SHUFFLE}/task{t}"],
                          streams[f"{MASK_SAMPLE}/task{t}"], k=tc.k, lr=tc.lr, batch_size=cfg.optim.batch_size,
                          alpha=tc.alpha, clip=cfg.optim.clip)
        assert_unchanged(p, snapshot, names=list(pins), where=pins)
        p.freeze()
        bits = M.threshold(mask)
        shared = task_relative_sharing(bits, occupied, groups)
        iou = metrics.per_layer_sharing(bits, occupied, groups).shared_fraction()
        free_hidden = {label: 1 - float(occupied.bits[names[0]].mean()) for label, names in groups}
        acc = metrics.accuracy(model, bits, task.eval_splits()["all"])
        history.append({"task": t, "accuracy": acc, "steps": res.steps, "loss": res.last_loss,
                        "shared_with_previous": shared, "iou_with_previous": iou,
                        "free_before": free_hidden, "kept_per_layer": {
                            label: kept_fraction(bits, names) for label, names in groups},
                        "frozen_weights_unchanged": True, "seconds": time.perf_counter() - t0})
        log.info("transfer seed %d task %d: acc %.4f shared %s", seed, t, acc, shared)
        # the first layer is reset for every task, so it never counts as occupied
        occupied = M.BinaryMask({n: occupied.bits[n] if n in first else occupied.bits[n] | bits.bits[n]
                                 for n in occupied.names()})
    return {"seed": seed, "biased": biased, "p_old": tc.p_old, "p_new": tc.p_new, "tasks": history}


# acceptance-style checks shared by the CLI and the test suite

def hidden_layers(model) -> list[str]:
    names = [label for label, _ in layer_groups(model)]
    return names[1:-1]


def addmul_checks(session: Session, grid: dict, sharing: dict) -> list[dict]:
    acc = grid["accuracy"]
    per_layer = sharing["per_layer"]
    hidden = hidden_layers(session.model)
    first = layer_groups(session.model)[0][0]
    out = [
        check("unmasked full-task accuracy >= 99%", acc["none"]["all"] >= 0.99, acc["none"]["all"]),
        check("add mask on add >= 95%", acc["add"]["add"] >= 0.95, acc["add"]["add"]),
        check("add mask on mul <= 10%", acc["add"]["mul"] <= 0.10, acc["add"]["mul"]),
        check("inverted add mask on add <= 30%", acc["~add"]["add"] <= 0.30, acc["~add"]["add"]),
    ]
    if hidden:  # the layer trend needs at least one hidden matrix
        mean_hidden = float(np.mean([per_layer[h]["shared_fraction"] for h in hidden]))
        out.append(check("input-layer sharing > mean hidden sharing", per_layer[first]["shared_fraction"] > mean_hidden,
                         {"input": per_layer[first]["shared_fraction"], "hidden_mean": mean_hidden}))
    return out


def double_add_checks(session: Session, grid: dict, sharing: dict) -> list[dict]:
    acc = grid["accuracy"]
    per_layer = sharing["per_layer"]
    groups = [label for label, _ in layer_groups(session.model)]
    return [
        check("pair1 mask on pair1 >= 95%", acc["pair1"]["pair1"] >= 0.95, acc["pair1"]["pair1"]),
        check("pair1 mask on pair2 <= 5%", acc["pair1"]["pair2"] <= 0.05, acc["pair1"]["pair2"]),
        check("inverted pair1 mask on pair2 >= 80%", acc["~pair1"]["pair2"] >= 0.80, acc["~pair1"]["pair2"]),
        check("first-layer sharing <= 2%", per_layer[groups[0]]["shared_fraction"] <= 0.02,
              per_layer[groups[0]]["shared_fraction"]),
        check("last-layer sharing <= 2%", per_layer[groups[-1]]["shared_fraction"] <= 0.02,
              per_layer[groups[-1]]["shared_fraction"]),
    ]


def hidden_sharing(run: dict) -> list[float]:
    """Mean hidden-layer sharing with earlier tasks, for every task after the first."""
    layers = list(run["tasks"][0]["shared_with_previous"])[1:-1]
    return [float(np.mean([t["shared_with_previous"][h] for h in layers])) for t in run["tasks"][1:]]


def transfer_checks(unbiased: dict | None, biased: dict | None = None, by_task: int = 3,
                    prefix: str = "") -> list[dict]:
    """Sharing trends of a transfer sequence; ``by_task`` is a 0-based task index."""
    out = []
    if unbiased is None or len(unbiased["tasks"]) < 2:
        return out
    tasks_ = unbiased["tasks"]
    layers = list(tasks_[0]["shared_with_previous"])
    hidden, last = layers[1:-1], layers[-1]
    hs = hidden_sharing(unbiased)
    free = [min(t["free_before"][h] for h in hidden) for t in tasks_[1:]]
    roomy = [h for h, f in zip(hs, free) if f > 0.05]
    out.append(check(f"{prefix}unbiased hidden sharing < 30% while free capacity remains",
                     bool(roomy) and max(roomy) < 0.3, {"hidden": hs, "min_free": free}))
    t = min(by_task, len(tasks_) - 1)
    o = tasks_[t]["shared_with_previous"][last]
    out.append(check(f"{prefix}output-layer sharing exceeds hidden sharing by task {t + 1}",
                     o > hs[t - 1], {"output": o, "hidden": hs[t - 1]}))
    if biased is not None:
        hb = hidden_sharing(biased)
        out.append(check(f"{prefix}biased init at least doubles hidden sharing",
                         all(b >= 2 * u for b, u in zip(hb, hs)), {"biased": hb, "unbiased": hs}))
    return out


def partition_checks(grid: dict) -> list[dict]:
    """Every stage mask has both M and ~M rows and the two censuses add up to the total."""
    out = []
    for name, c in grid["census"].items():
        rows = name in grid["accuracy"] and f"~{name}" in grid["accuracy"]
        out.append(check(f"{name}: grid has M and ~M rows, kept(M) + kept(~M) = total",
                         rows and c["kept"] + c["kept_inverted"] == c["total"], c))
    return out


def check(name: str, passed, value) -> dict:
    return {"check": name, "passed": bool(passed), "value": value}
