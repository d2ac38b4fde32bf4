"""Measurements on masks and masked networks."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .masks import BinaryMask
from .optim import ParamStore
from .tasks import ADD, MUL, DatasetBatch
from .tensor import Tensor


def _bits(m) -> Mapping[str, np.ndarray]:
    return m.bits if isinstance(m, BinaryMask) else m


def _counts(m1, m2, names=None) -> tuple[int, int, int, int]:
    b1, b2 = _bits(m1), _bits(m2)
    if b1.keys() != b2.keys():
        raise ValueError("masks cover different parameters")
    names = list(b1) if names is None else names
    k1 = k2 = inter = union = 0
    for n in names:
        x, y = b1[n], b2[n]
        if x.shape != y.shape:
            raise ValueError(f"masks disagree on the shape of {n!r}")
        k1 += int(x.sum())
        k2 += int(y.sum())
        inter += int(np.count_nonzero(x & y))
        union += int(np.count_nonzero(x | y))
    return k1, k2, inter, union


def _ratio(num: int, den: int) -> float:
    # empty masks share nothing by convention
    return num / den if den else 0.0


def iou(m1, m2, names=None) -> float:
    k1, k2, inter, union = _counts(m1, m2, names)
    if k1 == 0 or k2 == 0:
        return 0.0
    return _ratio(inter, union)


def iomin(m1, m2, names=None) -> float:
    k1, k2, inter, _ = _counts(m1, m2, names)
    return _ratio(inter, min(k1, k2))


@dataclass
class SharingStats:
    kept_a: int
    kept_b: int
    intersection: int
    union: int
    total: int
    iou: float
    iomin: float

    @property
    def shared_fraction(self) -> float:
        return self.iou


def sharing_stats(m1, m2, names=None) -> SharingStats:
    k1, k2, inter, union = _counts(m1, m2, names)
    b1 = _bits(m1)
    total = sum(b1[n].size for n in (list(b1) if names is None else names))
    empty = k1 == 0 or k2 == 0
    return SharingStats(k1, k2, inter, union, total,
                        0.0 if empty else _ratio(inter, union),
                        0.0 if empty else _ratio(inter, min(k1, k2)))


@dataclass
class SharingReport:
    per_layer: dict[str, SharingStats]
    per_tensor: dict[str, SharingStats]
    totals: SharingStats
    label_a: str = "A"
    label_b: str = "B"

    def shared_fraction(self) -> dict[str, float]:
        return {k: v.shared_fraction for k, v in self.per_layer.items()}

    def to_dict(self) -> dict:
        def row(s: SharingStats) -> dict:
            d = asdict(s)
            d["shared_fraction"] = s.shared_fraction
            return d

        return {
            "mask_a": self.label_a,
            "mask_b": self.label_b,
            "per_layer": {k: row(v) for k, v in self.per_layer.items()},
            "per_tensor": {k: row(v) for k, v in self.per_tensor.items()},
            "totals": row(self.totals),
        }

    def rows(self) -> list[dict]:
        """Flat records, one per (layer, metric)."""
        out = []
        for index, (layer, s) in enumerate(self.per_layer.items()):
            d = asdict(s)
            d["shared_fraction"] = s.shared_fraction
            for metric, value in d.items():
                out.append({"mask_a": self.label_a, "mask_b": self.label_b, "layer_index": index,
                            "layer": layer, "metric": metric, "value": value})
        return out


def per_layer_sharing(m1, m2, groups: Sequence[tuple[str, Sequence[str]]] | None = None,
                      labels: tuple[str, str] = ("A", "B")) -> SharingReport:
    """Sharing statistics for each layer group, each tensor and overall.

    ``groups`` lists ``(layer label, parameter names)``; by default every
    masked tensor forms its own layer.
    """
    b1 = _bits(m1)
    if groups is None:
        groups = [(n, [n]) for n in b1]
    per_layer = {label: sharing_stats(m1, m2, list(names)) for label, names in groups}
    per_tensor = {n: sharing_stats(m1, m2, [n]) for n in b1}
    return SharingReport(per_layer, per_tensor, sharing_stats(m1, m2), *labels)


# evaluation of masked networks

def masked_weights(params: ParamStore, mask: BinaryMask | None) -> dict[str, Tensor]:
    """Constant (graph-free) weights with a thresholded mask applied."""
    out = {}
    for n, p in params.items():
        if mask is not None and n in mask.bits:
            out[n] = Tensor(p.data * mask.bits[n])
        else:
            out[n] = Tensor(p.data)
    return out


def predict_groups(model, weights: Mapping[str, Tensor], x: np.ndarray, group_size: int,
                   chunk: int = 4096) -> np.ndarray:
    """Argmax class per output group, shape ``[n, groups]``."""
    preds = []
    for start in range(0, len(x), chunk):
        z = model.logits(x[start:start + chunk], weights).data
        preds.append(z.reshape(len(z), -1, group_size).argmax(axis=2))
    return np.concatenate(preds)


def group_accuracy(preds: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of rows where every active group (target >= 0) is right."""
    active = targets >= 0
    ok = np.all((preds == targets) | ~active, axis=1)
    return float(ok.mean())


def accuracy(model, mask: BinaryMask | None, batch: DatasetBatch, weights=None) -> float:
    if weights is None:
        weights = masked_weights(model.params, mask)
    preds = predict_groups(model, weights, batch.x, batch.group_size)
    return group_accuracy(preds, batch.targets)


def decode_number(pred_digits: np.ndarray) -> np.ndarray:
    return pred_digits[:, 0] * 10 + pred_digits[:, 1]


BEHAVIORS = ("add", "mul", "none")


def classify_behavior(a, b, prediction, commanded=None) -> tuple[np.ndarray, np.ndarray]:
    """Which operation a two-digit prediction corresponds to.

    Returns per-sample labels from :data:`BEHAVIORS` and a flag marking ties
    (both operations give the same result); ties resolve to the commanded
    operation, or to ``add`` when none is given.
    """
    a, b, prediction = (np.atleast_1d(np.asarray(v)) for v in (a, b, prediction))
    is_add = prediction == (a + b) % 100
    is_mul = prediction == (a * b) % 100
    tie = is_add & is_mul
    labels = np.where(is_add, "add", np.where(is_mul, "mul", "none")).astype(object)
    if commanded is not None:
        commanded = np.atleast_1d(np.asarray(commanded))
        labels[tie & (commanded == MUL)] = "mul"
        labels[tie & (commanded == ADD)] = "add"
    return labels, tie


def behavior_matrix(labels: np.ndarray, commanded: np.ndarray) -> dict[str, dict[str, float]]:
    """Row-normalized (commanded op -> performed behavior) proportions."""
    out = {}
    for op, name in ((ADD, "add"), (MUL, "mul")):
        rows = labels[commanded == op]
        out[name] = {beh: float(np.mean(rows == beh)) if len(rows) else 0.0 for beh in BEHAVIORS}
    return out


def confusion_matrix(true: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    """Row-normalized confusion matrix (rows: true class)."""
    counts = np.zeros((num_classes, num_classes))
    np.add.at(counts, (np.asarray(true), np.asarray(pred)), 1)
    sums = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)


@dataclass
class ConfusionDelta:
    baseline: np.ndarray
    treated: np.ndarray
    removed_class: int
    delta: np.ndarray = field(init=False)

    def __post_init__(self):
        self.delta = self.treated - self.baseline

    def removed_is_largest_drop(self) -> bool:
        """Is the removed class's diagonal entry the most negative entry of the delta?"""
        c = self.removed_class
        d = self.delta[c, c]
        return bool(d < 0 and d <= self.delta.min())

    def to_dict(self) -> dict:
        return {"removed_class": self.removed_class, "baseline": self.baseline.tolist(),
                "treated": self.treated.tolist(), "delta": self.delta.tolist()}


def confusion_delta(model, mask_full: BinaryMask, mask_removed: BinaryMask,
                    eval_set: DatasetBatch, removed_class: int, num_classes: int = 10) -> ConfusionDelta:
    true = eval_set.targets[:, 0]
    cms = []
    for m in (mask_full, mask_removed):
        pred = predict_groups(model, masked_weights(model.params, m), eval_set.x, eval_set.group_size)[:, 0]
        cms.append(confusion_matrix(true, pred, num_classes))
    return ConfusionDelta(cms[0], cms[1], removed_class)


# half-mask protocol

@dataclass
class HalfSplit:
    """Forward-order split of the masked parameters into an early and a late side.

    Layers before ``layer`` are early.  Inside ``layer``, output units
    ``[0, units)`` (weight columns and bias entries) are early too.
    """

    layer: int
    units: int
    early_fraction: float


def half_split(model) -> HalfSplit:
    """Unit boundary in a feedforward net that puts as close to half the parameters early as possible."""
    sizes = model.sizes
    per_unit = [a + 1 for a in sizes[:-1]]
    widths = sizes[1:]
    total = sum(p * w for p, w in zip(per_unit, widths))
    acc = 0
    best = None
    for layer, (p, w) in enumerate(zip(per_unit, widths)):
        for units in range(w + 1):
            frac = (acc + p * units) / total
            if best is None or abs(frac - 0.5) < abs(best.early_fraction - 0.5):
                best = HalfSplit(layer, units, frac)
        acc += p * w
    return best


def early_side(model, split: HalfSplit) -> dict[str, np.ndarray]:
    """Boolean map of which parameter entries fall on the early side."""
    out = {}
    for i in range(model.num_layers):
        w = model.params[f"layer{i}.weight"].shape
        b = model.params[f"layer{i}.bias"].shape
        ew, eb = np.zeros(w, bool), np.zeros(b, bool)
        if i < split.layer:
            ew[:], eb[:] = True, True
        elif i == split.layer:
            ew[:, :split.units] = True
            eb[:split.units] = True
        out[f"layer{i}.weight"], out[f"layer{i}.bias"] = ew, eb
    return out


def half_mask_bits(full: BinaryMask, early: Mapping[str, np.ndarray], side: str) -> BinaryMask:
    """``mask-early`` keeps the mask only on the early side; ``mask-late`` only on the late side."""
    if side not in ("mask-early", "mask-late"):
        raise ValueError(f"unknown side {side!r}")
    bits = {}
    for n, b in full.bits.items():
        masked_here = early[n] if side == "mask-early" else ~early[n]
        bits[n] = np.where(masked_here, b, True)
    return BinaryMask(bits, f"{full.stage}:{side}")


def half_mask_eval(model, full_bits: BinaryMask, side: str, eval_set: DatasetBatch,
                   split: HalfSplit | None = None) -> dict:
    split = split or half_split(model)
    baseline = accuracy(model, full_bits, eval_set)
    acc = accuracy(model, half_mask_bits(full_bits, early_side(model, split), side), eval_set)
    return {"side": side, "accuracy": acc, "baseline": baseline, "drop": baseline - acc,
            "split_layer": split.layer, "split_units": split.units, "early_fraction": split.early_fraction}
