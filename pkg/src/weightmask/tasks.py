"""Synthetic arithmetic tasks, MNIST IDX ingestion and permuted-MNIST streams.

Numbers in [0, 99] are encoded as two 10-way one-hot digit blocks (tens,
units).  Targets are stored as class indices per output group; ``-1`` marks
a group that carries no loss for that row.
"""
from __future__ import annotations

import gzip
import hashlib
import os
import shutil
import struct
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

ADD, MUL = 0, 1
OP_NAMES = {ADD: "add", MUL: "mul"}
DIGIT = 10

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class DatasetBatch:
    x: np.ndarray
    targets: np.ndarray
    group_size: int = DIGIT
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.x)

    def take(self, rows) -> "DatasetBatch":
        return DatasetBatch(self.x[rows], self.targets[rows], self.group_size,
                            {k: v[rows] for k, v in self.meta.items()})

    @staticmethod
    def concat(batches) -> "DatasetBatch":
        batches = list(batches)
        first = batches[0]
        return DatasetBatch(
            np.concatenate([b.x for b in batches]),
            np.concatenate([b.targets for b in batches]),
            first.group_size,
            {k: np.concatenate([b.meta[k] for b in batches]) for k in first.meta},
        )


def digits(v) -> np.ndarray:
    v = np.asarray(v)
    return np.stack([v // 10, v % 10], axis=-1)


def _one_hot_into(out: np.ndarray, offset: int, values: np.ndarray) -> None:
    d = digits(values)
    rows = np.arange(len(values))
    out[rows, offset + d[:, 0]] = 1
    out[rows, offset + DIGIT + d[:, 1]] = 1


# addition / multiplication

ADDMUL_INPUTS = 42
ADDMUL_OUTPUTS = 20


def encode_addmul(a, b, op) -> DatasetBatch:
    a, b, op = (np.asarray(v, dtype=np.int64).reshape(-1) for v in (a, b, op))
    x = np.zeros((len(a), ADDMUL_INPUTS), dtype=np.float32)
    _one_hot_into(x, 0, a)
    _one_hot_into(x, 2 * DIGIT, b)
    x[np.arange(len(a)), 4 * DIGIT + op] = 1
    result = np.where(op == ADD, (a + b) % 100, (a * b) % 100)
    return DatasetBatch(x, digits(result), DIGIT, {"a": a, "b": b, "op": op})


def gen_addmul(n: int, rng: np.random.Generator) -> DatasetBatch:
    """``n`` iid samples: operands uniform on [0, 99], operation uniform on {add, mul}."""
    if n < 1:
        raise ValueError("n must be >= 1")
    a = rng.integers(0, 100, n)
    b = rng.integers(0, 100, n)
    op = rng.integers(0, 2, n)
    return encode_addmul(a, b, op)


# double addition

DOUBLE_ADD_INPUTS = 80
DOUBLE_ADD_OUTPUTS = 40
PAIR_INPUT_COLS = {1: (0, 40), 2: (40, 80)}
PAIR_OUTPUT_COLS = {1: (0, 20), 2: (20, 40)}


def encode_double_add(a, b, c, d, zero_pair: int | None = None) -> DatasetBatch:
    a, b, c, d = (np.asarray(v, dtype=np.int64).reshape(-1) for v in (a, b, c, d))
    n = len(a)
    x = np.zeros((n, DOUBLE_ADD_INPUTS), dtype=np.float32)
    targets = np.concatenate([digits((a + b) % 100), digits((c + d) % 100)], axis=1)
    if zero_pair != 1:
        _one_hot_into(x, 0, a)
        _one_hot_into(x, 2 * DIGIT, b)
    if zero_pair != 2:
        _one_hot_into(x, 4 * DIGIT, c)
        _one_hot_into(x, 6 * DIGIT, d)
    if zero_pair is not None:
        # the hidden pair has no defined output for this presentation
        lo, hi = (0, 2) if zero_pair == 1 else (2, 4)
        targets[:, lo:hi] = -1
    pair = np.full(n, 0 if zero_pair is None else 3 - zero_pair)
    return DatasetBatch(x, targets, DIGIT, {"a": a, "b": b, "c": c, "d": d, "pair": pair})


def gen_double_add(n: int, rng: np.random.Generator, zero_pair: int | None = None) -> DatasetBatch:
    """Uniform operands for both pairs; ``zero_pair`` blanks one pair's input block.

    With a zeroed pair, ``meta['pair']`` names the pair that remains visible
    and only its output groups carry targets.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if zero_pair not in (None, 1, 2):
        raise ValueError("zero_pair must be None, 1 or 2")
    a, b, c, d = (rng.integers(0, 100, n) for _ in range(4))
    return encode_double_add(a, b, c, d, zero_pair)


def two_pass(batch: DatasetBatch) -> DatasetBatch:
    """Split each double-add sample into one row per pair, the other pair zeroed."""
    m = batch.meta
    return DatasetBatch.concat([
        encode_double_add(m["a"], m["b"], m["c"], m["d"], zero_pair=2),
        encode_double_add(m["a"], m["b"], m["c"], m["d"], zero_pair=1),
    ])


# stream helpers

Sampler = Callable[[int, np.random.Generator], DatasetBatch]


def stream(sampler: Sampler, batch_size: int, rng: np.random.Generator) -> Iterator[DatasetBatch]:
    while True:
        yield sampler(batch_size, rng)


def filter_subtask(sampler: Sampler, predicate: Callable[[DatasetBatch], np.ndarray],
                   max_rounds: int = 1000) -> Sampler:
    """Sampler that keeps only rows where ``predicate`` holds, resampling to fill the batch."""

    def filtered(n: int, rng: np.random.Generator) -> DatasetBatch:
        parts, have = [], 0
        for _ in range(max_rounds):
            b = sampler(max(n, 16), rng)
            keep = np.flatnonzero(predicate(b))
            if len(keep):
                parts.append(b.take(keep[: n - have]))
                have += min(len(keep), n - have)
            if have == n:
                return DatasetBatch.concat(parts)
        raise RuntimeError("filter_subtask: predicate matched too few samples")

    return filtered


def op_is(op: int) -> Callable[[DatasetBatch], np.ndarray]:
    return lambda b: b.meta["op"] == op


def pair_is(pair: int) -> Callable[[DatasetBatch], np.ndarray]:
    return lambda b: b.meta["pair"] == pair


def label_is_not(label: int) -> Callable[[DatasetBatch], np.ndarray]:
    return lambda b: b.meta["label"] != label


# MNIST IDX

def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError(f"truncated IDX file: expected {n} bytes of {what}, got {len(data)}")
    return data


def _open(path):
    with open(path, "rb") as probe:
        gz = probe.read(2) == b"\x1f\x8b"
    return gzip.open(path, "rb") if gz else open(path, "rb")


def read_idx_images(path) -> np.ndarray:
    with _open(path) as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "header"))
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"{path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(f, count * rows * cols, "pixels")
    return np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with _open(path) as f:
        magic, count = struct.unpack(">II", _read_exact(f, 8, "header"))
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"{path}: bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        raw = _read_exact(f, count, "labels")
    return np.frombuffer(raw, dtype=np.uint8).copy()


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


@dataclass
class MnistData:
    images: np.ndarray  # [n, 784] float32 in [0, 1]
    labels: np.ndarray  # [n] int64

    def __len__(self) -> int:
        return len(self.labels)

    def split(self, n_first: int) -> tuple["MnistData", "MnistData"]:
        return (MnistData(self.images[:n_first], self.labels[:n_first]),
                MnistData(self.images[n_first:], self.labels[n_first:]))


def load_mnist_idx(images_path, labels_path) -> MnistData:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise ValueError(f"image count {len(images)} != label count {len(labels)}")
    flat = images.reshape(len(images), -1).astype(np.float32) / 255.0
    return MnistData(flat, labels.astype(np.int64))


MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}


def fetch_mnist(dest, base_url: str, sha256: dict[str, str]) -> dict[str, str]:
    """Download the four IDX archives into ``dest`` and verify their SHA-256 digests.

    ``sha256`` maps the keys of :data:`MNIST_FILES` to hex digests.  Files
    already present with the right digest are not fetched again.
    """
    os.makedirs(dest, exist_ok=True)
    paths = {}
    for key, fname in MNIST_FILES.items():
        path = os.path.join(dest, fname)
        if not (os.path.exists(path) and _sha256(path) == sha256[key]):
            with urllib.request.urlopen(base_url.rstrip("/") + "/" + fname) as r, open(path + ".part", "wb") as f:
                shutil.copyfileobj(r, f)
            os.replace(path + ".part", path)
        digest = _sha256(path)
        if digest != sha256[key]:
            raise ValueError(f"{fname}: sha256 {digest} does not match expected {sha256[key]}")
        paths[key] = path
    return paths


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def make_permutation_sequence(num_tasks: int, rng: np.random.Generator, size: int = 784) -> list[np.ndarray]:
    """Task 0 is the identity; later tasks are uniformly random pixel permutations."""
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    return [np.arange(size)] + [rng.permutation(size) for _ in range(num_tasks - 1)]


def mnist_sampler(data: MnistData, permutation: np.ndarray | None = None, task_id: int = 0) -> Sampler:
    """Random minibatches (with replacement across batches) from a fixed image set."""
    images = data.images if permutation is None else data.images[:, permutation]

    def sample(n: int, rng: np.random.Generator) -> DatasetBatch:
        idx = rng.integers(0, len(data), n)
        return mnist_batch(images[idx], data.labels[idx], task_id)

    return sample


def mnist_batch(images: np.ndarray, labels: np.ndarray, task_id: int = 0) -> DatasetBatch:
    labels = np.asarray(labels, dtype=np.int64)
    return DatasetBatch(np.asarray(images, dtype=np.float32), labels[:, None], DIGIT,
                        {"label": labels, "task": np.full(len(labels), task_id)})


def mnist_eval_batch(data: MnistData, permutation: np.ndarray | None = None, task_id: int = 0) -> DatasetBatch:
    images = data.images if permutation is None else data.images[:, permutation]
    return mnist_batch(images, data.labels, task_id)
