"""Versioned checkpoint container.

Layout: ``MAGIC`` (8 bytes), format version (uint32 LE), header length
(uint32 LE), a UTF-8 JSON header, then an ``.npz`` payload holding every
array.  Binary masks are bit-packed per tensor.  Loading rejects a wrong
magic, any other format version and, when asked, a config digest mismatch.
"""
from __future__ import annotations

import io
import json
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masks import BinaryMask

MAGIC = b"WMASKCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class MaskRecord:
    logits: dict[str, np.ndarray]
    bits: BinaryMask
    tau: float = 1.0
    excluded: list[str] = field(default_factory=list)
    fixed: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class OptimRecord:
    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


@dataclass
class Checkpoint:
    config_digest: str
    params: dict[str, np.ndarray]
    frozen: list[str] = field(default_factory=list)
    frozen_elements: dict[str, np.ndarray] = field(default_factory=dict)
    masks: dict[str, MaskRecord] = field(default_factory=dict)
    optim: dict[str, OptimRecord] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _key(*parts: str) -> str:
    # npz keys cannot contain '/' reliably on every platform; use a separator unlikely in names
    return "|".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    arrays: dict[str, np.ndarray] = {}
    for n, a in ckpt.params.items():
        arrays[_key("param", n)] = a
    for n, a in ckpt.frozen_elements.items():
        arrays[_key("pin", n)] = np.packbits(a.ravel())
    masks_header = {}
    for stage, rec in ckpt.masks.items():
        for n, a in rec.logits.items():
            arrays[_key("logit", stage, n)] = a
        for n, blob in rec.bits.pack().items():
            arrays[_key("bits", stage, n)] = blob
        for n, a in rec.fixed.items():
            arrays[_key("fixed", stage, n)] = np.packbits(a.ravel())
        masks_header[stage] = {
            "tau": rec.tau,
            "excluded": list(rec.excluded),
            "logit_names": list(rec.logits),
            "bit_shapes": {n: list(b.shape) for n, b in rec.bits.bits.items()},
            "fixed_shapes": {n: list(a.shape) for n, a in rec.fixed.items()},
            "bits_stage": rec.bits.stage,
        }
    optim_header = {}
    for name, rec in ckpt.optim.items():
        for n, a in rec.m.items():
            arrays[_key("adam_m", name, n)] = a
        for n, a in rec.v.items():
            arrays[_key("adam_v", name, n)] = a
        optim_header[name] = {"lr": rec.lr, "beta1": rec.beta1, "beta2": rec.beta2, "eps": rec.eps,
                              "step": rec.step, "names": list(rec.m)}
    header = {
        "config_digest": ckpt.config_digest,
        "param_names": list(ckpt.params),
        "frozen": list(ckpt.frozen),
        "pin_shapes": {n: list(a.shape) for n, a in ckpt.frozen_elements.items()},
        "masks": masks_header,
        "optim": optim_header,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
    }
    payload = io.BytesIO()
    np.savez(payload, **arrays)
    head = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        f.write(head)
        f.write(payload.getvalue())
    tmp.replace(path)
    return path


def _unpack_bool(blob: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    return np.unpackbits(blob, count=int(np.prod(shape))).astype(bool).reshape(shape)


def load_checkpoint(path, expected_digest: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:len(MAGIC)]!r})")
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: truncated header")
    version, head_len = struct.unpack("<II", raw[len(MAGIC):len(MAGIC) + 8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})")
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start:start + head_len].decode("utf-8"))
        arrays = np.load(io.BytesIO(raw[start + head_len:]), allow_pickle=False)
        arrays = {k: arrays[k] for k in arrays.files}
    except (ValueError, OSError, EOFError, KeyError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if expected_digest is not None and header["config_digest"] != expected_digest:
        raise CheckpointError(f"{path}: config digest mismatch; the checkpoint was written for another config")

    params = {n: arrays[_key("param", n)] for n in header["param_names"]}
    pins = {n: _unpack_bool(arrays[_key("pin", n)], s) for n, s in header["pin_shapes"].items()}
    masks = {}
    for stage, mh in header["masks"].items():
        logits = {n: arrays[_key("logit", stage, n)] for n in mh["logit_names"]}
        packed = {n: arrays[_key("bits", stage, n)] for n in mh["bit_shapes"]}
        bits = BinaryMask.unpack(packed, mh["bit_shapes"], mh["bits_stage"])
        fixed = {n: _unpack_bool(arrays[_key("fixed", stage, n)], s) for n, s in mh["fixed_shapes"].items()}
        masks[stage] = MaskRecord(logits, bits, mh["tau"], mh["excluded"], fixed)
    optim = {}
    for name, oh in header["optim"].items():
        optim[name] = OptimRecord(
            oh["lr"], oh["beta1"], oh["beta2"], oh["eps"], oh["step"],
            {n: arrays[_key("adam_m", name, n)] for n in oh["names"]},
            {n: arrays[_key("adam_v", name, n)] for n in oh["names"]},
        )
    return Checkpoint(header["config_digest"], params, header["frozen"], pins, masks, optim,
                      header["rng_state"], header["meta"], version)
