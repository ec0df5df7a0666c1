"""Single-file named-tensor archive.

Layout::

    b"AEMIMCKPT"                     magic
    u32 LE                           format version
    u64 LE                           manifest length
    manifest                         UTF-8 JSON, sorted keys
    32 bytes                         SHA-256 of the manifest
    per tensor, manifest order:
        u64 LE                       byte length
        float32 LE, row-major        data

The manifest records the config hash, step/epoch, rng stream states, each
tensor's name, shape and partition label, and the SHA-256 of the payload.
Writes go to a temp file that is fsynced and renamed into place.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ParamStore
from .trainer import STREAMS, OptimizerState

MAGIC = b"AEMIMCKPT"
FORMAT_VERSION = 1
LABELS = ("shared", "clean", "adv", "opt_m", "opt_v", "head")


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class ConfigHashMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    labels: dict[str, str]
    config_hash: str = ""
    step: int = 0
    epoch: int = 0
    rng_states: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def partition(self, label: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if self.labels[k] == label}


def write_archive(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    if set(ckpt.tensors) != set(ckpt.labels):
        raise CheckpointError("every tensor needs exactly one partition label")
    entries, chunks = [], []
    for name, arr in ckpt.tensors.items():
        label = ckpt.labels[name]
        if label not in LABELS:
            raise CheckpointError(f"unknown partition label {label!r} for {name}")
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise TypeError(f"{name}: checkpoints hold float32 tensors, got {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "partition": label, "shape": list(arr.shape)})
        chunks.append(struct.pack("<Q", len(data)) + data)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": ckpt.config_hash,
        "step": int(ckpt.step),
        "epoch": int(ckpt.epoch),
        "rng_states": ckpt.rng_states,
        "tensors": entries,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": ckpt.extra,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    blob = (MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<Q", len(mbytes)) + mbytes
            + hashlib.sha256(mbytes).digest() + payload)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_archive(path, expected_hash: str | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    head = len(MAGIC) + 12
    if len(blob) < head:
        raise CheckpointTruncatedError(f"{path}: file shorter than the header")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (mlen,) = struct.unpack_from("<Q", blob, len(MAGIC) + 4)
    if len(blob) < head + mlen + 32:
        raise CheckpointTruncatedError(f"{path}: manifest cut short")
    mbytes = blob[head:head + mlen]
    if hashlib.sha256(mbytes).digest() != blob[head + mlen:head + mlen + 32]:
        raise CheckpointIntegrityError(f"{path}: manifest checksum mismatch")
    manifest = json.loads(mbytes)
    payload = blob[head + mlen + 32:]
    if len(payload) < manifest["payload_bytes"]:
        raise CheckpointTruncatedError(f"{path}: payload has {len(payload)} of {manifest['payload_bytes']} bytes")
    if len(payload) > manifest["payload_bytes"]:
        raise CheckpointIntegrityError(f"{path}: trailing bytes after payload")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointIntegrityError(f"{path}: payload checksum mismatch")
    if expected_hash is not None and manifest["config_hash"] != expected_hash:
        raise ConfigHashMismatchError(f"{path}: written by config {manifest['config_hash'][:12]}, "
                                      f"current config is {expected_hash[:12]}")
    tensors, labels = {}, {}
    off = 0
    for e in manifest["tensors"]:
        (n,) = struct.unpack_from("<Q", payload, off)
        off += 8
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if n != 4 * count:
            raise CheckpointIntegrityError(f"{path}: tensor {e['name']} length {n} does not match its shape")
        tensors[e["name"]] = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(e["shape"]).astype(np.float32)
        labels[e["name"]] = e["partition"]
        off += n
    return Checkpoint(tensors, labels, manifest["config_hash"], manifest["step"], manifest["epoch"],
                      manifest["rng_states"], manifest["extra"])


def rng_state(g: np.random.Generator) -> dict:
    return g.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    cls = getattr(np.random, state["bit_generator"])
    bg = cls()
    bg.state = state
    return np.random.Generator(bg)


@dataclass
class TrainingState:
    opt: OptimizerState
    rngs: dict[str, np.random.Generator]
    step: int = 0
    epoch: int = 0
    config_hash: str = ""
    extra: dict = field(default_factory=dict)


def save_checkpoint(store: ParamStore, state: TrainingState, path) -> Path:
    tensors, labels = {}, {}
    for key, arr in store.items():
        tensors[key] = arr
        labels[key] = key.split("/", 1)[0]
    for key in store.keys():
        tensors["opt_m/" + key] = state.opt.m[key]
        labels["opt_m/" + key] = "opt_m"
        tensors["opt_v/" + key] = state.opt.v[key]
        labels["opt_v/" + key] = "opt_v"
    extra = dict(state.extra)
    extra["opt_step"] = state.opt.step
    ckpt = Checkpoint(tensors, labels, state.config_hash, state.step, state.epoch,
                      {k: rng_state(g) for k, g in state.rngs.items()}, extra)
    return write_archive(path, ckpt)


def store_from_checkpoint(ckpt: Checkpoint) -> ParamStore:
    store = ParamStore()
    for key, arr in ckpt.tensors.items():
        label = ckpt.labels[key]
        if label in ParamStore.PARTITIONS:
            store.partition(label)[key.split("/", 1)[1]] = arr
    return store


def load_checkpoint(path, expected_hash: str | None = None) -> tuple[ParamStore, TrainingState]:
    ckpt = read_archive(path, expected_hash)
    store = store_from_checkpoint(ckpt)
    opt = OptimizerState(
        {k: ckpt.tensors["opt_m/" + k] for k in store.keys()},
        {k: ckpt.tensors["opt_v/" + k] for k in store.keys()},
        int(ckpt.extra.get("opt_step", 0)),
    )
    missing = [s for s in STREAMS if s not in ckpt.rng_states]
    if missing:
        raise CheckpointError(f"{path}: rng streams missing: {missing}")
    rngs = {k: restore_rng(v) for k, v in ckpt.rng_states.items()}
    extra = {k: v for k, v in ckpt.extra.items() if k != "opt_step"}
    return store, TrainingState(opt, rngs, ckpt.step, ckpt.epoch, ckpt.config_hash, extra)
