"""Binary checkpoint format.

Layout::

    MMTCKPT1\\n
    version 1\\n
    [config]\\n
    key=value\\n ...            (sorted ModelConfig fields)
    config_hash <sha256>\\n
    meta <json>\\n              (epoch, validation history, optimizer step)
    tensors <count>\\n
    then per tensor: "<name> <ndim> <d0> ...\\n" + little-endian float32 payload
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from ..deliberation import DeliberationMT
from ..transformer import ModelConfig, TransformerMT

MAGIC = b"MMTCKPT1\n"
VERSION = 1


class IncompatibleCheckpoint(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)


def config_lines(cfg: ModelConfig) -> list[str]:
    return [f"{k}={v}" for k, v in sorted(cfg.to_dict().items())]


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256("\n".join(config_lines(cfg)).encode()).hexdigest()


def build_model(cfg: ModelConfig):
    return TransformerMT(cfg) if cfg.family == "Trans" else DeliberationMT(cfg)


def checkpoint_from_model(model, history=None, optimizer=None) -> Checkpoint:
    meta = {"history": history or [], "epoch": len(history or [])}
    opt = {}
    if optimizer is not None:
        meta["adam_t"] = optimizer.state.t
        for name in sorted(optimizer.state.m):
            opt[f"adam.m.{name}"] = optimizer.state.m[name]
            opt[f"adam.v.{name}"] = optimizer.state.v[name]
    return Checkpoint(model.cfg, model.state_dict(), meta, opt)


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4")
    fh.write(f"{name} {arr.ndim} {' '.join(map(str, arr.shape))}\n".encode())
    fh.write(np.ascontiguousarray(arr).tobytes())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"version {VERSION}\n[config]\n".encode())
        for line in config_lines(ckpt.config):
            fh.write((line + "\n").encode())
        fh.write(f"config_hash {config_hash(ckpt.config)}\n".encode())
        fh.write(("meta " + json.dumps(ckpt.meta, sort_keys=True) + "\n").encode())
        named = list(ckpt.tensors.items()) + sorted(ckpt.optimizer.items())
        fh.write(f"tensors {len(named)}\n".encode())
        for name, arr in named:
            _write_tensor(fh, name, arr)


def save_model(model, path, history=None, optimizer=None) -> None:
    save_checkpoint(checkpoint_from_model(model, history, optimizer), path)


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise IncompatibleCheckpoint(f"{path}: not a checkpoint (bad magic)")
        version = fh.readline().decode().split()
        if version != ["version", str(VERSION)]:
            raise IncompatibleCheckpoint(f"{path}: unsupported version line {version}")
        if fh.readline() != b"[config]\n":
            raise IncompatibleCheckpoint(f"{path}: missing config block")
        fields_ = {}
        while True:
            line = fh.readline().decode().rstrip("\n")
            if line.startswith("config_hash "):
                stored_hash = line.split()[1]
                break
            if not line:
                raise IncompatibleCheckpoint(f"{path}: truncated config block")
            k, v = line.split("=", 1)
            fields_[k] = v
        cfg = ModelConfig.from_dict(fields_)
        if config_hash(cfg) != stored_hash:
            raise IncompatibleCheckpoint(f"{path}: config hash mismatch (file altered or corrupt)")
        if expected is not None and config_hash(expected) != stored_hash:
            raise IncompatibleCheckpoint(f"{path}: checkpoint architecture differs from the requested config")
        meta = json.loads(fh.readline().decode()[len("meta "):])
        count = int(fh.readline().decode().split()[1])
        tensors, opt = {}, {}
        for _ in range(count):
            head = fh.readline().decode().split()
            name, ndim = head[0], int(head[1])
            shape = tuple(int(d) for d in head[2: 2 + ndim])
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
            (opt if name.startswith("adam.") else tensors)[name] = arr
    return Checkpoint(cfg, tensors, meta, opt)


def load_model(path, expected: ModelConfig | None = None):
    ckpt = load_checkpoint(path, expected)
    model = build_model(ckpt.config)
    model.load_state_dict(ckpt.tensors)
    if isinstance(model, DeliberationMT):
        model.stage1_loaded = True
        model.freeze_first_pass()
    model.eval()
    return model
