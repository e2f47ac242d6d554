"""Checkpoint container.

Layout (all integers little-endian):

    b"LMDM"  u32 version
    u32 config length, canonical JSON config block (configs, counters, rng state)
    u32 section count
    per section: u16 name length, name, u8 dtype code (0 = f4, 1 = f8),
                 u8 ndim, u32 dims..., u64 element count, raw data
    8-byte BLAKE2b digest of everything before it

Sections are `params/<name>`, `ema/<name>`, `adam_m/<name>`, `adam_v/<name>`.
Files are written atomically; loading validates everything before building
any state, so a failed load leaves nothing half-restored.
"""
from __future__ import annotations
import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np

from . import fs
from .canonical import from_flat, to_flat
from .errors import CheckpointError
from .model import LoopConfig, ModelConfig, ModelParams
from .trainer import AdamState, TrainConfig, TrainState

MAGIC = b"LMDM"
VERSION = 1
DIGEST_SIZE = 8
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=DIGEST_SIZE).digest()


def _section(name: str, array: np.ndarray) -> bytes:
    dt = np.dtype(array.dtype).newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise CheckpointError(name, f"unsupported dtype {array.dtype}")
    encoded = name.encode("utf-8")
    parts = [
        struct.pack("<H", len(encoded)), encoded,
        struct.pack("<BB", _DTYPE_CODES[dt], array.ndim),
        struct.pack(f"<{array.ndim}I", *array.shape),
        struct.pack("<Q", array.size),
        np.ascontiguousarray(array, dtype=dt).tobytes(),
    ]
    return b"".join(parts)


def _config_block(state: TrainState) -> Dict[str, Any]:
    return {
        "model": to_flat(state.model_cfg),
        "loop": to_flat(state.loop_cfg),
        "train": to_flat(state.train_cfg),
        "step": state.step,
        "opt_step": state.opt.step,
        "flops": state.flops,
        "n_layers": len(state.params.layers),
        "rng": state.rng.bit_generator.state,
    }


def checkpoint_bytes(state: TrainState) -> bytes:
    config = json.dumps(_config_block(state), sort_keys=True, separators=(",", ":")).encode("utf-8")
    sections: List[Tuple[str, np.ndarray]] = []
    for name, p in state.params.named_parameters():
        sections.append((f"params/{name}", p.data))
    for name, p in state.ema.named_parameters():
        sections.append((f"ema/{name}", p.data))
    for name, _ in state.params.named_parameters():
        sections.append((f"adam_m/{name}", state.opt.m[name]))
        sections.append((f"adam_v/{name}", state.opt.v[name]))
    body = b"".join(
        [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(config)), config, struct.pack("<I", len(sections))]
        + [_section(name, arr) for name, arr in sections]
    )
    return body + _digest(body)


def save_checkpoint(state: TrainState, path: Path) -> Path:
    path = Path(path)
    fs.atomic_write_bytes(path, checkpoint_bytes(state))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(section, f"truncated: needed {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, section: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))


def _parse(data: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    if len(data) < len(MAGIC) + 4 + DIGEST_SIZE:
        raise CheckpointError("header", "file too short")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    reader = _Reader(body)
    if reader.take(4, "header") != MAGIC:
        raise CheckpointError("header", "bad magic bytes")
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError("version", f"unsupported version {version}, expected {VERSION}")
    (config_len,) = reader.unpack("<I", "config")
    try:
        config = json.loads(reader.take(config_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("config", f"unreadable config block: {exc}") from exc
    (count,) = reader.unpack("<I", "sections")
    arrays: Dict[str, np.ndarray] = {}
    for index in range(count):
        label = f"section #{index}"
        (name_len,) = reader.unpack("<H", label)
        name = reader.take(name_len, label).decode("utf-8", errors="replace")
        code, ndim = reader.unpack("<BB", name)
        if code not in _CODE_DTYPES:
            raise CheckpointError(name, f"unknown dtype code {code}")
        shape = reader.unpack(f"<{ndim}I", name)
        (size,) = reader.unpack("<Q", name)
        if int(np.prod(shape, dtype=np.int64)) != size:
            raise CheckpointError(name, f"shape {shape} does not hold {size} elements")
        dt = _CODE_DTYPES[code]
        raw = reader.take(size * dt.itemsize, name)
        arrays[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if reader.pos != len(body):
        raise CheckpointError("trailer", f"{len(body) - reader.pos} unexpected bytes after the last section")
    if _digest(body) != digest:
        raise CheckpointError("checksum", "hash mismatch")
    return config, arrays


def _params_from(prefix: str, arrays: Dict[str, np.ndarray], n_layers: int, requires_grad: bool) -> ModelParams:
    picked = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    try:
        return ModelParams.from_arrays(picked, n_layers, requires_grad)
    except KeyError as exc:
        raise CheckpointError(f"{prefix}{exc.args[0]}", "missing section") from exc


def load_checkpoint(path: Path) -> TrainState:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError("file", f"cannot read {path}: {exc}") from exc
    config, arrays = _parse(data)
    try:
        model_cfg = from_flat(ModelConfig, config["model"])
        loop_cfg = from_flat(LoopConfig, config["loop"])
        train_cfg = from_flat(TrainConfig, config["train"])
        n_layers = int(config["n_layers"])
        rng_state = config["rng"]
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError("config", f"incomplete config block: {exc}") from exc

    params = _params_from("params/", arrays, n_layers, True)
    ema = _params_from("ema/", arrays, n_layers, False)
    names = [name for name, _ in params.named_parameters()]
    missing = [n for n in names if f"adam_m/{n}" not in arrays or f"adam_v/{n}" not in arrays]
    if missing:
        raise CheckpointError(f"adam_m/{missing[0]}", "missing optimizer moments")
    opt = AdamState(
        {n: arrays[f"adam_m/{n}"] for n in names},
        {n: arrays[f"adam_v/{n}"] for n in names},
        int(config["opt_step"]),
    )
    rng = np.random.Generator(getattr(np.random, rng_state["bit_generator"])())
    rng.bit_generator.state = rng_state
    return TrainState(
        model_cfg, loop_cfg, train_cfg, params, ema, opt, rng,
        step=int(config["step"]), flops=int(config["flops"]),
    )
