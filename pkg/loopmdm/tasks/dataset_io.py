"""Dataset files.

Line 1 is a JSON header:

    {"format": "loopmdm-dataset", "version": 1, "task": ..., "config": {...},
     "vocab_size": V, "seq_len": L, "count": N}

then one instance per line: space-separated token ids, a tab, and the
space-separated per-position roles (see `tasks.roles`). Files are written
atomically; every read error names the file and line.
"""
from __future__ import annotations
import json
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from .. import fs
from ..errors import DatasetError

FORMAT = "loopmdm-dataset"
VERSION = 1


def _row(values: np.ndarray) -> str:
    return " ".join(str(int(v)) for v in values)


def dataset_text(task: str, config: Dict[str, Any], vocab_size: int, tokens: np.ndarray, roles: np.ndarray) -> str:
    tokens = np.asarray(tokens, dtype=np.int64)
    roles = np.asarray(roles, dtype=np.int64)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "task": task,
        "config": config,
        "vocab_size": int(vocab_size),
        "seq_len": int(tokens.shape[1]) if tokens.ndim == 2 else 0,
        "count": int(tokens.shape[0]),
    }
    lines = [fs.jsonl_line(header)]
    lines.extend(f"{_row(tok)}\t{_row(rol)}" for tok, rol in zip(tokens, roles))
    return "\n".join(lines) + "\n"


def write_dataset(
    path: Path, task: str, config: Dict[str, Any], vocab_size: int, tokens: np.ndarray, roles: np.ndarray
) -> Path:
    path = Path(path)
    fs.atomic_write_text(path, dataset_text(task, config, vocab_size, tokens, roles))
    return path


def _ints(path: str, lineno: int, field: str, text: str, length: int) -> np.ndarray:
    try:
        values = np.asarray([int(x) for x in text.split()], dtype=np.int64)
    except ValueError as exc:
        raise DatasetError(path, lineno, f"non-integer {field}: {exc}") from exc
    if values.size != length:
        raise DatasetError(path, lineno, f"expected {length} {field}, got {values.size}")
    return values


def read_dataset(path: Path) -> Tuple[Dict[str, Any], np.ndarray, np.ndarray]:
    """(header, tokens [N, L], roles [N, L])."""
    path = Path(path)
    name = str(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise DatasetError(name, 0, f"cannot read dataset: {exc}") from exc
    if not lines:
        raise DatasetError(name, 1, "missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(name, 1, f"header is not JSON: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise DatasetError(name, 1, f"not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise DatasetError(name, 1, f"unsupported version {header.get('version')!r}")
    for key in ("task", "vocab_size", "seq_len", "count"):
        if key not in header:
            raise DatasetError(name, 1, f"header lacks {key!r}")

    length, vocab = int(header["seq_len"]), int(header["vocab_size"])
    body = [(i, line) for i, line in enumerate(lines[1:], start=2) if line.strip()]
    if len(body) != int(header["count"]):
        raise DatasetError(name, len(lines), f"header announces {header['count']} instances, found {len(body)}")
    tokens = np.zeros((len(body), length), dtype=np.int64)
    roles = np.zeros((len(body), length), dtype=np.int64)
    for row, (lineno, line) in enumerate(body):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetError(name, lineno, "expected tokens and roles separated by one tab")
        tokens[row] = _ints(name, lineno, "tokens", parts[0], length)
        roles[row] = _ints(name, lineno, "roles", parts[1], length)
        if tokens[row].min(initial=0) < 0 or tokens[row].max(initial=0) >= vocab:
            raise DatasetError(name, lineno, f"token outside [0, {vocab})")
    return header, tokens, roles
