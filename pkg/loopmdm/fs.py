"""Filesystem helpers for run directories.

Atomic text/bytes writes, JSON read/write with canonical key order, and
append-only JSON-lines logs (metrics, trajectories, tables).
"""
from __future__ import annotations
from pathlib import Path
import json
import tempfile
import os
from typing import Any, Iterable, List, Optional


def ensure_dir(path: Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _atomic_write(path: Path, payload, mode: str, encoding: Optional[str] = None) -> None:
    path = Path(path)
    ensure_dir(path.parent)
    # temp file in the same directory so os.replace stays on one filesystem
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, encoding=encoding) as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, str(path))
    finally:
        try:
            if Path(tmp).exists():
                Path(tmp).unlink()
        except Exception:
            pass


def atomic_write_text(path: Path, text: str, encoding: str = "utf-8") -> None:
    _atomic_write(path, text, "w", encoding)


def atomic_write_bytes(path: Path, data: bytes) -> None:
    _atomic_write(path, data, "wb")


def read_text(path: Path, default: Optional[str] = None, encoding: str = "utf-8") -> Optional[str]:
    p = Path(path)
    if not p.exists():
        return default
    try:
        return p.read_text(encoding=encoding)
    except Exception:
        return default


def json_load(path: Path, default: Optional[Any] = None) -> Any:
    p = Path(path)
    if not p.exists():
        return default
    try:
        with p.open("r", encoding="utf-8") as f:
            return json.load(f)
    except Exception:
        return default


def json_dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def json_save(path: Path, obj: Any) -> None:
    atomic_write_text(Path(path), json_dumps(obj))


def jsonl_line(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def append_jsonl(path: Path, records: Iterable[Any]) -> None:
    p = Path(path)
    ensure_dir(p.parent)
    with p.open("a", encoding="utf-8") as f:
        for rec in records:
            f.write(jsonl_line(rec) + "\n")


def read_jsonl(path: Path) -> List[Any]:
    p = Path(path)
    if not p.exists():
        return []
    with p.open("r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_tsv(path: Path, header: List[str], rows: Iterable[Iterable[Any]]) -> None:
    lines = ["\t".join(header)]
    lines.extend("\t".join(str(v) for v in row) for row in rows)
    atomic_write_text(Path(path), "\n".join(lines) + "\n")
