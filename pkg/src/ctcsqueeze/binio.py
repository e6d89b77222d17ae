"""Binary containers and small text formats.

Matrix container layout (16-byte header, little-endian):

    bytes 0..3   magic (``CTCP`` for posteriors, ``FEAT`` for features)
    bytes 4..7   u32 format version (currently 1)
    bytes 8..11  u32 number of rows (T)
    bytes 12..15 u32 number of columns (C or F)
    bytes 16..   row-major float32 payload

Checkpoint container layout:

    bytes 0..3   magic ``CKPT``
    bytes 4..7   u32 format version (currently 1)
    bytes 8..15  u64 length of the UTF-8 JSON header
    ...          JSON header, then raw parameter payloads in header order

The JSON header carries the parameter table (name, shape, dtype, byte
length), an optional model-config echo and free-form metadata. Payloads
are written as little-endian row-major bytes, so a save/load round trip
is bit exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1
MAGIC_POSTERIORS = b"CTCP"
MAGIC_FEATURES = b"FEAT"
MAGIC_CHECKPOINT = b"CKPT"

_DTYPE_CODES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def _write_matrix(path: str | Path, magic: bytes, data: np.ndarray) -> None:
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise DataError(f"expected a 2-D matrix, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<III", FORMAT_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def _read_matrix(path: str | Path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != magic:
            raise DataError(f"{path}: bad or missing {magic.decode()} header")
        version, rows, cols = struct.unpack("<III", header[4:])
        if version != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported format version {version}")
        payload = fh.read(rows * cols * 4)
    if len(payload) != rows * cols * 4:
        raise DataError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()


def write_posteriors(path: str | Path, log_probs: np.ndarray) -> None:
    _write_matrix(path, MAGIC_POSTERIORS, log_probs)


def read_posteriors(path: str | Path) -> np.ndarray:
    return _read_matrix(path, MAGIC_POSTERIORS)


def write_features(path: str | Path, frames: np.ndarray) -> None:
    _write_matrix(path, MAGIC_FEATURES, frames)


def read_features(path: str | Path) -> np.ndarray:
    return _read_matrix(path, MAGIC_FEATURES)


def _dtype_code(dtype: np.dtype) -> str:
    for code, dt in _DTYPE_CODES.items():
        if dt == dtype.newbyteorder("<"):
            return code
    raise DataError(f"unsupported checkpoint dtype {dtype}")


def save_checkpoint(
    path: str | Path,
    params: Mapping[str, np.ndarray],
    *,
    config: Mapping[str, Any] | None = None,
    extra: Mapping[str, Any] | None = None,
) -> None:
    """Write parameter arrays plus optional config echo and metadata."""
    table = []
    payloads = []
    for name, value in params.items():
        arr = np.ascontiguousarray(value)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        table.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": _dtype_code(arr.dtype),
                "nbytes": len(raw),
            }
        )
        payloads.append(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": dict(config) if config is not None else None,
        "extra": dict(extra) if extra is not None else {},
        "params": table,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC_CHECKPOINT)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path: str | Path):
    """Read a checkpoint; returns (params dict, config dict or None, extra dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC_CHECKPOINT:
            raise DataError(f"{path}: not a checkpoint file")
        version, json_len = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(json_len).decode("utf-8"))
        params: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            raw = fh.read(entry["nbytes"])
            if len(raw) != entry["nbytes"]:
                raise DataError(f"{path}: truncated parameter {entry['name']}")
            arr = np.frombuffer(raw, dtype=_DTYPE_CODES[entry["dtype"]])
            params[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return params, header.get("config"), header.get("extra", {})


def read_vocab_file(path: str | Path) -> list[str]:
    """One label per line; line 0 is reserved for the blank symbol."""
    labels = Path(path).read_text(encoding="utf-8").splitlines()
    labels = [line for line in labels if line != ""]
    if not labels:
        raise DataError(f"{path}: empty vocabulary file")
    return labels


def write_vocab_file(path: str | Path, labels: Iterable[str]) -> None:
    Path(path).write_text("\n".join(labels) + "\n", encoding="utf-8")


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: bad JSON line: {exc}") from exc
    return records


def write_jsonl(path: str | Path, records: Iterable[Mapping[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
