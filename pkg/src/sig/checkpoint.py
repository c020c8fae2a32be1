"""Versioned binary checkpoints.

Layout: the magic string ``SIGCKPT1``, a little-endian uint32 record
count, then one record per named array: uint32 name length, UTF-8 name
bytes, uint32 rank, uint32 dims, and the row-major float64 little-endian
payload. The confounder dictionary travels as the reserved names
``confounder_dictionary`` / ``confounder_cluster_sizes``; the resolved
run configuration and metadata travel as JSON byte streams under
``config_json`` / ``meta_json`` (one float64 per byte, keeping the record
format uniform). Save order is deterministic, so save - load - save is
byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParameterSet
from .confounders import ConfounderDictionary

MAGIC = b"SIGCKPT1"

_RESERVED = ("confounder_dictionary", "confounder_cluster_sizes",
             "config_json", "meta_json")


class CheckpointError(ValueError):
    pass


def _write_record(fh, name: str, array: np.ndarray) -> None:
    data = np.ascontiguousarray(array, dtype="<f8")
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", data.ndim))
    for d in data.shape:
        fh.write(struct.pack("<I", d))
    fh.write(data.tobytes())


def _json_to_array(obj) -> np.ndarray:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def _array_to_json(arr: np.ndarray):
    raw = bytes(np.asarray(arr, dtype=np.float64).astype(np.uint8).tobytes())
    return json.loads(raw.decode("utf-8"))


def save_checkpoint(path, params: ParameterSet,
                    dictionary: ConfounderDictionary | None,
                    config: dict, meta: dict | None = None) -> None:
    records: list[tuple[str, np.ndarray]] = list(params.items())
    for name, _ in records:
        if name in _RESERVED:
            raise CheckpointError(f"parameter name {name!r} is reserved")
    arrays = [(n, t.data) for n, t in records]
    if dictionary is not None:
        arrays.append(("confounder_dictionary", dictionary.centroids))
        arrays.append(("confounder_cluster_sizes",
                       dictionary.sizes.astype(np.float64)))
    arrays.append(("config_json", _json_to_array(config)))
    arrays.append(("meta_json", _json_to_array(meta or {})))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            _write_record(fh, name, arr)


def load_checkpoint(path) -> tuple[ParameterSet, ConfounderDictionary | None,
                                   dict, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise CheckpointError("truncated checkpoint: missing header")
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(
            f"unknown checkpoint magic {raw[:len(MAGIC)]!r}; expected {MAGIC!r}")
    off = len(MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        part = raw[off:off + n]
        off += n
        return part

    (count,) = struct.unpack("<I", take(4, "record count"))
    entries: dict[str, np.ndarray] = {}
    order: list[str] = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        n_vals = int(np.prod(dims)) if dims else 1
        payload = take(8 * n_vals, f"payload of {name!r}")
        entries[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        order.append(name)
    if off != len(raw):
        raise CheckpointError("trailing bytes after final record")

    params = ParameterSet()
    for name in order:
        if name not in _RESERVED:
            params.add(name, entries[name])
    dictionary = None
    if "confounder_dictionary" in entries:
        dictionary = ConfounderDictionary(
            centroids=entries["confounder_dictionary"],
            sizes=entries["confounder_cluster_sizes"].astype(np.int64))
    config = _array_to_json(entries["config_json"]) if "config_json" in entries else {}
    meta = _array_to_json(entries["meta_json"]) if "meta_json" in entries else {}
    return params, dictionary, config, meta
