"""Single-file binary checkpoints.

Layout: one version byte, a little-endian uint32 manifest length, the JSON
manifest (UTF-8, sorted keys, compact separators), then the raw parameter
payload. The manifest lists every parameter — frozen ones included, flagged —
sorted by path with explicit shape, offset, and byte length; payload bytes are
little-endian float32 in C order, packed contiguously in manifest order.

The writer is fully deterministic, so save -> load -> save reproduces the
file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .tensor import ParamStore

CHECKPOINT_VERSION = 1


@dataclass
class CheckpointData:
    store: ParamStore
    config: dict
    rng_state: dict
    epoch: int


def _manifest(store: ParamStore, config: dict, rng_state: dict, epoch: int) -> dict:
    params = []
    offset = 0
    for path in sorted(store.paths()):
        t = store[path]
        if t.data.dtype != np.float32:
            raise ValueError(f"checkpoints hold float32 parameters; {path} is {t.data.dtype}")
        nbytes = int(t.data.size * 4)
        params.append({
            "path": path,
            "shape": [int(s) for s in t.data.shape],
            "dtype": "float32",
            "offset": offset,
            "nbytes": nbytes,
            "trainable": bool(store.is_trainable(path)),
        })
        offset += nbytes
    return {
        "config": config,
        "epoch": int(epoch),
        "params": params,
        "rng": rng_state,
    }


def save_checkpoint(path, store: ParamStore, config: dict, rng_state: dict,
                    epoch: int) -> None:
    manifest = _manifest(store, config, rng_state, epoch)
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for entry in manifest["params"]:
            arr = store[entry["path"]].data
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> CheckpointData:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot open checkpoint: {exc}") from exc
    if len(raw) < 5:
        raise DataError(f"checkpoint truncated before header: {path}")
    version = raw[0]
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}: {path}")
    (m_len,) = struct.unpack("<I", raw[1:5])
    if len(raw) < 5 + m_len:
        raise DataError(f"checkpoint truncated inside manifest: {path}")
    try:
        manifest = json.loads(raw[5:5 + m_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"checkpoint manifest is not valid JSON: {path}") from exc
    for key in ("config", "epoch", "params", "rng"):
        if key not in manifest:
            raise DataError(f"checkpoint manifest missing {key!r}: {path}")

    payload = raw[5 + m_len:]
    store = ParamStore()
    expected_offset = 0
    for entry in manifest["params"]:
        missing = {"path", "shape", "dtype", "offset", "nbytes", "trainable"} - set(entry)
        if missing:
            raise DataError(f"parameter record missing {sorted(missing)}: {path}")
        if entry["dtype"] != "float32":
            raise DataError(f"unsupported parameter dtype {entry['dtype']!r}: {path}")
        shape = tuple(int(s) for s in entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if entry["nbytes"] != size * 4:
            raise DataError(f"byte length disagrees with shape for {entry['path']}: {path}")
        if entry["offset"] != expected_offset:
            raise DataError(f"non-contiguous payload offset for {entry['path']}: {path}")
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise DataError(f"checkpoint payload truncated at {entry['path']}: {path}")
        arr = np.frombuffer(payload, dtype="<f4", count=size,
                            offset=entry["offset"]).reshape(shape)
        store.add(entry["path"], arr.copy(), trainable=bool(entry["trainable"]))
        expected_offset = end
    if expected_offset != len(payload):
        raise DataError(f"checkpoint payload has trailing bytes: {path}")
    return CheckpointData(
        store=store,
        config=manifest["config"],
        rng_state=manifest["rng"],
        epoch=int(manifest["epoch"]),
    )
