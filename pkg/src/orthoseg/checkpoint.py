"""Parameter checkpoint container.

Layout (all integers little-endian)::

    magic     8 bytes  b"ORTHOSEG"
    version   uint32   1
    hlen      uint64   length of the JSON header in bytes
    header    hlen bytes of UTF-8 JSON
    payload   concatenated little-endian float32 arrays

The header holds ``{"arrays": [{"name", "shape", "offset", "count"}, ...],
"config": {...}, "meta": {...}}``. ``offset`` and ``count`` are in float32
elements relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .nets import NetworkConfig, Parameters, build

MAGIC = b"ORTHOSEG"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_arrays(path: "str | Path", arrays: dict[str, np.ndarray], header_extra: Optional[dict] = None) -> Path:
    path = Path(path)
    entries = []
    offset = 0
    for name, arr in arrays.items():
        count = int(np.asarray(arr).size)
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "count": count})
        offset += count
    header = {"arrays": entries, **(header_extra or {})}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def read_arrays(path: "str | Path") -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC or len(raw) < 20:
        raise CheckpointError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = np.frombuffer(raw, dtype="<f4", offset=20 + hlen)
    arrays = {}
    for e in header["arrays"]:
        end = e["offset"] + e["count"]
        if end > payload.size:
            raise CheckpointError(f"truncated checkpoint: array {e['name']}")
        arrays[e["name"]] = payload[e["offset"] : end].reshape(e["shape"]).astype(np.float32)
    return arrays, header


def save_checkpoint(
    path: "str | Path", params: Parameters, cfg: NetworkConfig, meta: Optional[dict[str, Any]] = None
) -> Path:
    """Store weights, running statistics and the network config."""
    return write_arrays(path, params.state(), {"config": cfg.to_dict(), "meta": meta or {}})


def load_checkpoint(path: "str | Path") -> tuple[Parameters, NetworkConfig, dict]:
    arrays, header = read_arrays(path)
    if "config" not in header:
        raise CheckpointError("checkpoint carries no network config")
    cfg = NetworkConfig.from_dict(header["config"])
    params = build(cfg, 0)
    params.load_state(arrays)
    return params, cfg, header.get("meta", {})
