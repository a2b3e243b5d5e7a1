"""Binary checkpoint container with a deterministic byte layout.

Layout: 8-byte magic, u64 little-endian header length, UTF-8 JSON header
(canonical form: sorted keys, no whitespace), then raw little-endian blob
payloads in the order listed by the header.  Writing the same state twice
yields byte-identical files, which makes save -> load -> save round trips
checkable by hashing.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"ECGCKPT1"

_KIND_TO_DTYPE = {"f4": "<f4", "i8": "<i8", "u1": "|u1"}
_DTYPE_TO_KIND = {
    np.dtype(np.float32): "f4",
    np.dtype(np.float64): "f4",  # stored as fp32; training state is fp32 throughout
    np.dtype(np.int64): "i8",
    np.dtype(np.int32): "i8",
    np.dtype(np.uint8): "u1",
    np.dtype(np.bool_): "u1",
}


class CheckpointError(ValueError):
    pass


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_blobs(path: str | Path, blobs: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    """Write named arrays plus a JSON-serializable metadata dict."""
    entries = []
    payloads = []
    offset = 0
    for name in sorted(blobs):
        src = np.asarray(blobs[name])
        arr = np.ascontiguousarray(src)  # note: promotes 0-d to 1-d, so shape comes from src
        if arr.dtype not in _DTYPE_TO_KIND:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for blob {name!r}")
        kind = _DTYPE_TO_KIND[arr.dtype]
        data = arr.astype(_KIND_TO_DTYPE[kind]).tobytes()
        entries.append(
            {"name": name, "kind": kind, "shape": list(src.shape), "offset": offset, "nbytes": len(data)}
        )
        payloads.append(data)
        offset += len(data)
    header = _canonical_json({"blobs": entries, "meta": meta})
    out = Path(path)
    tmp = out.with_name(out.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for data in payloads:
            fh.write(data)
    tmp.replace(out)


def load_blobs(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack_from("<Q", raw, len(MAGIC))
    header_start = len(MAGIC) + 8
    if header_start + header_len > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[header_start : header_start + header_len].decode("utf-8"))
    payload_start = header_start + header_len
    blobs: dict[str, np.ndarray] = {}
    for entry in header["blobs"]:
        start = payload_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload for blob {entry['name']!r}")
        dtype = _KIND_TO_DTYPE[entry["kind"]]
        arr = np.frombuffer(raw[start:end], dtype=dtype).reshape(entry["shape"])
        blobs[entry["name"]] = arr.copy()  # writable, owns its memory
    return blobs, header["meta"]
