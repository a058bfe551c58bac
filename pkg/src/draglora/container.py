"""Binary tensor container used for model checkpoints and adapter files.

Layout: ``b"DLC1" | u32 header length | header JSON | sha256(header) | payload``.
The header records the tensor index plus a sha256 of the payload, so edited
headers and truncated payloads are both detected on load. Tensor entries are
little-endian float32.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"DLC1"
FORMAT_VERSION = 1


def save_container(path: str | Path, kind: str, meta: dict,
                   tensors: dict[str, np.ndarray]) -> None:
    names = sorted(tensors)
    payload = bytearray()
    index = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        index.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "f32",
            "offset": len(payload),
            "nbytes": arr.nbytes,
        })
        payload += arr.tobytes()
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "tensors": index,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(hashlib.sha256(header_bytes).digest())
        f.write(payload)


def load_container(path: str | Path) -> tuple[str, dict, dict[str, np.ndarray], str]:
    """Returns (kind, meta, tensors, payload_sha256). Raises CheckpointError on corruption."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor container")
    (header_len,) = struct.unpack("<I", raw[4:8])
    header_end = 8 + header_len
    if len(raw) < header_end + 32:
        raise CheckpointError(f"{path}: truncated container header")
    header_bytes = raw[8:header_end]
    stored_digest = raw[header_end:header_end + 32]
    if hashlib.sha256(header_bytes).digest() != stored_digest:
        raise CheckpointError(f"{path}: header hash mismatch")
    try:
        header = json.loads(header_bytes)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')}")
    payload = raw[header_end + 32:]
    expected = sum(entry["nbytes"] for entry in header["tensors"])
    if len(payload) < expected:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} < {expected})")
    payload = payload[:expected]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload hash mismatch")
    tensors = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start:start + n], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return header["kind"], header["meta"], tensors, header["payload_sha256"]
