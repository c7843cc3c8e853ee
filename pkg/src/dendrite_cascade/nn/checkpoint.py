"""Checkpoint files.

Layout, all integers little-endian::

    b"DCKP"                      magic
    uint64                       manifest length in bytes
    manifest                     UTF-8 JSON, sorted keys
    payload                      float64 values, parameters in manifest order
    uint32                       CRC32 of everything above

The manifest holds ``format_version``, a ``params`` list of
``{name, shape, offset, count}`` (offset in bytes from the start of the
payload) and an optional free-form ``meta`` object (the model architecture).
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import (CheckpointChecksumError, CheckpointError, CheckpointNameError,
                      CheckpointTruncatedError, CheckpointVersionError)
from .params import ParamStore

MAGIC = b"DCKP"
FORMAT_VERSION = 1


def encode_checkpoint(params: ParamStore, meta=None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "count": int(t.data.size)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "params": entries, "payload_bytes": offset}
    if meta is not None:
        manifest["meta"] = meta
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes):
    """Return ``(ParamStore, meta)`` from checkpoint bytes."""
    if len(blob) < 12 or blob[:4] != MAGIC:
        if len(blob) < 12:
            raise CheckpointTruncatedError("file too short to be a checkpoint")
        raise CheckpointError("not a checkpoint file (bad magic)")
    (head_len,) = struct.unpack("<Q", blob[4:12])
    if len(blob) < 12 + head_len:
        raise CheckpointTruncatedError("manifest truncated")
    try:
        manifest = json.loads(blob[12:12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    start = 12 + head_len
    size = int(manifest["payload_bytes"])
    if len(blob) < start + size + 4:
        raise CheckpointTruncatedError(
            f"payload truncated: need {size + 4} bytes after manifest, have {len(blob) - start}")
    body = blob[:start + size]
    (crc,) = struct.unpack("<I", blob[start + size:start + size + 4])
    if zlib.crc32(body) != crc:
        raise CheckpointChecksumError("checksum mismatch; file is corrupted")
    payload = blob[start:start + size]
    store = ParamStore()
    for entry in manifest["params"]:
        lo = entry["offset"]
        hi = lo + 8 * entry["count"]
        values = np.frombuffer(payload[lo:hi], dtype="<f8").astype(np.float64)
        store.add(entry["name"], values.reshape(entry["shape"]))
    return store, manifest.get("meta")


def save_checkpoint(params: ParamStore, path, meta=None):
    path = Path(path)
    path.write_bytes(encode_checkpoint(params, meta))
    return path


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def load_into(target: ParamStore, source: ParamStore):
    """Copy values from ``source`` into ``target``; names and shapes must agree."""
    unknown = [n for n in source.names() if n not in target]
    if unknown:
        raise CheckpointNameError(f"unknown parameter name(s) in checkpoint: {', '.join(unknown[:5])}")
    missing = [n for n in target.names() if n not in source]
    if missing:
        raise CheckpointNameError(f"checkpoint lacks parameter(s): {', '.join(missing[:5])}")
    for name, t in source.items():
        if target[name].shape != t.shape:
            raise CheckpointError(f"shape mismatch for {name}: {t.shape} vs {target[name].shape}")
        target[name].data[...] = t.data
    return target
