"""Binary checkpoint codec.

Layout: magic ``FWDC``, format version (u32 LE), header length (u32 LE),
UTF-8 JSON header, then the named arrays concatenated as little-endian
float32 in header order. Writes go to a temporary file in the target
directory followed by an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError, IoError

MAGIC = b"FWDC"
FORMAT_VERSION = 1


def save_checkpoint(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float32 arrays plus a JSON metadata block atomically."""
    entries = []
    blobs = []
    for name, arr in arrays.items():
        if not isinstance(name, str) or not name:
            raise FormatError(f"bad array name: {name!r}")
        data = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape)})
        blobs.append(data.tobytes())
    header = {"format_version": FORMAT_VERSION, "meta": meta, "arrays": entries}
    header_bytes = json.dumps(header, separators=(",", ":"), sort_keys=False).encode("utf-8")

    out_dir = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp_path = tempfile.mkstemp(prefix=".ckpt-", dir=out_dir)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
            fh.write(header_bytes)
            for blob in blobs:
                fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back as (arrays, meta). Arrays come out float32."""
    if not os.path.exists(path):
        raise IoError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise FormatError(f"not a checkpoint file (bad magic): {path}")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    header_end = 12 + header_len
    if len(raw) < header_end:
        raise FormatError(f"truncated checkpoint header in {path}")
    try:
        header = json.loads(raw[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header in {path}: {exc}") from exc
    if header.get("format_version") != version:
        raise FormatError(
            f"checkpoint header version {header.get('format_version')} disagrees with file version {version}"
        )
    entries = header.get("arrays")
    meta = header.get("meta")
    if not isinstance(entries, list) or not isinstance(meta, dict):
        raise FormatError(f"malformed checkpoint header in {path}")

    arrays: dict[str, np.ndarray] = {}
    offset = header_end
    payload = memoryview(raw)
    for entry in entries:
        name = entry.get("name")
        shape = entry.get("shape")
        if not isinstance(name, str) or not isinstance(shape, list):
            raise FormatError(f"malformed array entry in {path}: {entry}")
        if name in arrays:
            raise FormatError(f"duplicate array name in {path}: {name}")
        count = 1
        for dim in shape:
            if not isinstance(dim, int) or dim < 0:
                raise FormatError(f"bad shape for array {name} in {path}: {shape}")
            count *= dim
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise FormatError(f"truncated checkpoint payload in {path}: array {name} is short")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype="<f4").reshape(shape)
        arrays[name] = arr.copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"checkpoint {path} has {len(raw) - offset} trailing bytes")
    return arrays, meta


def checkpoint_meta(path: str | os.PathLike) -> dict:
    """Read only the metadata block without touching the payload."""
    if not os.path.exists(path):
        raise IoError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != MAGIC:
            raise FormatError(f"not a checkpoint file (bad magic): {path}")
        version, header_len = struct.unpack_from("<II", head, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
        header_bytes = fh.read(header_len)
    if len(header_bytes) < header_len:
        raise FormatError(f"truncated checkpoint header in {path}")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header in {path}: {exc}") from exc
    meta = header.get("meta")
    if not isinstance(meta, dict):
        raise FormatError(f"malformed checkpoint header in {path}")
    return meta
