"""Wire format for the real-time render service.

Client to server (text JSON, keys in fixed order, compact separators):
  {"type":"pose","fid":<u64>,"R":[9 floats row-major],"T":[3 floats]}
  {"type":"config","k_blend":<u32>,"variant":<string>}

Server to client:
  binary frame: 16-byte header [magic "FWDF" | fid u64 LE | flags u32 LE]
  followed by a PNG raster; flags bit0 set when no input view covered any
  target pixel.
  text {"type":"stats","fid":<u64>,"render_ms":<float>} after each frame.
  text {"type":"error","code":<u32>,"msg":<string>} on protocol errors.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError
from .geometry import rotation_residual

FRAME_MAGIC = b"FWDF"
FRAME_HEADER_BYTES = 16
FLAG_ZERO_COVERAGE = 1

ERR_BAD_JSON = 1
ERR_BAD_FIELD = 2
ERR_RENDER = 3

_U64_MAX = 2 ** 64 - 1
_ROTATION_TOL = 1e-6


def encode_pose_message(fid: int, R, T) -> str:
    R = np.asarray(R, dtype=np.float64).reshape(-1)
    T = np.asarray(T, dtype=np.float64).reshape(-1)
    if R.size != 9 or T.size != 3:
        raise FormatError("pose message needs 9 rotation and 3 translation numbers")
    msg = {"type": "pose", "fid": int(fid), "R": [float(x) for x in R],
           "T": [float(x) for x in T]}
    return json.dumps(msg, separators=(",", ":"))


def encode_config_message(k_blend: int, variant: str) -> str:
    msg = {"type": "config", "k_blend": int(k_blend), "variant": str(variant)}
    return json.dumps(msg, separators=(",", ":"))


def encode_error_message(code: int, msg: str) -> str:
    return json.dumps({"type": "error", "code": int(code), "msg": str(msg)},
                      separators=(",", ":"))


def encode_stats_message(fid: int, render_ms: float) -> str:
    return json.dumps({"type": "stats", "fid": int(fid),
                       "render_ms": float(render_ms)}, separators=(",", ":"))


def _protocol_error(msg: str, code: int) -> FormatError:
    err = FormatError(msg)
    err.code = code
    return err


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise _protocol_error(msg, ERR_BAD_FIELD)


def _finite_floats(value, n: int, name: str) -> np.ndarray:
    _require(isinstance(value, list) and len(value) == n,
             f"field {name} must be a list of {n} numbers")
    out = np.empty(n, dtype=np.float64)
    for i, x in enumerate(value):
        _require(isinstance(x, (int, float)) and not isinstance(x, bool),
                 f"field {name}[{i}] must be a number")
        out[i] = float(x)
    _require(bool(np.isfinite(out).all()), f"field {name} must be finite")
    return out


def parse_client_message(text: str) -> dict:
    """Validate one client text message; raises FormatError on any defect."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise _protocol_error(f"malformed JSON: {exc.msg}", ERR_BAD_JSON) from exc
    _require(isinstance(raw, dict), "message must be a JSON object")
    mtype = raw.get("type")
    if mtype == "pose":
        fid = raw.get("fid")
        _require(isinstance(fid, int) and not isinstance(fid, bool)
                 and 0 <= fid <= _U64_MAX, "field fid must be a u64")
        R = _finite_floats(raw.get("R"), 9, "R").reshape(3, 3)
        T = _finite_floats(raw.get("T"), 3, "T")
        _require(rotation_residual(R) <= _ROTATION_TOL, "rotation not orthonormal")
        return {"type": "pose", "fid": fid, "R": R, "T": T}
    if mtype == "config":
        out: dict = {"type": "config"}
        if "k_blend" in raw:
            k = raw["k_blend"]
            _require(isinstance(k, int) and not isinstance(k, bool) and 1 <= k <= 2 ** 32 - 1,
                     "field k_blend must be a positive u32")
            out["k_blend"] = k
        if "variant" in raw:
            _require(isinstance(raw["variant"], str), "field variant must be a string")
            out["variant"] = raw["variant"]
        _require(len(out) > 1, "config message must set k_blend or variant")
        return out
    raise _protocol_error(f"unknown message type: {mtype!r}", ERR_BAD_FIELD)


def pack_frame(fid: int, flags: int, payload: bytes) -> bytes:
    if not 0 <= int(fid) <= _U64_MAX:
        raise FormatError("frame id out of u64 range")
    return FRAME_MAGIC + struct.pack("<QI", int(fid), int(flags)) + payload


def unpack_frame(data: bytes) -> tuple[int, int, bytes]:
    if len(data) < FRAME_HEADER_BYTES or data[:4] != FRAME_MAGIC:
        raise FormatError("not a frame message (bad magic or truncated header)")
    fid, flags = struct.unpack_from("<QI", data, 4)
    return fid, flags, data[FRAME_HEADER_BYTES:]


def encode_png(image: np.ndarray) -> bytes:
    """Encode a float image in [0,1] (H, W, 3) as PNG bytes."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(payload: bytes) -> np.ndarray:
    """Decode PNG bytes back to a float image in [0,1]."""
    try:
        with Image.open(io.BytesIO(payload)) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"bad frame payload: {exc}") from exc
