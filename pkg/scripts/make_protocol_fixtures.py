#!/usr/bin/env python3
"""Write the golden wire-format fixtures shared by the service and viewer tests.

Float fields use non-integral binary-exact doubles so every JSON serializer
that emits shortest round-trip numbers produces identical bytes.
"""
import json
import os

import numpy as np

from fwdsynth.protocol import (
    encode_config_message,
    encode_error_message,
    encode_pose_message,
    encode_stats_message,
    pack_frame,
)


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    K = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def main() -> None:
    out_dir = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                           "fixtures", "protocol")
    os.makedirs(out_dir, exist_ok=True)

    R = rotation_about([1.0, 2.0, 3.0], 0.7)
    T = np.array([0.125, -2.6875, 3.078125])
    cases = {
        "pose_message.txt": encode_pose_message(7, R.ravel(), T),
        "config_message.txt": encode_config_message(8, "fwd-u"),
        "error_message.txt": encode_error_message(2, "rotation not orthonormal"),
        "stats_message.txt": encode_stats_message(7, 12.25),
    }
    for name, text in cases.items():
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        print(f"wrote {path}: {text[:76]}{'...' if len(text) > 76 else ''}")

    payload = bytes(range(16))
    frame = pack_frame(123456789012345, 1, payload)
    frame_path = os.path.join(out_dir, "frame_sample.bin")
    with open(frame_path, "wb") as fh:
        fh.write(frame)
    print(f"wrote {frame_path}: {len(frame)} bytes")

    inputs = {
        "pose": {"fid": 7,
                 "R": [float(x) for x in R.ravel()],
                 "T": [float(x) for x in T]},
        "config": {"k_blend": 8, "variant": "fwd-u"},
        "error": {"code": 2, "msg": "rotation not orthonormal"},
        "stats": {"fid": 7, "render_ms": 12.25},
        "frame": {"fid": 123456789012345, "flags": 1,
                  "payload": list(payload)},
    }
    index_path = os.path.join(out_dir, "inputs.json")
    with open(index_path, "w", encoding="utf-8") as fh:
        json.dump(inputs, fh, indent=2)
        fh.write("\n")
    print(f"wrote {index_path}")


if __name__ == "__main__":
    main()
