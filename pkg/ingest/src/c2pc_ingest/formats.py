"""Writers for the pipeline's portable on-disk formats.

Implemented from the format definitions, not by importing the pipeline:
the two components share only these byte layouts.

Container ("CSI1", little-endian):
  magic "CSI1" | u32 version=1 | u32 A | u32 S | u32 T
  | A*S*T float32 amplitudes (antenna-major, then subcarrier, then time)
  | A*S*T float32 wrapped phases
  | u32 metadata length | UTF-8 JSON metadata blob

Point clouds: ASCII PLY with float x, y, z properties.
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"CSI1"
CONTAINER_VERSION = 1


def write_container(amplitude: np.ndarray, phase: np.ndarray, meta: dict, path) -> None:
    amplitude = np.asarray(amplitude, dtype="<f4")
    phase = np.asarray(phase, dtype="<f4")
    if amplitude.ndim != 3 or amplitude.shape != phase.shape:
        raise ValueError("amplitude and phase must both have shape [A, S, T]")
    A, S, T = amplitude.shape
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", CONTAINER_VERSION, A, S, T))
        fh.write(np.ascontiguousarray(amplitude).tobytes())
        fh.write(np.ascontiguousarray(phase).tobytes())
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)


def _fmt(v: float) -> str:
    # shortest decimal string that round-trips through float32
    return np.format_float_positional(np.float32(v), trim="-")


def write_ply(points: np.ndarray, path) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("point cloud must be non-empty")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("end_header\n")
        for x, y, z in pts:
            fh.write(f"{_fmt(x)} {_fmt(y)} {_fmt(z)}\n")
