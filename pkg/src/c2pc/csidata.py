"""CSI sample containers, preprocessing and point-cloud I/O.

On-disk container format ("CSI1", little-endian):
  magic "CSI1" | u32 version=1 | u32 A | u32 S | u32 T
  | A*S*T float32 amplitudes (antenna-major, then subcarrier, then time)
  | A*S*T float32 wrapped phases
  | u32 metadata length | UTF-8 JSON metadata blob

Point clouds are ASCII PLY (float x,y,z); plain XYZ triples are also
accepted on read.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"CSI1"
CONTAINER_VERSION = 1
_MAX_DIM = 65536
_MAX_ELEMS = 16 * 2048 * 256


class CsiFormatError(ValueError):
    """Malformed container; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class PlyParseError(ValueError):
    pass


@dataclass
class CsiSample:
    """One input window: linear amplitude and wrapped phase over [A, S, T]."""

    amplitude: np.ndarray  # [A, S, T] float32, >= 0
    phase: np.ndarray  # [A, S, T] float32, wrapped to (-pi, pi]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.amplitude = np.asarray(self.amplitude, dtype=np.float32)
        self.phase = np.asarray(self.phase, dtype=np.float32)
        if self.amplitude.ndim != 3 or self.amplitude.shape != self.phase.shape:
            raise ValueError("amplitude and phase must both have shape [A, S, T]")
        if min(self.amplitude.shape) < 1:
            raise ValueError("A, S, T must all be >= 1")
        if not (np.all(np.isfinite(self.amplitude)) and np.all(np.isfinite(self.phase))):
            raise ValueError("CSI values must be finite")
        if np.any(self.amplitude < 0):
            raise ValueError("amplitude must be non-negative")

    @property
    def shape(self):
        return self.amplitude.shape


@dataclass
class PointCloud:
    """N x 3 points in meters, room/sensor frame."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("point cloud must be non-empty")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self):
        return len(self.points)


def as_points(cloud) -> np.ndarray:
    """Coerce a PointCloud or array-like to a float64 [N,3] array."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


@dataclass
class ModelInput:
    """Flattened antenna-subcarrier tokens: features [F, 2, T], F = A*S."""

    features: np.ndarray
    antenna_index: np.ndarray
    subcarrier_index: np.ndarray
    meta: dict = field(default_factory=dict)


# -- container I/O -------------------------------------------------------------


def save_csi_container(sample: CsiSample, path) -> None:
    A, S, T = sample.shape
    meta_blob = json.dumps(sample.meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", CONTAINER_VERSION, A, S, T))
        fh.write(np.ascontiguousarray(sample.amplitude, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(sample.phase, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)


def load_csi_container(path) -> CsiSample:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CsiFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    if len(buf) < 20:
        raise CsiFormatError("truncated header", len(buf))
    version, A, S, T = struct.unpack_from("<IIII", buf, 4)
    if version != CONTAINER_VERSION:
        raise CsiFormatError(f"unsupported container version {version}", 4)
    if max(A, S, T) > _MAX_DIM or A * S * T > _MAX_ELEMS or min(A, S, T) < 1:
        raise CsiFormatError(f"shape ({A}, {S}, {T}) out of range", 8)
    n = A * S * T
    off = 20
    need = off + 8 * n + 4
    if len(buf) < need:
        raise CsiFormatError(f"truncated payload: have {len(buf)} bytes, need >= {need}", len(buf))
    amp = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(A, S, T)
    off += 4 * n
    phase = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(A, S, T)
    off += 4 * n
    (meta_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) < off + meta_len:
        raise CsiFormatError("truncated metadata blob", len(buf))
    meta = json.loads(buf[off : off + meta_len].decode("utf-8")) if meta_len else {}
    return CsiSample(amplitude=amp.copy(), phase=phase.copy(), meta=meta)


# -- preprocessing --------------------------------------------------------------


def unwrap_phase(phase: np.ndarray) -> np.ndarray:
    """Unwrap along the subcarrier axis, per antenna per time slice."""
    return np.unwrap(np.asarray(phase, dtype=np.float64), axis=1)


def _standardize(x: np.ndarray) -> np.ndarray:
    var = x.var()
    if var < 1e-8:
        warnings.warn("near-constant channel: variance floored at 1e-8", RuntimeWarning)
        var = 1e-8
    return (x - x.mean()) / np.sqrt(var)


def preprocess(sample: CsiSample) -> ModelInput:
    """Unwrap phase, standardize each channel per sample, flatten to [F, 2, T]."""
    A, S, T = sample.shape
    amp = _standardize(np.asarray(sample.amplitude, dtype=np.float64))
    phase = _standardize(unwrap_phase(sample.phase))
    F = A * S
    features = np.empty((F, 2, T), dtype=np.float64)
    features[:, 0, :] = amp.reshape(F, T)
    features[:, 1, :] = phase.reshape(F, T)
    idx = np.arange(F)
    return ModelInput(
        features=features,
        antenna_index=idx // S,
        subcarrier_index=idx % S,
        meta=dict(sample.meta),
    )


def resample_cloud(cloud, n: int, seed: int) -> PointCloud:
    """Resample to exactly n points; without replacement when possible."""
    pts = as_points(cloud)
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    replace = len(pts) < n
    idx = rng.choice(len(pts), size=n, replace=replace)
    return PointCloud(pts[idx])


# -- point cloud I/O -------------------------------------------------------------


def _fmt(v: float) -> str:
    return np.format_float_positional(np.float32(v), trim="-")


def write_ply(cloud, path) -> None:
    pts = as_points(cloud)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("end_header\n")
        for x, y, z in pts:
            fh.write(f"{_fmt(x)} {_fmt(y)} {_fmt(z)}\n")


def read_ply(path) -> PointCloud:
    with open(path, "r", encoding="ascii") as fh:
        first = fh.readline()
        if first.strip() != "ply":
            raise PlyParseError("not a PLY file (missing 'ply' magic line)")
        n_vertex = None
        current_element = None
        for line in fh:
            tokens = line.split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                if tokens[1] != "ascii":
                    raise PlyParseError(f"unsupported PLY format '{tokens[1]}'")
            elif tokens[0] == "element":
                current_element = tokens[1]
                if tokens[1] == "vertex":
                    n_vertex = int(tokens[2])
                elif int(tokens[2]) > 0:
                    raise PlyParseError(f"unsupported PLY element '{tokens[1]}'")
            elif tokens[0] == "property":
                if current_element == "vertex" and tokens[-1] not in ("x", "y", "z"):
                    raise PlyParseError(f"unsupported vertex property '{tokens[-1]}'")
            elif tokens[0] == "end_header":
                break
            else:
                raise PlyParseError(f"unexpected header line '{line.strip()}'")
        else:
            raise PlyParseError("missing end_header")
        if n_vertex is None:
            raise PlyParseError("missing 'element vertex' declaration")
        rows = [fh.readline().split() for _ in range(n_vertex)]
    if any(len(r) != 3 for r in rows):
        raise PlyParseError("vertex line does not contain exactly x y z")
    # declared property type is 32-bit float; parse accordingly
    return PointCloud(np.array(rows, dtype=np.float32).astype(np.float64))


def read_cloud(path) -> PointCloud:
    """Read a point cloud from ASCII PLY or whitespace-separated XYZ triples."""
    with open(path, "r", encoding="ascii") as fh:
        first = fh.readline()
    if first.strip() == "ply":
        return read_ply(path)
    data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if data.size == 0:
        raise PlyParseError("empty point cloud file")
    return PointCloud(data)
