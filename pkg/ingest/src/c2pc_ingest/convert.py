"""Convert MM-Fi WiFi-CSI .mat frames and LiDAR clouds to container/PLY files."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import loadmat

from .formats import write_container, write_ply

WINDOW = 10  # time slices per sample, matching the pipeline's input window
N_ANTENNAS = 3
N_SUBCARRIERS = 114


class ConversionError(ValueError):
    pass


def _load_csi_array(mat_path) -> np.ndarray:
    """Extract a complex [3, 114, T] CSI array from an MM-Fi style .mat file."""
    try:
        mat = loadmat(mat_path)
    except (OSError, ValueError, NotImplementedError) as exc:
        raise ConversionError(f"{mat_path}: unreadable .mat file ({exc})") from exc
    payload = {k: v for k, v in mat.items() if not k.startswith("__")}
    if "CSI" in payload:
        h = np.asarray(payload["CSI"])
    elif "CSIamp" in payload and "CSIphase" in payload:
        amp = np.asarray(payload["CSIamp"], dtype=np.float64)
        ph = np.asarray(payload["CSIphase"], dtype=np.float64)
        if amp.shape != ph.shape:
            raise ConversionError(
                f"{mat_path}: CSIamp {amp.shape} and CSIphase {ph.shape} disagree")
        h = amp * np.exp(1j * ph)
    else:
        raise ConversionError(
            f"{mat_path}: no CSI variable (expected 'CSI' or 'CSIamp'+'CSIphase', "
            f"found {sorted(payload) or 'nothing'})")
    h = np.squeeze(h)  # MM-Fi stores 3 x 1 x 114 per slice
    if h.ndim == 2:
        h = h[:, :, None]
    if h.ndim != 3 or h.shape[0] != N_ANTENNAS or h.shape[1] != N_SUBCARRIERS:
        raise ConversionError(
            f"{mat_path}: unexpected CSI shape {h.shape}, "
            f"expected [{N_ANTENNAS}, {N_SUBCARRIERS}, T]")
    return h.astype(np.complex128)


def convert_csi(mat_path, out_container, stride: int, meta: dict | None = None) -> list[Path]:
    """Window a .mat CSI recording into 10-slice container files.

    Consecutive windows start `stride` slices apart.  With exactly one
    window the container is written at out_container; with several, a
    _wNNN suffix is inserted before the extension.  Returns written paths.
    """
    if stride < 1:
        raise ConversionError(f"stride must be >= 1, got {stride}")
    h = _load_csi_array(mat_path)
    n_slices = h.shape[2]
    if n_slices < WINDOW:
        raise ConversionError(
            f"{mat_path}: only {n_slices} time slices, need at least {WINDOW}")
    starts = range(0, n_slices - WINDOW + 1, stride)
    out = Path(out_container)
    written = []
    base_meta = dict(meta or {})
    base_meta.setdefault("source", Path(mat_path).name)
    for w, start in enumerate(starts):
        window = h[:, :, start : start + WINDOW]
        amplitude = np.abs(window)
        phase = np.angle(window)
        phase[phase <= -np.pi] += 2 * np.pi  # (-pi, pi] convention
        if len(starts) == 1:
            path = out
        else:
            path = out.with_name(f"{out.stem}_w{w:03d}{out.suffix}")
        write_container(amplitude, phase, {**base_meta, "window_start": start}, path)
        written.append(path)
    return written


def _load_points(frame_path) -> np.ndarray:
    path = Path(frame_path)
    if path.suffix == ".npy":
        pts = np.load(path)
    elif path.suffix == ".bin":
        pts = np.fromfile(path, dtype=np.float64)
    else:
        pts = np.loadtxt(path, ndmin=2)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.size == 0:
        raise ConversionError(f"{frame_path}: empty LiDAR frame")
    if pts.size % 3 != 0:
        raise ConversionError(f"{frame_path}: {pts.size} values is not a multiple of 3")
    pts = pts.reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ConversionError(f"{frame_path}: non-finite coordinates")
    return pts


def convert_lidar(frame_path, out_ply, n: int = 1200, seed: int = 0) -> Path:
    """Resample a LiDAR frame to exactly n points and write ASCII PLY.

    Same resampling rule as the pipeline: without replacement when the
    frame has at least n points, with replacement otherwise.
    """
    pts = _load_points(frame_path)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pts), size=n, replace=len(pts) < n)
    out = Path(out_ply)
    write_ply(pts[idx], out)
    return out


def convert_tree(root, out_dir, stride: int, n_points: int = 1200, seed: int = 0) -> int:
    """Convert every E*/S*/A* recording under an MM-Fi root; returns file count.

    Expects wifi-csi/*.mat and lidar/* frame files per action directory and
    mirrors the E/S/A structure under out_dir.
    """
    root = Path(root)
    out_root = Path(out_dir)
    if not root.is_dir():
        raise ConversionError(f"{root}: not a directory")
    n_written = 0
    for action_dir in sorted(root.glob("E*/S*/A*")):
        env, subject, action = action_dir.parts[-3:]
        dest = out_root / env / subject / action
        dest.mkdir(parents=True, exist_ok=True)
        meta = {"environment": env, "subject": subject, "action": action}
        for mat in sorted((action_dir / "wifi-csi").glob("*.mat")):
            written = convert_csi(mat, dest / (mat.stem + ".csi"), stride,
                                  meta={**meta, "frame": mat.stem})
            n_written += len(written)
        lidar_dir = action_dir / "lidar"
        if lidar_dir.is_dir():
            for frame in sorted(p for p in lidar_dir.iterdir() if p.is_file()):
                convert_lidar(frame, dest / (frame.stem + ".ply"), n=n_points, seed=seed)
                n_written += 1
    if n_written == 0:
        raise ConversionError(f"{root}: no E*/S*/A*/wifi-csi recordings found")
    return n_written
