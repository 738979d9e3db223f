"""Synthetic scenes and multipath CSI so the pipeline is verifiable offline.

A scene is a rectangular room with one ellipsoidal person, a transmitter
and a small receiver array.  The channel per antenna/subcarrier sums a
line-of-sight path, one person-scatter path, and the six first-order wall
image reflections, each attenuated by inverse squared path length:

    H(a, s) = sum_k (1 / L_k^2) * exp(-2j*pi * f_s * L_k / c)

The person drifts a few centimeters across the T time slices to give the
temporal encoder something to pick up.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .csidata import CsiSample, PointCloud, resample_cloud, save_csi_container, write_ply

SPEED_OF_LIGHT = 299_792_458.0


class SceneConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    room: tuple = (8.5, 7.8, 3.0)  # width (x), depth (y), height (z), meters
    person_axes: tuple = (0.25, 0.25, 0.9)  # ellipsoid semi-axes
    person_region: tuple = ((1.5, 1.5), (7.0, 6.3))  # (x,y) box for the center
    tx: tuple = (0.4, 3.9, 1.0)
    rx_center: tuple = (8.1, 3.9, 1.0)
    rx_spacing: float = 0.05  # antenna spacing along y
    n_antennas: int = 3
    n_room_points: int = 900
    n_person_points: int = 400
    max_drift: float = 0.1  # person motion across the window, meters

    def validate(self):
        w, d, h = self.room
        (x0, y0), (x1, y1) = self.person_region
        ax, ay, az = self.person_axes
        if not (ax < x0 and x1 + ax < w and ay < y0 and y1 + ay < d and 2 * az < h):
            raise SceneConfigError("person region (plus semi-axes) must fit inside the room")
        for pos in (self.tx, self.rx_center):
            if not all(0 < pos[i] < self.room[i] for i in range(3)):
                raise SceneConfigError(f"TX/RX position {pos} outside the room")


@dataclass
class RfConfig:
    center_freq: float = 5e9
    bandwidth: float = 40e6
    n_subcarriers: int = 114
    noise_std: float = 1e-4  # complex-gaussian std added to H

    @property
    def delta_f(self) -> float:
        return self.bandwidth / self.n_subcarriers

    def subcarrier_freqs(self) -> np.ndarray:
        s = np.arange(self.n_subcarriers)
        return self.center_freq + (s - self.n_subcarriers / 2) * self.delta_f


@dataclass
class Scene:
    config: SceneConfig
    person_center: np.ndarray
    drift: np.ndarray  # total person displacement over the window
    rx: np.ndarray  # [n_antennas, 3]

    @property
    def tx(self) -> np.ndarray:
        return np.asarray(self.config.tx)


def generate_scene(seed: int, config: SceneConfig | None = None) -> tuple[Scene, PointCloud]:
    """Sample a person position plus room/person surface points (>= 1200)."""
    cfg = config or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    w, d, h = cfg.room
    (x0, y0), (x1, y1) = cfg.person_region
    az = cfg.person_axes[2]
    center = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1), az])

    direction = rng.normal(size=3)
    direction[2] = 0.0
    direction /= np.linalg.norm(direction[:2])
    drift = direction * rng.uniform(0.0, cfg.max_drift)

    # floor plus the four walls, area-weighted
    areas = np.array([w * d, w * h, w * h, d * h, d * h], dtype=np.float64)
    counts = np.maximum(1, (areas / areas.sum() * cfg.n_room_points).astype(int))
    surfaces = []
    u = rng.uniform(size=(counts[0], 2))
    surfaces.append(np.column_stack([u[:, 0] * w, u[:, 1] * d, np.zeros(counts[0])]))
    for i, y in zip((1, 2), (0.0, d)):
        u = rng.uniform(size=(counts[i], 2))
        surfaces.append(np.column_stack([u[:, 0] * w, np.full(counts[i], y), u[:, 1] * h]))
    for i, x in zip((3, 4), (0.0, w)):
        u = rng.uniform(size=(counts[i], 2))
        surfaces.append(np.column_stack([np.full(counts[i], x), u[:, 0] * d, u[:, 1] * h]))

    # person: uniform directions scaled onto the ellipsoid surface
    dirs = rng.normal(size=(cfg.n_person_points, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    person = center + dirs * np.asarray(cfg.person_axes)

    cloud = PointCloud(np.vstack(surfaces + [person]))
    rx_center = np.asarray(cfg.rx_center)
    offsets = (np.arange(cfg.n_antennas) - (cfg.n_antennas - 1) / 2) * cfg.rx_spacing
    rx = rx_center + np.column_stack([np.zeros_like(offsets), offsets, np.zeros_like(offsets)])
    return Scene(cfg, center, drift, rx), cloud


def path_lengths(scene: Scene, person_center: np.ndarray) -> np.ndarray:
    """Per-antenna multipath lengths: [n_antennas, 8] (LOS, person, 6 walls)."""
    tx = scene.tx
    w, d, h = scene.config.room
    lengths = np.empty((len(scene.rx), 8))
    # TX images over the six planes x=0, x=w, y=0, y=d, z=0, z=h
    images = np.tile(tx, (6, 1))
    for j, (axis, bound) in enumerate(((0, 0.0), (0, w), (1, 0.0), (1, d), (2, 0.0), (2, h))):
        images[j, axis] = 2 * bound - tx[axis]
    for a, rx in enumerate(scene.rx):
        lengths[a, 0] = np.linalg.norm(tx - rx)
        lengths[a, 1] = np.linalg.norm(tx - person_center) + np.linalg.norm(person_center - rx)
        lengths[a, 2:] = np.linalg.norm(images - rx, axis=1)
    if np.any(lengths <= 0):
        raise SceneConfigError("zero-length propagation path (TX coincides with RX?)")
    return lengths


def channel_response(lengths: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """Sum the paths: H[a, s] from per-antenna path lengths and frequencies."""
    tau = lengths / SPEED_OF_LIGHT  # [A, K]
    gains = 1.0 / lengths**2
    phase = -2j * np.pi * freqs[None, :, None] * tau[:, None, :]  # [A, S, K]
    return (gains[:, None, :] * np.exp(phase)).sum(axis=2)


def simulate_csi(scene: Scene, rf: RfConfig | None = None, t_slices: int = 10,
                 noise_seed: int = 0) -> CsiSample:
    """Forward-model CSI for the scene: [A, S, t_slices] amplitude + phase."""
    rf = rf or RfConfig()
    freqs = rf.subcarrier_freqs()
    A = len(scene.rx)
    H = np.empty((A, rf.n_subcarriers, t_slices), dtype=np.complex128)
    for t in range(t_slices):
        frac = t / max(1, t_slices - 1)
        center = scene.person_center + frac * scene.drift
        H[:, :, t] = channel_response(path_lengths(scene, center), freqs)
    if rf.noise_std > 0:
        rng = np.random.default_rng(noise_seed)
        H = H + rf.noise_std * (rng.normal(size=H.shape) + 1j * rng.normal(size=H.shape))
    phase = np.angle(H)
    phase[phase <= -np.pi] += 2 * np.pi  # keep the half-open (-pi, pi] convention
    return CsiSample(amplitude=np.abs(H), phase=phase)


def make_dataset(n: int, seed: int, out_dir, config: SceneConfig | None = None,
                 rf: RfConfig | None = None, t_slices: int = 10, n_points: int = 1200) -> dict:
    """Write n (container, PLY) pairs plus a JSON manifest; reproducible per seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = config or SceneConfig()
    rf = rf or RfConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for i in range(n):
        sample_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        scene, cloud = generate_scene(sample_seed, cfg)
        csi = simulate_csi(scene, rf, t_slices, noise_seed=sample_seed)
        csi.meta = {
            "subject": f"synth-{i:04d}",
            "environment": "synthetic",
            "action": "drift",
            "frame": i,
            "seed": sample_seed,
        }
        csi_path = out / f"sample_{i:04d}.csi"
        ply_path = out / f"sample_{i:04d}.ply"
        save_csi_container(csi, csi_path)
        write_ply(resample_cloud(cloud, n_points, seed=sample_seed), ply_path)
        samples.append({
            "csi": csi_path.name,
            "ply": ply_path.name,
            "seed": sample_seed,
            "person_center": [float(v) for v in scene.person_center],
        })
    manifest = {
        "root_seed": seed,
        "n": n,
        "n_points": n_points,
        "t_slices": t_slices,
        "scene_config": asdict(cfg),
        "rf_config": asdict(rf),
        "samples": samples,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_dataset(data_dir):
    """Load (CsiSample, PointCloud) pairs listed in a dataset manifest."""
    from .csidata import load_csi_container, read_cloud

    root = Path(data_dir)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    pairs = []
    for entry in manifest["samples"]:
        pairs.append((load_csi_container(root / entry["csi"]), read_cloud(root / entry["ply"])))
    return pairs, manifest
