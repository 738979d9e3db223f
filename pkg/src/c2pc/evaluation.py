"""ICP registration, alignment metrics and latency benchmarking.

Point-to-point ICP with an inlier distance threshold: correspondences come
from an exact KD-tree, the rigid fit is the SVD-based orthogonal Procrustes
solution with reflection correction, and iteration stops when the inlier
mean-squared error stops improving.
"""
from __future__ import annotations

import csv
import math
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .csidata import PointCloud, as_points, preprocess
from .kdtree import KDTree
from .tensor import no_grad


class DegenerateRegistrationError(RuntimeError):
    """Fewer than 3 inlier correspondences; carries the partial result."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass
class RegistrationResult:
    rotation: np.ndarray  # 3x3, orthonormal, det +1
    translation: np.ndarray  # 3-vector, meters
    fitness: float  # inlier fraction of the source cloud, in [0, 1]
    inlier_rmse: float  # meters
    iterations: int
    mse_history: list = field(default_factory=list)
    degenerate: bool = False

    def transform(self, points) -> np.ndarray:
        return as_points(points) @ self.rotation.T + self.translation


@dataclass
class MetricsReport:
    fitness: list
    rmse: list
    degenerate_flags: list
    threshold: float
    latency_ms: list = field(default_factory=list)

    @property
    def mean_fitness(self) -> float:
        # exact summation keeps the aggregate invariant to dataset order
        return math.fsum(self.fitness) / len(self.fitness)

    @property
    def mean_rmse(self) -> float:
        return math.fsum(self.rmse) / len(self.rmse)

    def to_dict(self) -> dict:
        return {
            "threshold_m": self.threshold,
            "mean_fitness": self.mean_fitness,
            "mean_rmse_m": self.mean_rmse,
            "n_samples": len(self.fitness),
            "n_degenerate": int(sum(self.degenerate_flags)),
            "per_sample": [
                {"index": i, "fitness": f, "rmse_m": r, "degenerate": bool(d)}
                for i, (f, r, d) in enumerate(zip(self.fitness, self.rmse, self.degenerate_flags))
            ],
            "latency_ms": self.latency_ms,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "fitness", "rmse_m", "degenerate"])
            for i, (f, r, d) in enumerate(zip(self.fitness, self.rmse, self.degenerate_flags)):
                writer.writerow([i, f, r, int(d)])


def nearest_neighbors(query, target) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest neighbor in target per query point (indices, distances)."""
    return KDTree(as_points(target)).query(as_points(query))


def rigid_fit(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid transform mapping source onto target (R, t).

    SVD-based orthogonal Procrustes; flips the smallest singular vector when
    the determinant comes out negative so the result is a proper rotation.
    """
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    cov = (target - mu_t).T @ (source - mu_s)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag([1.0, 1.0, d]) @ vt
    return rot, mu_t - rot @ mu_s


def icp_register(source, target, threshold: float = 0.05, max_iter: int = 50,
                 tol: float = 1e-8, center_first: bool = False) -> RegistrationResult:
    """Align source onto target; fitness = inlier fraction under threshold."""
    src = as_points(source)
    tgt = as_points(target)
    if len(src) < 3 or len(tgt) < 3:
        raise ValueError("registration needs at least 3 points per cloud")
    tree = KDTree(tgt)
    rot = np.eye(3)
    trans = np.zeros(3)
    if center_first:
        trans = tgt.mean(axis=0) - src.mean(axis=0)
    mse_history: list[float] = []
    prev_mse = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        moved = src @ rot.T + trans
        idx, dist = tree.query(moved)
        inliers = dist <= threshold
        n_in = int(inliers.sum())
        fitness = n_in / len(src)
        if n_in < 3:
            partial = RegistrationResult(rot, trans, fitness,
                                         float(np.sqrt((dist[inliers] ** 2).mean())) if n_in else np.inf,
                                         iterations, mse_history, degenerate=True)
            raise DegenerateRegistrationError(
                f"only {n_in} correspondences within {threshold} m", partial)
        mse = float((dist[inliers] ** 2).mean())
        mse_history.append(mse)
        if prev_mse - mse < tol:
            break
        prev_mse = mse
        step_rot, step_trans = rigid_fit(moved[inliers], tgt[idx[inliers]])
        rot = step_rot @ rot
        trans = step_rot @ trans + step_trans
    moved = src @ rot.T + trans
    idx, dist = tree.query(moved)
    inliers = dist <= threshold
    return RegistrationResult(
        rotation=rot,
        translation=trans,
        fitness=float(inliers.sum() / len(src)),
        inlier_rmse=float(np.sqrt((dist[inliers] ** 2).mean())),
        iterations=iterations,
        mse_history=mse_history,
    )


def evaluate(model, dataset, threshold: float = 0.05, max_iter: int = 50,
             predict_ground_truth: bool = False) -> MetricsReport:
    """Forward each sample, register prediction against ground truth, aggregate.

    dataset yields (CsiSample | ModelInput, PointCloud) pairs.  Degenerate
    registrations are recorded as fitness 0 with a flag rather than aborting.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("evaluate: empty dataset")
    fitness, rmse, flags = [], [], []
    for sample, gt in dataset:
        if predict_ground_truth:
            pred = PointCloud(as_points(gt).copy())
        else:
            inp = sample if hasattr(sample, "features") else preprocess(sample)
            pred = model.predict(inp)
        try:
            result = icp_register(pred, gt, threshold=threshold, max_iter=max_iter)
            fitness.append(result.fitness)
            rmse.append(result.inlier_rmse)
            flags.append(False)
        except DegenerateRegistrationError:
            fitness.append(0.0)
            rmse.append(float("inf"))
            flags.append(True)
    return MetricsReport(fitness, rmse, flags, threshold)


def bench_latency(model, n_warmup: int = 3, n_runs: int = 20, rng_seed: int = 0) -> dict:
    """Wall-clock stats (ms) for single-sample forward at the model's config."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    from .csidata import CsiSample

    cfg = model.cfg
    rng = np.random.default_rng(rng_seed)
    sample = CsiSample(
        amplitude=rng.uniform(0.1, 1.0, size=(cfg.A, cfg.S, cfg.T)),
        phase=rng.uniform(-np.pi, np.pi, size=(cfg.A, cfg.S, cfg.T)),
    )
    inp = preprocess(sample)
    times = []
    with no_grad():
        for _ in range(n_warmup):
            model.forward(inp)
        for _ in range(n_runs):
            start = time.perf_counter()
            model.forward(inp)
            times.append((time.perf_counter() - start) * 1000.0)
    arr = np.array(times)
    return {
        "n_runs": n_runs,
        "mean_ms": float(arr.mean()),
        "p50_ms": float(np.percentile(arr, 50)),
        "p95_ms": float(np.percentile(arr, 95)),
        "min_ms": float(arr.min()),
        "max_ms": float(arr.max()),
        "samples_ms": times,
    }
