"""Exact nearest-neighbor KD-tree over 3D points.

Ties in distance resolve to the lowest point index, and pruning only
discards a subtree when the splitting plane is strictly farther than the
current best, so tied candidates on the far side are still found.
"""
from __future__ import annotations

import numpy as np

_LEAF_SIZE = 16


class _Node:
    __slots__ = ("axis", "split", "left", "right", "indices")

    def __init__(self, axis=-1, split=0.0, left=None, right=None, indices=None):
        self.axis = axis
        self.split = split
        self.left = left
        self.right = right
        self.indices = indices


class KDTree:
    def __init__(self, points):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("cannot build a KD-tree over an empty cloud")
        self.root = self._build(np.arange(len(self.points), dtype=np.intp))

    def _build(self, idx: np.ndarray) -> _Node:
        pts = self.points[idx]
        if len(idx) <= _LEAF_SIZE or np.ptp(pts, axis=0).max() == 0.0:
            return _Node(indices=np.sort(idx))
        axis = int(np.argmax(np.ptp(pts, axis=0)))
        coords = pts[:, axis]
        split = float(np.median(coords))
        mask = coords <= split
        # median can swallow a whole side when values repeat; fall back to a leaf
        if mask.all() or not mask.any():
            return _Node(indices=np.sort(idx))
        return _Node(axis=axis, split=split,
                     left=self._build(idx[mask]), right=self._build(idx[~mask]))

    def query_one(self, point) -> tuple[int, float]:
        """Nearest index and squared distance for one query point."""
        q = np.asarray(point, dtype=np.float64)
        best_idx = -1
        best_d2 = np.inf
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.indices is not None:
                cand = node.indices
                d2 = ((self.points[cand] - q) ** 2).sum(axis=1)
                order = np.lexsort((cand, d2))
                i = order[0]
                if d2[i] < best_d2 or (d2[i] == best_d2 and cand[i] < best_idx):
                    best_d2 = float(d2[i])
                    best_idx = int(cand[i])
                continue
            delta = q[node.axis] - node.split
            near, far = (node.right, node.left) if delta > 0 else (node.left, node.right)
            if delta * delta <= best_d2:  # keep equality: tied points may sit beyond the plane
                stack.append(far)
            stack.append(near)
        return best_idx, best_d2

    def query(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Nearest indices and (non-squared) distances for many queries."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        indices = np.empty(len(pts), dtype=np.intp)
        d2 = np.empty(len(pts))
        for i, p in enumerate(pts):
            indices[i], d2[i] = self.query_one(p)
        return indices, np.sqrt(d2)
