"""Training objective: Chamfer distance plus an orthogonality regularizer.

Chamfer uses squared Euclidean distances and reduces as the sum of the two
per-direction means, so its scale does not depend on cloud sizes.  The
regularizer penalizes (1/K^2) * ||T T^t - I||_F^2 on the learned feature
transform.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .csidata import as_points
from .tensor import ShapeError, Tensor

# brute-force pairwise distances below this size; KD-tree above
_BRUTE_FORCE_LIMIT = 2048


@dataclass
class LossConfig:
    lam: float = 0.001  # regularizer weight

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


def _nearest(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Index into q of each p's nearest neighbor; ties -> lowest index."""
    if max(len(p), len(q)) <= _BRUTE_FORCE_LIMIT:
        d2 = ((p[:, None, :] - q[None, :, :]) ** 2).sum(axis=2)
        return d2.argmin(axis=1)
    from .kdtree import KDTree

    return KDTree(q).query(p)[0]


def chamfer(pred, target) -> Tensor:
    """Bidirectional mean nearest-neighbor squared distance.

    Differentiable w.r.t. either side when passed as a Tensor; gradients
    route through the argmin correspondences (subgradient at ties).
    """
    p_t = pred if isinstance(pred, Tensor) else Tensor(as_points(pred))
    q_t = target if isinstance(target, Tensor) else Tensor(as_points(target))
    p, q = p_t.data, q_t.data
    if p.ndim != 2 or q.ndim != 2 or p.shape[1] != 3 or q.shape[1] != 3:
        raise ShapeError("chamfer expects [N,3] clouds")
    if len(p) == 0 or len(q) == 0:
        raise ValueError("chamfer: empty point cloud")
    nn_pq = _nearest(p, q)
    nn_qp = _nearest(q, p)
    diff_pq = p - q[nn_pq]
    diff_qp = q - p[nn_qp]
    value = (diff_pq**2).sum() / len(p) + (diff_qp**2).sum() / len(q)

    def backward(g):
        g = float(g)
        if p_t.requires_grad:
            gp = (2.0 * g / len(p)) * diff_pq
            back = np.zeros_like(p)
            np.add.at(back, nn_qp, (-2.0 * g / len(q)) * diff_qp)
            p_t._accum(gp + back)
        if q_t.requires_grad:
            gq = (2.0 * g / len(q)) * diff_qp
            back = np.zeros_like(q)
            np.add.at(back, nn_pq, (-2.0 * g / len(p)) * diff_pq)
            q_t._accum(gq + back)

    return Tensor._from_op(np.asarray(value), (p_t, q_t), backward)


def feature_transform_reg(tf: Tensor) -> Tensor:
    """(1/K^2) * ||T T^t - I||_F^2 for a square feature transform."""
    t = tf if isinstance(tf, Tensor) else Tensor(np.asarray(tf, dtype=np.float64))
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ShapeError("feature transform must be square")
    k = t.shape[0]
    delta = t @ t.transpose() - Tensor(np.eye(k))
    return (delta * delta).sum() / (k * k)


def total_loss(pred, target, tf, config: LossConfig | None = None) -> Tensor:
    """chamfer + lambda * feature_transform_reg."""
    cfg = config or LossConfig()
    out = chamfer(pred, target)
    if cfg.lam != 0.0:
        out = out + cfg.lam * feature_transform_reg(tf)
    return out
