"""NAdam optimizer, step LR schedule and the training loop."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .csidata import as_points
from .loss import LossConfig, chamfer, total_loss
from .model import ModelConfig, PointCloudModel, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last good checkpoint path (if any)."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    epochs: int = 50
    lr_step: int = 10  # epochs between decays
    gamma: float = 0.5
    batch_size: int = 16
    lam: float = 0.001
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum_decay: float = 0.004  # NAdam schedule decay (psi)
    grad_clip: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule: lr0 * gamma^floor(epoch / step)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr0 * config.gamma ** (epoch // config.lr_step)


class NAdam:
    """Nesterov-accelerated Adam with the standard momentum schedule.

    mu_t = beta1 * (1 - 0.5 * 0.96^(t * psi)); the first-moment estimate is
    bias-corrected with the running product of mu, the lookahead term with
    the product extended by mu_{t+1}.
    """

    def __init__(self, params: dict[str, Tensor], config: TrainConfig):
        self.params = params
        self.cfg = config
        self.step_count = 0
        self.mu_product = 1.0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> bool:
        """Apply one update from accumulated grads; returns False if skipped."""
        if lr <= 0:
            raise ValueError("lr must be > 0")
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                log.warning("non-finite gradient for %s: step skipped", name)
                return False
            grads[name] = g
        if self.cfg.grad_clip > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.cfg.grad_clip:
                scale = self.cfg.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        b1, b2, eps, psi = self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.momentum_decay
        t = self.step_count + 1
        mu_t = b1 * (1.0 - 0.5 * 0.96 ** (t * psi))
        mu_next = b1 * (1.0 - 0.5 * 0.96 ** ((t + 1) * psi))
        mu_prod_t = self.mu_product * mu_t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = (mu_next * m) / (1 - mu_prod_t * mu_next) + ((1 - mu_t) * g) / (1 - mu_prod_t)
            v_hat = v / (1 - b2**t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        self.step_count = t
        self.mu_product = mu_prod_t
        return True

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step_count: int, mu_product: float):
        self.step_count = step_count
        self.mu_product = mu_product
        for name in self.params:
            self.m[name] = tensors[f"opt.m.{name}"].copy()
            self.v[name] = tensors[f"opt.v.{name}"].copy()


# -- checkpointing -----------------------------------------------------------------


def save_train_checkpoint(path, model: PointCloudModel, opt: NAdam, train_cfg: TrainConfig,
                          epoch: int, best_val: float) -> None:
    tensors = dict(model.params)
    tensors.update(opt.state_tensors())
    extra = {
        "train_config": asdict(train_cfg),
        "epoch": epoch,
        "step_count": opt.step_count,
        "mu_product": opt.mu_product,
        "best_val": best_val,
    }
    save_checkpoint(path, model.cfg, tensors, extra=extra)


def load_train_checkpoint(path, expect_cfg: ModelConfig | None = None):
    """Returns (model, optimizer, train config, next epoch, best val chamfer)."""
    cfg, tensors, extra = load_checkpoint(path, expect_cfg)
    if "train_config" not in extra:
        raise ValueError("checkpoint does not contain training state")
    params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()
              if not k.startswith("opt.")}
    model = PointCloudModel(cfg, params=params)
    train_cfg = TrainConfig(**extra["train_config"])
    opt = NAdam(model.params, train_cfg)
    opt.load_state(tensors, extra["step_count"], extra["mu_product"])
    return model, opt, train_cfg, extra["epoch"], extra["best_val"]


# -- training loop -------------------------------------------------------------------


def _prepare(dataset) -> list[tuple]:
    """Normalize to (ModelInput, points ndarray) pairs."""
    from .csidata import preprocess

    out = []
    for sample, cloud in dataset:
        inp = sample if hasattr(sample, "features") else preprocess(sample)
        out.append((inp, as_points(cloud)))
    return out


def _validation_chamfer(model: PointCloudModel, val) -> float:
    with no_grad():
        values = [float(chamfer(model.forward(inp)[0], Tensor(gt)).data) for inp, gt in val]
    return float(np.mean(values))


def train_loop(train_set, val_set, config: TrainConfig, model_cfg: ModelConfig,
               out_dir, resume_from=None) -> tuple[Path, list[dict]]:
    """Train with per-epoch seeded shuffling, validation and best checkpointing.

    Returns (best checkpoint path, metrics records).  Also writes a last-state
    checkpoint per epoch and a JSON-lines metrics log to out_dir.
    """
    train = _prepare(train_set)
    val = _prepare(val_set)
    if not train:
        raise ValueError("empty training set")
    if not val:
        raise ValueError("empty validation set")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    best_path = out / "best.ckpt"
    last_path = out / "last.ckpt"
    metrics_path = out / "metrics.jsonl"

    if resume_from is not None:
        # the caller's config governs the schedule; the checkpoint restores
        # model weights, optimizer state and the epoch counter
        model, opt, _saved_cfg, start_epoch, best_val = load_train_checkpoint(
            resume_from, model_cfg)
        log_mode = "a"
    else:
        model = PointCloudModel(model_cfg, seed=config.seed)
        opt = NAdam(model.params, config)
        start_epoch, best_val = 0, np.inf
        log_mode = "w"

    loss_cfg = LossConfig(lam=config.lam)
    records: list[dict] = []
    last_good = resume_from
    with open(metrics_path, log_mode) as metrics_fh:
        for epoch in range(start_epoch, config.epochs):
            t0 = time.perf_counter()
            lr = lr_at(epoch, config)
            order = np.random.default_rng([config.seed, epoch]).permutation(len(train))
            epoch_losses, epoch_chamfers = [], []
            for start in range(0, len(order), config.batch_size):
                batch = [train[i] for i in order[start : start + config.batch_size]]
                model.zero_grad()
                try:
                    losses = []
                    chamfers = []
                    for inp, gt in batch:
                        pred, tf = model.forward(inp)
                        cd = chamfer(pred, Tensor(gt))
                        losses.append(total_loss(pred, Tensor(gt), tf, loss_cfg))
                        chamfers.append(float(cd.data))
                    batch_loss = losses[0]
                    for extra_term in losses[1:]:
                        batch_loss = batch_loss + extra_term
                    batch_loss = batch_loss / len(losses)
                    loss_val = float(batch_loss.data)
                    if not np.isfinite(loss_val):
                        raise NonFiniteError("non-finite loss")
                    batch_loss.backward()
                except NonFiniteError as exc:
                    raise TrainingDiverged(
                        f"divergence at epoch {epoch}: {exc}", checkpoint=last_good) from exc
                opt.step(lr)
                epoch_losses.append(loss_val)
                epoch_chamfers.extend(chamfers)
            val_chamfer = _validation_chamfer(model, val)
            if not np.isfinite(val_chamfer):
                raise TrainingDiverged(
                    f"non-finite validation chamfer at epoch {epoch}", checkpoint=last_good)
            record = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(epoch_losses)),
                "train_chamfer": float(np.mean(epoch_chamfers)),
                "val_chamfer": val_chamfer,
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }
            records.append(record)
            metrics_fh.write(json.dumps(record) + "\n")
            metrics_fh.flush()
            save_train_checkpoint(last_path, model, opt, config, epoch + 1, best_val)
            last_good = last_path
            if val_chamfer < best_val:
                best_val = val_chamfer
                save_train_checkpoint(best_path, model, opt, config, epoch + 1, best_val)
            log.info("epoch %d lr %.3g train %.4f val %.4f",
                     epoch, lr, record["train_loss"], val_chamfer)
    if not best_path.exists():
        save_train_checkpoint(best_path, model, opt, config, config.epochs, best_val)
    return best_path, records
