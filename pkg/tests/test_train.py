import json

import numpy as np
import pytest

from c2pc.csidata import ModelInput
from c2pc.model import tiny_config
from c2pc.tensor import Tensor
from c2pc.train import (
    NAdam,
    TrainConfig,
    TrainingDiverged,
    load_train_checkpoint,
    lr_at,
    save_train_checkpoint,
    train_loop,
)

# hand evaluation of the published NAdam update for f(w) = w^2/2, w0 = 1,
# lr = 0.1, defaults beta1=0.9 beta2=0.999 eps=1e-8 psi=0.004:
#   mu_1   = 0.9 * (1 - 0.5 * 0.96**0.004)
#   mu_2   = 0.9 * (1 - 0.5 * 0.96**0.008)
#   m_1 = 0.1, v_1 = 0.001
#   m_hat = mu_2 * m_1 / (1 - mu_1 * mu_2) + (1 - mu_1) / (1 - mu_1)
#   v_hat = 1
#   w_1 = 1 - 0.1 * m_hat / (1 + 1e-8)
NADAM_GOLDEN_W1 = 0.894354823220913


def synthetic_dataset(cfg, n, seed):
    """Random (ModelInput, cloud) pairs small enough for fast epochs."""
    rng = np.random.default_rng(seed)
    idx = np.arange(cfg.F)
    pairs = []
    for _ in range(n):
        inp = ModelInput(rng.normal(size=(cfg.F, 2, cfg.T)), idx // cfg.S, idx % cfg.S)
        pairs.append((inp, rng.uniform(size=(cfg.N, 3))))
    return pairs


class TestSchedule:
    @pytest.mark.parametrize("epoch,expected", [(0, 1e-4), (10, 5e-5), (25, 2.5e-5)])
    def test_values(self, epoch, expected):
        assert lr_at(epoch, TrainConfig()) == pytest.approx(expected, rel=1e-12)

    def test_non_increasing_piecewise_constant(self):
        cfg = TrainConfig()
        values = [lr_at(e, cfg) for e in range(60)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        for e in range(59):
            changed = values[e + 1] != values[e]
            assert changed == ((e + 1) % cfg.lr_step == 0)

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            lr_at(-1, TrainConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr0=0.0)
        with pytest.raises(ValueError):
            TrainConfig(gamma=1.5)


class TestNAdam:
    def test_zero_gradient_leaves_params(self):
        w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = NAdam({"w": w}, TrainConfig())
        w.grad = np.zeros(2)
        before = w.data.copy()
        opt.step(lr=0.1)
        assert np.array_equal(w.data, before)
        assert opt.step_count == 1

    def test_moments_decay_on_zero_gradient(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        opt = NAdam({"w": w}, TrainConfig())
        opt.m["w"][:] = 1.0
        opt.v["w"][:] = 1.0
        w.grad = np.zeros(1)
        opt.step(lr=0.1)
        assert opt.m["w"][0] == pytest.approx(0.9)
        assert opt.v["w"][0] == pytest.approx(0.999)

    def test_golden_single_step(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        opt = NAdam({"w": w}, TrainConfig())
        w.grad = w.data.copy()  # grad of w^2/2 at w
        opt.step(lr=0.1)
        assert w.data[0] == pytest.approx(NADAM_GOLDEN_W1, abs=1e-12)

    def test_quadratic_convergence(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        opt = NAdam({"w": w}, TrainConfig())
        for _ in range(200):
            w.grad = w.data.copy()
            opt.step(lr=0.1)
        assert abs(w.data[0]) < 1e-2

    def test_non_finite_gradient_skips_step(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        opt = NAdam({"w": w}, TrainConfig())
        w.grad = np.array([np.nan])
        assert opt.step(lr=0.1) is False
        assert w.data[0] == 1.0
        assert opt.step_count == 0

    def test_gradient_clipping(self):
        w = Tensor(np.array([0.0]), requires_grad=True)
        unclipped = NAdam({"w": Tensor(np.array([0.0]), requires_grad=True)},
                          TrainConfig(grad_clip=0.0))
        opt = NAdam({"w": w}, TrainConfig(grad_clip=1.0))
        w.grad = np.array([100.0])
        opt.step(lr=0.1)
        # clipped first moment reflects the rescaled gradient
        assert opt.m["w"][0] == pytest.approx(0.1)


class TestTrainLoop:
    def _run(self, out_dir, epochs=2, seed=3, resume_from=None, config=None):
        cfg = tiny_config()
        train_cfg = config or TrainConfig(lr0=0.005, epochs=epochs, batch_size=4, seed=seed)
        train = synthetic_dataset(cfg, 8, seed=1)
        val = synthetic_dataset(cfg, 2, seed=2)
        return train_loop(train, val, train_cfg, cfg, out_dir, resume_from=resume_from)

    def test_deterministic_metrics(self, tmp_path):
        _, rec1 = self._run(tmp_path / "a")
        _, rec2 = self._run(tmp_path / "b")
        strip = lambda rs: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rs]
        assert strip(rec1) == strip(rec2)

    def test_metrics_log_schema(self, tmp_path):
        self._run(tmp_path / "m")
        lines = (tmp_path / "m" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        record = json.loads(lines[0])
        assert set(record) == {"epoch", "lr", "train_loss", "train_chamfer",
                               "val_chamfer", "wall_ms"}

    def test_empty_training_set_rejected(self, tmp_path):
        cfg = tiny_config()
        with pytest.raises(ValueError, match="empty training set"):
            train_loop([], synthetic_dataset(cfg, 2, 0), TrainConfig(), cfg, tmp_path)

    def test_resume_equivalence_bit_exact(self, tmp_path):
        _, _ = self._run(tmp_path / "full", epochs=2)
        best, _ = self._run(tmp_path / "half", epochs=1)
        resumed_dir = tmp_path / "resumed"
        cfg = tiny_config()
        train_cfg = TrainConfig(lr0=0.005, epochs=2, batch_size=4, seed=3)
        train = synthetic_dataset(cfg, 8, seed=1)
        val = synthetic_dataset(cfg, 2, seed=2)
        train_loop(train, val, train_cfg, cfg, resumed_dir,
                   resume_from=tmp_path / "half" / "last.ckpt")
        from c2pc.model import load_checkpoint

        _, straight, _ = load_checkpoint(tmp_path / "full" / "last.ckpt")
        _, resumed, _ = load_checkpoint(resumed_dir / "last.ckpt")
        for name in straight:
            assert np.array_equal(straight[name], resumed[name]), name

    def test_checkpoint_restores_epoch_and_lr(self, tmp_path):
        from c2pc.model import PointCloudModel

        cfg = tiny_config()
        model = PointCloudModel(cfg, seed=0)
        train_cfg = TrainConfig()
        opt = NAdam(model.params, train_cfg)
        path = tmp_path / "e7.ckpt"
        save_train_checkpoint(path, model, opt, train_cfg, epoch=7, best_val=1.5)
        _, _, loaded_cfg, epoch, best_val = load_train_checkpoint(path)
        assert epoch == 7
        assert best_val == 1.5
        assert lr_at(epoch, loaded_cfg) == pytest.approx(1e-4)

    def test_divergence_aborts_with_checkpoint(self, tmp_path):
        cfg = tiny_config()
        train = synthetic_dataset(cfg, 8, seed=1)
        val = synthetic_dataset(cfg, 2, seed=2)
        # a non-finite target makes the loss non-finite on the first batch
        train[0][1][0, 0] = np.nan
        train_cfg = TrainConfig(lr0=0.005, epochs=2, batch_size=4, seed=3)
        with pytest.raises(TrainingDiverged):
            train_loop(train, val, train_cfg, cfg, tmp_path / "d")

    def test_training_preserves_shapes(self, tmp_path):
        from c2pc.model import init_params, load_checkpoint

        self._run(tmp_path / "s", epochs=1)
        cfg = tiny_config()
        reference = init_params(cfg, seed=0)
        _, tensors, _ = load_checkpoint(tmp_path / "s" / "last.ckpt")
        for name, p in reference.items():
            assert tensors[name].shape == p.shape
