import json

import numpy as np
import pytest

from difflab import tensorcore as tc
from difflab.datasets import DatasetSpec
from difflab.predictor import PredictionType as P
from difflab.trainer import (
    METRICS_HEADER,
    Adam,
    ConfigError,
    TrainConfig,
    Trainer,
    TrainingError,
    load_checkpoint,
    optimizer_step,
    train,
)


def small_cfg(**kw):
    base = dict(mode="a", batch=16, steps=20, lr=1e-3, seed=3,
                dataset=DatasetSpec(n=512, noise_std=0.2),
                schedule={"kind": "linear", "T": 50},
                model={"hidden": [16, 16], "time_embed_dim": 8})
    base.update(kw)
    return TrainConfig.from_dict({k: (v.to_dict() if hasattr(v, "to_dict") else v) for k, v in base.items()})


def params_bytes(tr):
    return {k: p.data.tobytes() for k, p in tr.model.params.items()}


def test_lr_zero_leaves_params_unchanged():
    tr = Trainer(small_cfg(lr=0.0))
    before = params_bytes(tr)
    for _ in range(5):
        r = tr.step()
        assert np.isfinite(r.loss) and r.loss > 0
    assert params_bytes(tr) == before


def test_adam_zero_grads_no_update():
    p = {"w": np.array([1.0, -2.0])}
    state = {"t": 0, "m": {"w": np.zeros(2)}, "v": {"w": np.zeros(2)}}
    for _ in range(3):
        new, state = optimizer_step(p, {"w": np.zeros(2)}, 0.1, state)
        assert new["w"].tobytes() == p["w"].tobytes()


def test_adam_scalar_quadratic_converges():
    w = tc.Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"w": w})
    for _ in range(500):
        w.grad = None
        tc.sum(tc.square(w)).backward()
        opt.step(0.05)
    assert abs(w.data[0]) < 1e-3


def test_adam_first_step_matches_hand_value():
    # bias-corrected first step moves each coordinate by lr * g / (|g| + eps)
    new, _ = optimizer_step({"w": np.array([0.5])}, {"w": np.array([2.0])}, 0.1,
                            {"t": 0, "m": {"w": np.zeros(1)}, "v": {"w": np.zeros(1)}})
    assert new["w"][0] == pytest.approx(0.5 - 0.1 * 2.0 / (2.0 + 1e-8), rel=1e-15)


def test_adam_state_roundtrip():
    w = tc.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam({"w": w})
    w.grad = np.array([0.3, -0.1])
    opt.step(0.01)
    clone_w = tc.Tensor(w.data.copy(), requires_grad=True)
    clone = Adam({"w": clone_w})
    clone.load_state_dict(json.loads(json.dumps(opt.state_dict())))
    w.grad = clone_w.grad = np.array([0.2, 0.4])
    opt.step(0.01)
    clone.step(0.01)
    assert w.data.tobytes() == clone_w.data.tobytes()


def test_mixed_gradient_isolation_every_step():
    tr = Trainer(small_cfg(mode="mixed", steps=50, batch=32))
    for _ in range(50):
        r = tr.step()
        for pt in P:
            rows = r.selected != int(pt)
            assert np.all(r.head_output_grads[pt][rows] == 0.0)
            if rows.all():
                assert np.all(tr.model.params[f"head.{pt.letter}.w"].grad == 0.0)
                assert np.all(tr.model.params[f"head.{pt.letter}.b"].grad == 0.0)
        assert r.loss == pytest.approx(float(r.selection_losses.min(axis=1).mean()), rel=1e-15)
        np.testing.assert_array_equal(r.selection_losses[np.arange(r.t.size), r.selected],
                                      r.selection_losses.min(axis=1))


def test_mixed_per_batch_selects_one_head():
    tr = Trainer(small_cfg(mode="mixed", selection="per_batch"))
    for _ in range(5):
        r = tr.step()
        assert len(set(r.selected.tolist())) == 1


def test_mixed_selection_counts_accumulate():
    tr = Trainer(small_cfg(mode="mixed", batch=8))
    for _ in range(4):
        tr.step()
    assert tr.selection_counts.sum() == 32


def test_restrict_range_every_step():
    for sampler in ({"kind": "uniform"}, {"kind": "slot_stratified", "partition": [[1, 10], [11, 30], [31, 50]]}):
        tr = Trainer(small_cfg(restrict_range=[20, 35], sampler=sampler))
        for _ in range(30):
            t = tr.step().t
            assert t.min() >= 20 and t.max() <= 35


def test_end_to_end_determinism(tmp_path):
    cfg = small_cfg(mode="mixed", steps=30, checkpoint_every=10, profile_every=15, profile_n_per_t=8)
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    for name in ("metrics.csv", "checkpoint.json", "selection_counts.csv",
                 "checkpoints/checkpoint_0000020.json", "profiles/profile_0000030.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert rows[0] == ",".join(METRICS_HEADER)
    assert len(rows) == 31


def test_resume_continues_bit_identically(tmp_path):
    cfg = small_cfg(steps=12)
    full = Trainer(cfg)
    for _ in range(12):
        full.step()
    half = Trainer(cfg)
    for _ in range(6):
        half.step()
    half.save(tmp_path / "ck.json")
    resumed = Trainer.resume(load_checkpoint(tmp_path / "ck.json"))
    for _ in range(6):
        resumed.step()
    assert params_bytes(resumed) == params_bytes(full)
    assert json.dumps(resumed.checkpoint(), sort_keys=True) == json.dumps(full.checkpoint(), sort_keys=True)


def test_steps_zero_writes_initial_checkpoint(tmp_path):
    res = train(small_cfg(steps=0), tmp_path)
    assert (tmp_path / "metrics.csv").read_text().splitlines() == [",".join(METRICS_HEADER)]
    doc = load_checkpoint(res.checkpoint)
    assert doc["step"] == 0


def test_finetune_from_checkpoint_changes_only_run_settings():
    base = Trainer(small_cfg())
    base.step()
    doc = base.checkpoint()
    tr = Trainer.finetune_from(doc, small_cfg(restrict_range=[40, 50], seed=9))
    assert params_bytes(tr) == params_bytes(base)
    assert tr.optimizer.t == 1
    with pytest.raises(ConfigError):
        Trainer.finetune_from(doc, small_cfg(model={"hidden": [8], "time_embed_dim": 8}))


def test_non_finite_aborts_with_checkpoint(tmp_path):
    tr = Trainer(small_cfg())
    tr.save(tmp_path / "good.json")
    tr.model.params["trunk.0.w"].data[:] = 1e308
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(TrainingError) as exc:
        tr.step()
    assert exc.value.last_checkpoint == str(tmp_path / "good.json")


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"mode": "a", "bogus": 1})
    with pytest.raises(ConfigError):
        TrainConfig(mode="x")
    with pytest.raises(ConfigError):
        TrainConfig(batch=0)
    with pytest.raises(ConfigError):
        TrainConfig(restrict_range=(5, 1001))
    with pytest.raises(ConfigError):
        TrainConfig(model={"depth": 3})
    cfg = small_cfg(restrict_range=[2, 9])
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).hash() == cfg.hash()


def test_loss_adaptive_sampler_refreshes_in_training():
    tr = Trainer(small_cfg(sampler={"kind": "loss_adaptive", "adapt_period": 5}, steps=10))
    for _ in range(10):
        tr.step()
    assert not np.allclose(tr.sampler.weights, 1 / 50)


def test_cosine_lr_schedule_endpoints():
    tr = Trainer(small_cfg(lr_schedule="cosine", lr_final_frac=0.1, steps=100))
    assert tr.lr_at(0) == pytest.approx(1e-3)
    assert tr.lr_at(100) == pytest.approx(1e-4)


def test_training_reduces_loss():
    tr = Trainer(small_cfg(batch=64))
    first = np.mean([tr.step().loss for _ in range(20)])
    for _ in range(300):
        tr.step()
    last = np.mean([tr.step().loss for _ in range(20)])
    assert last < first
