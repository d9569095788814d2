import json
import math

import numpy as np
import pytest
import torch

from bleedseg.data import DatasetSplit, SampleStream, make_batch
from bleedseg.model import ModelConfig, NoiseConfig, ParamSet, init_params
from bleedseg.trainer import (
    Checkpoint,
    TrainConfig,
    ema_decay,
    ema_update,
    init_train_state,
    iterations_per_epoch,
    load_checkpoint,
    lr_schedule,
    predict,
    ramp_up_weight,
    save_checkpoint,
    sgd_step,
    train,
    train_step,
)

from conftest import rel_err


def _scalar_params(*vals, dtype=torch.float64):
    return ParamSet({f"p{i}": torch.tensor([v], dtype=dtype) for i, v in enumerate(vals)})


# -- schedules ---------------------------------------------------------------

def test_lr_schedule_values():
    assert lr_schedule(0, 3000, 0.01) == 0.01
    assert rel_err(lr_schedule(1500, 3000, 0.01), 0.005358867312681466) < 1e-9
    assert lr_schedule(3000, 3000, 0.01) == 0.0
    # general point against the closed form
    assert rel_err(lr_schedule(7, 8, 0.01), 0.01 * (1 - 7 / 8) ** 0.9) < 1e-12


def test_lr_schedule_domain():
    with pytest.raises(ValueError):
        lr_schedule(3001, 3000, 0.01)
    with pytest.raises(ValueError):
        lr_schedule(-1, 3000, 0.01)
    with pytest.raises(ValueError):
        lr_schedule(0, 0, 0.01)


def test_ramp_up_weight_values():
    assert rel_err(ramp_up_weight(0, 50), 0.006737946999085467) < 1e-9  # exp(-5)
    assert rel_err(ramp_up_weight(25, 50), math.exp(-1.25)) < 1e-12
    assert ramp_up_weight(50, 50) == 1.0
    assert ramp_up_weight(51, 50) == 1.0
    assert ramp_up_weight(500, 50) == 1.0
    with pytest.raises(ValueError):
        ramp_up_weight(-1, 50)


def test_ema_decay_phase_boundary():
    cfg = TrainConfig()
    assert ema_decay(0, cfg) == 0.99
    assert ema_decay(50, cfg) == 0.99  # ramp-up epoch L itself still uses 0.99
    assert ema_decay(51, cfg) == 0.999


# -- ema / sgd ---------------------------------------------------------------

def test_ema_update_closed_form():
    beta = 0.97
    t = _scalar_params(2.0)
    s = _scalar_params(-1.0)
    cur = t
    for n in range(1, 30):
        cur = ema_update(cur, s, beta)
        want = beta ** n * 2.0 + (1 - beta ** n) * -1.0
        assert abs(float(cur.arrays["p0"]) - want) < 1e-10


def test_ema_update_edge_decays():
    t, s = _scalar_params(5.0), _scalar_params(7.0)
    assert float(ema_update(t, s, 0.0).arrays["p0"]) == 7.0
    assert float(ema_update(t, s, 1.0).arrays["p0"]) == 5.0
    with pytest.raises(ValueError):
        ema_update(t, s, 1.5)
    with pytest.raises(ValueError):
        ema_update(t, ParamSet({"other": torch.tensor([1.0])}), 0.5)


def test_sgd_step_momentum_accumulates():
    p = _scalar_params(0.0)
    g = {"p0": torch.tensor([2.0], dtype=torch.float64)}
    lr, m = 0.1, 0.9
    p1, buf = sgd_step(p, g, lr, m, {})
    assert float(p1.arrays["p0"]) == pytest.approx(-lr * 2.0)
    p2, buf = sgd_step(p1, g, lr, m, buf)
    # v2 = 0.9*2 + 2 = 3.8; cumulative displacement = lr*(2 + 3.8) = lr*5.8
    assert float(p2.arrays["p0"]) == pytest.approx(-lr * 5.8)
    assert float(buf["p0"]) == pytest.approx(3.8)


def test_sgd_step_rejects_bad_gradients():
    p = _scalar_params(0.0)
    with pytest.raises(ValueError):
        sgd_step(p, {"p0": torch.tensor([float("nan")], dtype=torch.float64)}, 0.1, 0.9, {})
    with pytest.raises(ValueError):
        sgd_step(p, {"wrong": torch.tensor([1.0])}, 0.1, 0.9, {})


# -- config ------------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="nope")
    with pytest.raises(ValueError):
        TrainConfig(mode="semi", batch_size=5)
    TrainConfig(mode="fully", batch_size=5)  # odd is fine when not splitting
    with pytest.raises(ValueError):
        TrainConfig(base_lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(label_budget="some")
    with pytest.raises(ValueError):
        TrainConfig(label_budget=-2)
    with pytest.raises(ValueError):
        TrainConfig(ema_beta_main=1.2)


def test_train_config_from_dict():
    cfg = TrainConfig.from_dict({"mode": "fully", "noise": {"sigma": 0.2}})
    assert cfg.mode == "fully" and cfg.noise == NoiseConfig(sigma=0.2)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"modee": "fully"})
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"noise": {"sigmaa": 0.2}})


def test_iterations_per_epoch():
    semi = TrainConfig(mode="semi", batch_size=16)
    fully = TrainConfig(mode="fully", batch_size=16)
    assert iterations_per_epoch(25, semi, True) == 4   # ceil(25 / 8)
    assert iterations_per_epoch(25, fully, False) == 2  # ceil(25 / 16)
    assert iterations_per_epoch(16, fully, False) == 1
    assert iterations_per_epoch(3, semi, True) == 1
    with pytest.raises(ValueError):
        iterations_per_epoch(0, fully, False)


# -- stepping ----------------------------------------------------------------

@pytest.fixture()
def tiny_streams(tiny_split):
    def build(config, k=4):
        from bleedseg.data import select_label_budget
        labeled, unlabeled = select_label_budget(tiny_split.train, k, config.seed)
        lab = SampleStream(labeled, config.seed, "labeled")
        unl = SampleStream(unlabeled, config.seed, "unlabeled") if unlabeled else None
        return lab, unl
    return build


def test_train_step_advances_epoch(tiny_model_config, tiny_streams):
    cfg = TrainConfig(mode="semi", batch_size=4, total_iterations=10, seed=0)
    lab, unl = tiny_streams(cfg)
    ipe = iterations_per_epoch(4, cfg, True)  # 4 labeled, 2 per batch -> 2
    state = init_train_state(tiny_model_config, cfg, ipe)
    for i in range(4):
        state, bd = train_step(state, make_batch(lab, unl, 4), cfg)
        assert math.isfinite(bd.total)
    assert state.iteration == 4 and state.epoch == 2


def test_train_step_teacher_is_ema(tiny_model_config, tiny_streams):
    cfg = TrainConfig(mode="fully", batch_size=2, total_iterations=5, seed=1)
    lab, _ = tiny_streams(cfg)
    state0 = init_train_state(tiny_model_config, cfg, 1)
    before = {k: v.clone() for k, v in state0.student.arrays.items()}
    state1, _ = train_step(state0, make_batch(lab, None, 2), cfg)
    beta = 0.99
    for k in before:
        want = beta * before[k] + (1 - beta) * state1.student.arrays[k]
        assert torch.allclose(state1.teacher.arrays[k], want, atol=1e-7)


def test_train_step_fully_rejects_unlabeled(tiny_model_config, tiny_streams):
    cfg = TrainConfig(mode="fully", batch_size=2, seed=0)
    lab, _ = tiny_streams(cfg)
    state = init_train_state(tiny_model_config, cfg, 1)
    from bleedseg.data import Batch
    batch = make_batch(lab, None, 2)
    bad = Batch(labeled=batch.labeled, unlabeled=[batch.labeled[0][0]])
    with pytest.raises(ValueError):
        train_step(state, bad, cfg)


# -- full loop, checkpoints, prediction --------------------------------------

def _quick_cfg(**kw):
    kw.setdefault("mode", "semi")
    kw.setdefault("total_iterations", 6)
    kw.setdefault("batch_size", 4)
    kw.setdefault("label_budget", 4)
    kw.setdefault("seed", 0)
    return TrainConfig(**kw)


def test_train_writes_log_and_checkpoint(tiny_model_config, tiny_split, tmp_path):
    ckpt = train(_quick_cfg(), tiny_split, tiny_model_config, out_dir=tmp_path)
    assert ckpt.iteration == 6
    assert len(ckpt.history) == 6
    lines = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert len(lines) == 6
    first = lines[0].split("\t")
    assert first[0] == "1" and first[1] == "0"
    assert float(first[2]) == 0.01  # base lr at c=0
    assert rel_err(float(first[3]), math.exp(-5)) < 1e-9  # w2 ramp at epoch 0
    assert float(first[4]) == 0.99
    assert (tmp_path / "checkpoint_final" / "manifest.json").is_file()


def test_train_deterministic(tiny_model_config, tiny_split):
    a = train(_quick_cfg(), tiny_split, tiny_model_config)
    b = train(_quick_cfg(), tiny_split, tiny_model_config)
    for k in a.teacher.arrays:
        assert torch.equal(a.teacher.arrays[k], b.teacher.arrays[k])
    assert [r.line() for r in a.history] == [r.line() for r in b.history]
    c = train(_quick_cfg(seed=1), tiny_split, tiny_model_config)
    assert any(not torch.equal(a.teacher.arrays[k], c.teacher.arrays[k])
               for k in a.teacher.arrays)


def test_train_semi_with_full_budget_degenerates(tiny_model_config, tiny_split):
    ckpt = train(_quick_cfg(label_budget="all"), tiny_split, tiny_model_config)
    assert all(r.consistency == 0.0 for r in ckpt.history)


def test_train_periodic_checkpoints(tiny_model_config, tiny_split, tmp_path):
    train(_quick_cfg(checkpoint_every=2), tiny_split, tiny_model_config, out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir() if p.is_dir())
    assert names == ["checkpoint_000002", "checkpoint_000004", "checkpoint_final"]


def test_train_rejects_empty_split(tiny_model_config):
    with pytest.raises(ValueError):
        train(_quick_cfg(), DatasetSplit(train=[], val=[]), tiny_model_config)


def test_checkpoint_roundtrip_exact(tiny_model_config, tiny_split, tmp_path):
    ckpt = train(_quick_cfg(), tiny_split, tiny_model_config)
    save_checkpoint(ckpt, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.model_config == ckpt.model_config
    assert back.train_config == ckpt.train_config
    assert back.iteration == ckpt.iteration and back.epoch == ckpt.epoch
    assert back.config_hash == ckpt.config_hash
    for role in ("student", "teacher"):
        a, b = getattr(ckpt, role).arrays, getattr(back, role).arrays
        assert set(a) == set(b)
        for k in a:
            assert torch.equal(a[k], b[k])


def test_checkpoint_manifest_contents(tiny_model_config, tiny_split, tmp_path):
    ckpt = train(_quick_cfg(), tiny_split, tiny_model_config)
    save_checkpoint(ckpt, tmp_path / "ck")
    man = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert man["version"] == 1
    assert man["ema_phase"] == "rampup"
    assert man["dtype"] == "<f4"
    assert man["params"]["head.bias"] == [2]
    blob = tmp_path / "ck" / "params" / "teacher" / "head.bias.bin"
    assert blob.stat().st_size == 2 * 4


def test_checkpoint_load_errors(tiny_model_config, tiny_split, tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")
    ckpt = train(_quick_cfg(), tiny_split, tiny_model_config)
    save_checkpoint(ckpt, tmp_path / "ck")
    blob = tmp_path / "ck" / "params" / "student" / "head.bias.bin"
    blob.write_bytes(b"\x00" * 4)  # truncated
    with pytest.raises(ValueError, match="expected"):
        load_checkpoint(tmp_path / "ck")


def test_checkpoint_overwrite_replaces(tiny_model_config, tiny_split, tmp_path):
    ckpt = train(_quick_cfg(), tiny_split, tiny_model_config)
    save_checkpoint(ckpt, tmp_path / "ck")
    save_checkpoint(ckpt, tmp_path / "ck")  # idempotent overwrite
    back = load_checkpoint(tmp_path / "ck")
    assert torch.equal(back.student.arrays["head.bias"], ckpt.student.arrays["head.bias"])


def test_predict_shapes_and_determinism(tiny_model_config, tiny_split):
    ckpt = train(_quick_cfg(total_iterations=2), tiny_split, tiny_model_config)
    s = tiny_split.val[0]
    mask = predict(ckpt, s.pixels)
    assert mask.shape == s.pixels.shape[:2] and mask.dtype == np.uint8
    assert set(np.unique(mask)) <= {0, 1}
    np.testing.assert_array_equal(mask, predict(ckpt, s.pixels))
    with pytest.raises(ValueError):
        predict(ckpt, s.pixels[:30, :30])
    with pytest.raises(ValueError):
        predict(ckpt, s.pixels[..., :2])


def test_predict_ties_go_to_background(tiny_model_config, tiny_split):
    ckpt = train(_quick_cfg(total_iterations=1), tiny_split, tiny_model_config)
    # zero the head: both class logits identical everywhere
    for role in ("student", "teacher"):
        arrays = getattr(ckpt, role).arrays
        arrays["head.weight"] = torch.zeros_like(arrays["head.weight"])
        arrays["head.bias"] = torch.zeros_like(arrays["head.bias"])
    mask = predict(ckpt, tiny_split.val[0].pixels)
    assert mask.sum() == 0


def test_fully_supervised_loss_trend_decreases(tiny_model_config, tiny_split):
    ckpt = train(TrainConfig(mode="fully", label_budget="all", total_iterations=120,
                             batch_size=4, seed=0), tiny_split, tiny_model_config)
    supervised = [r.ce + r.dice for r in ckpt.history]
    n = max(1, len(supervised) // 10)
    assert np.mean(supervised[-n:]) < np.mean(supervised[:n])
