import json

import numpy as np
import pytest

from conftest import smooth_pairs
from vtgan.config import TrainConfig, merge, preset
from vtgan.data import PairDataset
from vtgan.extractors import random_extractor
from vtgan.tensor import Tensor
from vtgan.trainer import (
    Adam,
    NumericalError,
    OptimizerState,
    Vtgan,
    adam_step,
    batches_per_epoch,
    epoch_order,
    train,
)


def scalar_param(v=1.0):
    return {"w": Tensor(np.array([v]), requires_grad=True)}


def test_adam_first_step():
    p = scalar_param()
    p["w"].grad = 2 * p["w"].data
    state = OptimizerState()
    adam_step(p, state, TrainConfig())
    assert abs(p["w"].data[0] - 0.9998) < 1e-9
    assert state.t == 1


def test_adam_zero_gradient_is_noop_but_counts():
    p = scalar_param()
    p["w"].grad = np.zeros(1)
    state = OptimizerState()
    adam_step(p, state, TrainConfig())
    assert p["w"].data[0] == 1.0 and state.t == 1


def test_adam_monotone_descent_on_square():
    p = scalar_param()
    opt = Adam(p, TrainConfig())
    prev = 1.0
    for _ in range(200):
        opt.zero_grad()
        (p["w"] * p["w"]).sum().backward()
        opt.step()
        cur = abs(p["w"].data[0])
        assert cur < prev
        prev = cur


def test_adam_missing_grad_and_frozen():
    p = {**scalar_param(), "frozen": Tensor(np.array([3.0]), requires_grad=False)}
    with pytest.raises(ValueError, match="w"):
        adam_step(p, OptimizerState(), TrainConfig())
    p["w"].grad = np.ones(1)
    adam_step(p, OptimizerState(), TrainConfig())
    assert p["frozen"].data[0] == 3.0


def test_epoch_order_and_batches():
    np.testing.assert_array_equal(epoch_order(10, 1, 2), epoch_order(10, 1, 2))
    assert sorted(epoch_order(10, 1, 2)) == list(range(10))
    assert not np.array_equal(epoch_order(10, 1, 2), epoch_order(10, 1, 3))
    assert batches_per_epoch(5, 2) == 3 and batches_per_epoch(1, 2) == 1


@pytest.fixture(scope="module")
def model():
    return Vtgan(preset("desk"))


@pytest.fixture(scope="module")
def batch():
    return PairDataset(smooth_pairs(2)).batch([0, 1])


def snapshot(store, prefix):
    return {k: v.copy() for k, v in store.state_dict(prefix).items()}


def assert_same(a, b):
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_discriminator_step_isolation_and_gradients(model, batch):
    g_before = snapshot(model.store, "g_")
    vt_before = snapshot(model.store, "vt_")
    parts = model.discriminator_step(*batch)
    assert_same(g_before, snapshot(model.store, "g_"))
    assert any(not np.array_equal(vt_before[k], v) for k, v in snapshot(model.store, "vt_").items())
    vt = model.store.parameters("vt_", trainable_only=True)
    assert vt and all(p.grad is not None and np.all(np.isfinite(p.grad)) for p in vt.values())
    nonzero = [k for k, p in vt.items() if np.any(p.grad != 0)]
    assert len(nonzero) == len(vt)
    assert set(parts) == {"d_hinge_fine", "d_hinge_coarse", "d_cce_fine", "d_cce_coarse", "d_total"}
    lam = model.cfg.loss.cce
    want = sum(parts[f"d_hinge_{s}"] + lam * parts[f"d_cce_{s}"] for s in ("fine", "coarse"))
    assert abs(parts["d_total"] - want) < 1e-6


def test_generator_step_isolation_and_bookkeeping(model, batch):
    vt_before = snapshot(model.store, "vt_")
    g_before = snapshot(model.store, "g_")
    parts = model.generator_step(*batch[:2])
    assert_same(vt_before, snapshot(model.store, "vt_"))
    assert any(not np.array_equal(g_before[k], v) for k, v in snapshot(model.store, "g_").items())
    assert all(model.store.is_trainable(p) for p in model.store.paths("vt_") if not model.store.is_buffer(p))
    w = model.cfg.loss
    want = w.adv * parts["g_adv"] + w.mse * parts["g_mse"] + w.perc * parts["g_perc"] + w.ef * parts["g_ef"]
    assert abs(parts["g_total"] - want) < 1e-6
    for k in ("adv", "mse", "perc", "ef"):
        assert abs(parts[f"g_{k}"] - parts[f"{k}_fine"] - parts[f"{k}_coarse"]) < 1e-9


def test_nan_loss_names_the_term(batch):
    fx = random_extractor((8, 16, 32))
    fx._w["conv1.b"].data[0] = np.nan
    m = Vtgan(preset("desk"), extractor=fx)
    with pytest.raises(NumericalError, match="perc_fine"):
        m.generator_step(*batch[:2])


def test_one_epoch_smoke(tmp_path):
    cfg = merge(preset("desk"), {"train": {"epochs": 1}})
    result = train(PairDataset(smooth_pairs(4)), cfg, tmp_path / "run")
    assert len(result.history) == 2 and not result.stopped_early
    for rec in result.history:
        assert all(np.isfinite(v) for k, v in rec.items() if isinstance(v, float))
    ck = tmp_path / "run" / "checkpoints"
    for name in ("latest", "best"):
        assert {p.name for p in (ck / name).iterdir()} == {"weights.vtgw", "optimizer.vtgw", "config.json", "state.json"}
    log = [json.loads(x) for x in (tmp_path / "run" / "log.jsonl").read_text().splitlines()]
    assert log[0]["event"] == "config" and log[1]["step"] == 1 and "wall" in log[1] and "g_total" in log[1]


def test_full_scale_config_is_echoed(tmp_path):
    cfg = preset("full")
    train(PairDataset(smooth_pairs(1)), cfg, tmp_path, max_steps=0)
    head = json.loads((tmp_path / "log.jsonl").read_text().splitlines()[0])
    assert (head["epochs"], head["batch_size"], head["d_steps_per_g_step"]) == (200, 2, 2)
    assert head["config"]["train"]["lr"] == 2e-4 and head["config"]["train"]["beta1"] == 0.5


def losses(history):
    return [{k: v for k, v in r.items() if k != "wall"} for r in history]


def test_resume_continues_bitwise(tmp_path):
    cfg = merge(preset("desk"), {"train": {"epochs": 2}})
    data = PairDataset(smooth_pairs(3))
    straight = train(data, cfg, tmp_path / "a", max_steps=4)
    train(data, cfg, tmp_path / "b", max_steps=2)
    resumed = train(data, cfg, tmp_path / "b", resume=True, max_steps=4)
    assert losses(resumed.history) == losses(straight.history)[2:]
    assert_same(straight.model.store.state_dict(), resumed.model.store.state_dict())
