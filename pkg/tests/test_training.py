import math

import numpy as np
import pytest

from thermoformer import autodiff as ad
from thermoformer import datagen as dg
from thermoformer import training
from thermoformer.errors import ConfigError, ContractError, NumericFault
from thermoformer.evaluation import SplitSpec, make_splits, training_batches
from thermoformer.model import ModelConfig, forward_batch, init_params
from thermoformer.training import (
    OptimizerState,
    PlateauState,
    TrainConfig,
    adamw_step,
    clip_grad_norm,
    evaluate_loss,
    mse_loss,
    plateau_scheduler,
    train,
)

TINY = ModelConfig(hidden_dim=8, n_heads=2, ffn_dim=16, n_layers_past=1, n_layers_future=1, context_length=6)


@pytest.fixture(scope="module")
def toy():
    """One building, free-floating, one month."""
    b = dg.sample_buildings(1, "marine", 0)[0]
    rec = dg.simulate(b, "marine", 4, 24 * 30, 0)
    sp = make_splits([rec], SplitSpec(test_mode=1), TINY.context_length)
    _, tr, va = training_batches([rec], {b.building_id: b.static}, sp, TINY.context_length)
    return tr, va


# loss -----------------------------------------------------------------

def test_mse_examples():
    assert mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])).item() == 0.0
    assert mse_loss(np.zeros(2), np.array([1.0, 3.0])).item() == 5.0


def test_mse_nonnegative_and_checked():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert mse_loss(rng.normal(size=7), rng.normal(size=7)).item() >= 0
    with pytest.raises(ContractError):
        mse_loss(np.zeros(2), np.zeros(3))
    with pytest.raises(ContractError):
        mse_loss(np.zeros(0), np.zeros(0))


# optimizer ------------------------------------------------------------

def test_adamw_zero_grad_no_decay_unchanged():
    p = {"w": ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    adamw_step(p, {"w": np.zeros(2)}, OptimizerState(), lr=0.1, weight_decay=0.0)
    assert p["w"].data.tolist() == [1.0, -2.0]


def test_adamw_decoupled_decay():
    p = {"w": ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = adamw_step(p, {"w": np.zeros(2)}, OptimizerState(), lr=0.1, weight_decay=0.01)
    np.testing.assert_allclose(p["w"].data, np.array([1.0, -2.0]) * (1 - 0.001), rtol=1e-15)
    assert state.step == 1 and state.m["w"].shape == (2,)


@pytest.mark.parametrize("g", [0.5, -3.0, 1e-3])
def test_adamw_first_step_is_lr(g):
    p = {"w": ad.Tensor(np.array(2.0), requires_grad=True)}
    adamw_step(p, {"w": np.array(g)}, OptimizerState(), lr=0.01, weight_decay=0.0)
    assert p["w"].data == pytest.approx(2.0 - 0.01 * math.copysign(1, g), abs=1e-7)


def test_adamw_non_finite_gradient_names_parameter():
    p = {"layer.w": ad.Tensor(np.ones(2), requires_grad=True)}
    with pytest.raises(NumericFault, match="layer.w"):
        adamw_step(p, {"layer.w": np.array([1.0, np.nan])}, OptimizerState(), 0.1, 0.0)


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 1.0) == 5.0
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
    h = {"a": np.array([0.3])}
    clip_grad_norm(h, 1.0)
    assert h["a"][0] == 0.3


def test_descent_step_on_single_sample(toy):
    tr, _ = toy
    params = init_params(TINY, 4)
    s = tr.take([0])
    loss = mse_loss(forward_batch(s.past, s.static, s.future, params, TINY), s.target_delta)
    loss.backward()
    adamw_step(params, {k: p.grad for k, p in params.items()}, OptimizerState(), lr=1e-4, weight_decay=0.0)
    with ad.no_grad():
        after = mse_loss(forward_batch(s.past, s.static, s.future, params, TINY), s.target_delta).item()
    assert after < loss.item()


# schedule -------------------------------------------------------------

def run_schedule(losses, lr=1.0):
    st = PlateauState(lr=lr)
    out = []
    for i in range(len(losses)):
        out.append(plateau_scheduler(losses[: i + 1], st, patience=3, factor=0.25))
    return out


def test_plateau_decreasing_keeps_lr():
    assert run_schedule([5, 4, 3, 2, 1]) == [1.0] * 5


def test_plateau_reduces_after_three_bad_epochs():
    assert run_schedule([1.0, 1.1, 1.1, 1.1]) == [1.0, 1.0, 1.0, 0.25]


def test_plateau_two_windows():
    assert run_schedule([1.0] + [1.1] * 6)[-1] == 0.0625


def test_plateau_improvement_resets_counter():
    assert run_schedule([1.0, 1.1, 1.1, 0.9, 1.0, 1.0]) == [1.0] * 6


def test_plateau_needs_history():
    with pytest.raises(ContractError):
        plateau_scheduler([], PlateauState(lr=1.0))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(plateau_factor=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(early_stop_patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)


# loop -----------------------------------------------------------------

def test_early_stop_on_constant_validation(toy, monkeypatch):
    tr, va = toy
    monkeypatch.setattr(training, "evaluate_loss", lambda *a, **k: 1.0)
    res = train(tr, va, TINY, TrainConfig(max_epochs=20, early_stop_patience=1, batch_size=512))
    assert len(res.log) == 2 and res.stopped_early and res.best_epoch == 1


def test_training_is_deterministic(toy):
    tr, va = toy
    cfg = TrainConfig(max_epochs=2, batch_size=128, seed=5)
    a = train(tr, va, TINY, cfg)
    b = train(tr, va, TINY, cfg)
    assert a.log_csv() == b.log_csv()
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_toy_learnability_and_best_checkpoint(toy):
    tr, va = toy
    res = train(tr, va, TINY, TrainConfig(max_epochs=25, batch_size=64, seed=1))
    assert res.log[-1].train_loss * 10 <= res.initial_train_loss
    assert res.best_val_loss == min(e.val_loss for e in res.log)
    assert evaluate_loss(va, res.params, TINY) == res.best_val_loss
    assert res.log_csv().splitlines()[0] == "epoch,train_loss,val_loss,lr"


def test_divergence_is_reported(toy):
    tr, va = toy
    bad = va.take(np.arange(len(va)))
    bad.target_delta[0] = np.nan
    with pytest.raises(NumericFault, match="epoch 1"):
        train(tr.take(np.arange(64)), bad, TINY, TrainConfig(max_epochs=3))


def test_train_needs_windows(toy):
    tr, va = toy
    with pytest.raises(ContractError):
        train(tr.take([]), va, TINY, TrainConfig(max_epochs=1))
