"""AdamW training with plateau learning-rate decay and early stopping on validation MSE."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NumericFault
from .features import WindowBatch
from .model import ModelConfig, Params, copy_params, forward_batch, init_params

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.003125
    weight_decay: float = 0.01
    batch_size: int = 256
    max_epochs: int = 400
    plateau_patience: int = 3
    plateau_factor: float = 0.25
    early_stop_patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    time_budget_s: float | None = None

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patiences must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if not self.lr > 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or null")


def mse_loss(pred, target) -> Tensor:
    pred = ad.as_tensor(pred)
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ContractError(f"mse_loss: prediction {pred.shape} and target {target.shape} differ")
    if pred.data.size < 1:
        raise ContractError("mse_loss of an empty batch")
    diff = pred - target
    return ad.mean(diff * diff)


# optimizer --------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    """One in-place AdamW update with decoupled weight decay and bias-corrected moments."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericFault(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# schedule ---------------------------------------------------------------

@dataclass
class PlateauState:
    lr: float
    best: float = math.inf
    bad_epochs: int = 0
    reductions: int = 0


def plateau_scheduler(history, state: PlateauState, patience: int = 3, factor: float = 0.25) -> float:
    """Feed the newest validation loss; scale lr by ``factor`` after ``patience`` epochs without a new best."""
    if len(history) == 0:
        raise ContractError("plateau_scheduler needs at least one validation loss")
    latest = history[-1]
    if latest < state.best:
        state.best = latest
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= patience:
            state.lr *= factor
            state.reductions += 1
            state.bad_epochs = 0
    return state.lr


# loop -------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    params: Params
    log: list[EpochLog]
    best_epoch: int
    best_val_loss: float
    initial_train_loss: float
    initial_val_loss: float
    stopped_early: bool
    wall_time_s: float

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for e in self.log:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.lr)])
        return buf.getvalue()


def evaluate_loss(batch: WindowBatch, params: Params, config: ModelConfig, chunk: int = 2048) -> float:
    """Mean squared ΔT error over the whole batch, without recording the tape."""
    total = 0.0
    with ad.no_grad():
        for s in range(0, len(batch), chunk):
            e = min(s + chunk, len(batch))
            pred = forward_batch(batch.past[s:e], batch.static[s:e], batch.future[s:e], params, config).data
            total += float(((pred - batch.target_delta[s:e]) ** 2).sum())
    return total / len(batch)


def train(
    train_batch: WindowBatch,
    val_batch: WindowBatch,
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: Params | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Fit ΔT with MSE; return the parameters of the best validation epoch."""
    if len(train_batch) == 0 or len(val_batch) == 0:
        raise ContractError("train needs non-empty training and validation windows")
    tc = train_config
    t_start = time.perf_counter()
    rng = np.random.default_rng(tc.seed)
    params = init_params(model_config, seed=int(rng.integers(2**63))) if params is None else params
    dropout_rng = np.random.default_rng(int(rng.integers(2**63))) if model_config.dropout > 0 else None
    opt = OptimizerState()
    sched = PlateauState(lr=tc.lr)

    initial_train = evaluate_loss(train_batch, params, model_config)
    initial_val = evaluate_loss(val_batch, params, model_config)
    best_params = copy_params(params)
    best_val, best_epoch = math.inf, 0
    log: list[EpochLog] = []
    history: list[float] = []
    stale = 0
    stopped_early = False
    N = len(train_batch)

    for epoch in range(1, tc.max_epochs + 1):
        lr = sched.lr
        order = rng.permutation(N)
        running, seen = 0.0, 0
        for s in range(0, N, tc.batch_size):
            idx = order[s : s + tc.batch_size]
            pred = forward_batch(
                train_batch.past[idx], train_batch.static[idx], train_batch.future[idx], params, model_config, rng=dropout_rng
            )
            loss = mse_loss(pred, train_batch.target_delta[idx])
            for p in params.values():
                p.grad = None
            loss.backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            if tc.grad_clip is not None:
                clip_grad_norm(grads, tc.grad_clip)
            adamw_step(params, grads, opt, lr, tc.weight_decay, tc.beta1, tc.beta2, tc.eps)
            running += loss.item() * len(idx)
            seen += len(idx)

        val = evaluate_loss(val_batch, params, model_config)
        if not math.isfinite(val):
            raise NumericFault(f"validation loss diverged at epoch {epoch} (lr {lr:g}, last train loss {running / seen:g})")
        entry = EpochLog(epoch, running / seen, val, lr)
        log.append(entry)
        history.append(val)
        logger.info("epoch %d train %.6g val %.6g lr %.3g", epoch, entry.train_loss, val, lr)
        if on_epoch is not None:
            on_epoch(entry)

        if val < best_val:
            best_val, best_epoch = val, epoch
            best_params = copy_params(params)
            stale = 0
        else:
            stale += 1
        plateau_scheduler(history, sched, tc.plateau_patience, tc.plateau_factor)
        if stale >= tc.early_stop_patience:
            stopped_early = True
            break
        if tc.time_budget_s is not None and time.perf_counter() - t_start > tc.time_budget_s:
            logger.warning("time budget of %.0f s reached after epoch %d", tc.time_budget_s, epoch)
            break

    return TrainResult(
        params=best_params,
        log=log,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        initial_train_loss=initial_train,
        initial_val_loss=initial_val,
        stopped_early=stopped_early,
        wall_time_s=time.perf_counter() - t_start,
    )
