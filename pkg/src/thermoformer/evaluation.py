"""Split protocol, error metrics, reference baselines and evaluation reports.

The test split is every window of the held-out HVAC mode across all buildings.
Training buildings contribute their remaining modes; 10% of each record's window
indices (seeded, per record) go to validation and the rest to training.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .datagen import derive_seed
from .errors import ConfigError, ContractError, DataError
from .features import BuildingStatic, Standardizer, TimeSeriesRecord, WindowBatch, fit_standardizer, window_batch
from .model import Checkpoint, predict_batch

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
BASELINES = ("persistence", "linear_ar")
MAPE_GUARD = 0.1
DEFAULT_RIDGE = 1e-3

RecordKey = tuple  # (building_id, hvac_mode)


@dataclass(frozen=True)
class SplitSpec:
    test_mode: int = 1
    val_fraction: float = 0.10
    seed: int = 0
    train_buildings: tuple[str, ...] | None = None  # None: every building is a training building

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.test_mode not in (1, 2, 3, 4, 5):
            raise ConfigError(f"test_mode must be an hvac mode 1-5, got {self.test_mode}")
        if self.train_buildings is not None:
            object.__setattr__(self, "train_buildings", tuple(self.train_buildings))
            if len(set(self.train_buildings)) != len(self.train_buildings):
                raise ConfigError("train_buildings contains duplicates")

    def is_target(self, building_id: str) -> bool:
        return self.train_buildings is None or building_id in self.train_buildings


def nested_building_subsets(building_ids: Sequence[str], sizes: Sequence[int], seed: int) -> dict[int, tuple[str, ...]]:
    """Seeded prefixes of one shuffled building order, so every smaller set sits inside every larger one."""
    ids = sorted(set(building_ids))
    sizes = sorted(set(int(s) for s in sizes))
    if not sizes or sizes[0] < 1:
        raise ConfigError("building counts must be positive")
    if sizes[-1] > len(ids):
        raise ConfigError(f"asked for {sizes[-1]} buildings but only {len(ids)} are available")
    order = [ids[i] for i in np.random.default_rng(derive_seed(seed, "building-subsets")).permutation(len(ids))]
    subsets = {s: tuple(order[:s]) for s in sizes}
    for small, large in zip(sizes, sizes[1:]):
        assert set(subsets[small]) < set(subsets[large])
    return subsets


@dataclass
class Splits:
    """Target indices per record for each split; keys are (building_id, hvac_mode)."""

    train: dict[RecordKey, np.ndarray] = field(default_factory=dict)
    validation: dict[RecordKey, np.ndarray] = field(default_factory=dict)
    test: dict[RecordKey, np.ndarray] = field(default_factory=dict)

    def get(self, split: str) -> dict[RecordKey, np.ndarray]:
        if split not in SPLITS:
            raise ContractError(f"unknown split {split!r}")
        return getattr(self, split)

    def count(self, split: str) -> int:
        return sum(len(v) for v in self.get(split).values())


def make_splits(records: Sequence[TimeSeriesRecord], spec: SplitSpec, context_length: int) -> Splits:
    n = context_length
    known = {r.building_id for r in records}
    if spec.train_buildings is not None:
        missing = sorted(set(spec.train_buildings) - known)
        if missing:
            raise DataError(f"training buildings without records: {missing}")
    out = Splits()
    for r in sorted(records, key=lambda r: r.key):
        if len(r) < n + 1:
            logger.warning("record %s has %d rows, too short for context %d; skipped", r.key, len(r), n)
            continue
        idx = np.arange(n, len(r))
        if r.hvac_mode == spec.test_mode:
            out.test[r.key] = idx
            continue
        if not spec.is_target(r.building_id):
            continue
        k = int(round(spec.val_fraction * len(idx)))
        if len(idx) * spec.val_fraction < 1:
            logger.warning("record %s has only %d windows; forcing one validation window", r.key, len(idx))
            k = max(k, 1)
        if k >= len(idx):
            raise DataError(f"record {r.key} has {len(idx)} windows, too few to hold out validation")
        perm = np.random.default_rng(derive_seed(spec.seed, "validation", r.building_id, str(r.hvac_mode))).permutation(len(idx))
        out.validation[r.key] = np.sort(idx[perm[:k]])
        out.train[r.key] = np.sort(idx[perm[k:]])
    if not out.train:
        raise DataError("no training windows: check train_buildings and test_mode")
    if not out.test:
        logger.warning("no records with test mode %d; test split is empty", spec.test_mode)
    return out


def materialize(
    records: Sequence[TimeSeriesRecord],
    statics: Mapping[str, BuildingStatic],
    std: Standardizer,
    n: int,
    index_map: Mapping[RecordKey, np.ndarray],
) -> WindowBatch:
    """Assemble the windows named by ``index_map`` in deterministic record order."""
    by_key = {r.key: r for r in records}
    parts = []
    for key in sorted(index_map):
        if key not in by_key:
            raise ContractError(f"split refers to unknown record {key}")
        bid = key[0]
        if bid not in statics:
            raise DataError(f"no static descriptors for building {bid}")
        parts.append(window_batch(by_key[key], statics[bid], std, n, targets=index_map[key]))
    if not parts:
        raise ContractError("no windows to materialize")
    return WindowBatch.concat(parts)


def training_batches(
    records: Sequence[TimeSeriesRecord],
    statics: Mapping[str, BuildingStatic],
    splits: Splits,
    n: int,
    forecast_weather: bool = False,
) -> tuple[Standardizer, WindowBatch, WindowBatch]:
    """Fit the standardizer on the training records and build train/validation batches."""
    keys = set(splits.train)
    train_records = [r for r in records if r.key in keys]
    std = fit_standardizer(train_records, statics, forecast_weather=forecast_weather)
    return std, materialize(records, statics, std, n, splits.train), materialize(records, statics, std, n, splits.validation)


# metrics ----------------------------------------------------------------

def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ContractError(f"prediction length {p.size} differs from truth length {t.size}")
    if p.size == 0:
        raise ContractError("metrics need at least one value")
    return p, t


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return math.sqrt(float(np.mean((p - t) ** 2)))


def mape_guarded(pred, truth, guard: float = MAPE_GUARD) -> tuple[float, int]:
    """MAPE in percent over values with |truth| >= guard, plus the number excluded."""
    p, t = _pair(pred, truth)
    keep = np.abs(t) >= guard
    excluded = int(t.size - keep.sum())
    if excluded:
        logger.debug("mape: %d values with |truth| < %g excluded", excluded, guard)
    if not keep.any():
        return math.nan, excluded
    return float(np.mean(np.abs(p[keep] - t[keep]) / np.abs(t[keep])) * 100.0), excluded


def mape(pred, truth) -> float:
    return mape_guarded(pred, truth)[0]


# baselines --------------------------------------------------------------

def _design(batch: WindowBatch) -> np.ndarray:
    N = len(batch)
    return np.concatenate([batch.past.reshape(N, -1), batch.static, batch.future, np.ones((N, 1))], axis=1)


@dataclass
class LinearAR:
    """Ridge regression from flattened window features to the temperature change."""

    weights: np.ndarray
    ridge: float

    @classmethod
    def fit(cls, train: WindowBatch, ridge: float = DEFAULT_RIDGE, max_tries: int = 12) -> LinearAR:
        if len(train) == 0:
            raise ContractError("linear_ar needs a nonempty training split")
        X = _design(train)
        gram = X.T @ X
        rhs = X.T @ train.target_delta
        eye = np.eye(X.shape[1])
        lam = ridge
        for _ in range(max_tries):
            try:
                A = gram + lam * eye
                w = np.linalg.solve(A, rhs)
                resid = np.linalg.norm(A @ w - rhs) / max(np.linalg.norm(rhs), 1e-300)
                if np.isfinite(w).all() and resid < 1e-6:
                    return cls(w, lam)
            except np.linalg.LinAlgError:
                pass
            logger.warning("linear_ar normal equations singular at ridge %g; increasing ridge", lam)
            lam *= 10.0
        raise DataError("linear_ar normal equations stayed singular")

    def predict_delta(self, batch: WindowBatch) -> np.ndarray:
        return _design(batch) @ self.weights


def baseline_predict(kind: str, train: WindowBatch | None, batch: WindowBatch, ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    """Temperature predictions of a reference forecaster on ``batch``."""
    if kind == "persistence":
        return batch.t_prev.copy()
    if kind == "linear_ar":
        if train is None:
            raise ContractError("linear_ar needs a nonempty training split")
        return batch.t_prev + LinearAR.fit(train, ridge).predict_delta(batch)
    raise ConfigError(f"unknown baseline {kind!r}; choose from {BASELINES}")


# reports ----------------------------------------------------------------

def _r(x: float) -> float | None:
    return None if x is None or not math.isfinite(x) else float(x)


@dataclass
class EvalReport:
    rows: list[dict]
    summary: dict
    baselines: tuple[str, ...] = ()

    def columns(self) -> list[str]:
        cols = ["building_id", "climate", "split", "month", "rmse", "mape", "is_target", "n_windows", "mape_excluded"]
        for b in self.baselines:
            cols += [f"rmse_{b}", f"mape_{b}"]
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = self.columns()
        w.writerow(cols)
        for row in self.rows:
            w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in cols])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary, "rows": self.rows}, sort_keys=True, indent=2)

    def pooled_rmse(self, split: str = "test", which: str = "model") -> float:
        return self.summary[split]["pooled"][which]["rmse"]


def _metrics(pred: np.ndarray, truth: np.ndarray) -> dict:
    m, excluded = mape_guarded(pred, truth)
    return {"rmse": rmse(pred, truth), "mape": _r(m), "mape_excluded": excluded, "n_windows": int(truth.size)}


def _aggregate(predictions: dict[str, np.ndarray], truth: np.ndarray, groups: np.ndarray) -> dict:
    out = {}
    for g in sorted(set(groups.tolist())):
        sel = groups == g
        out[g] = {k: _metrics(v[sel], truth[sel]) for k, v in predictions.items()}
    return out


def evaluate(
    checkpoint: Checkpoint,
    records: Sequence[TimeSeriesRecord],
    statics: Mapping[str, BuildingStatic],
    spec: SplitSpec,
    *,
    baselines: Sequence[str] = (),
    splits: Sequence[str] = ("validation", "test"),
    predict: Callable[[WindowBatch], np.ndarray] | None = None,
) -> EvalReport:
    """One-step predictions with true history on every window of the requested splits.

    ``predict`` replaces the checkpoint forecaster (used for oracle checks); it
    receives a WindowBatch and returns temperatures.
    """
    for b in baselines:
        if b not in BASELINES:
            raise ConfigError(f"unknown baseline {b!r}; choose from {BASELINES}")
    config = checkpoint.config
    std = checkpoint.standardizer
    n = config.context_length
    trained_on = set(checkpoint.meta.get("train_climates", []))
    for climate in sorted({r.climate for r in records}):
        if trained_on and climate not in trained_on:
            logger.warning("climate %s was not seen in training; evaluating zero-shot", climate)

    sp = make_splits(records, spec, n)
    if predict is None:
        params = checkpoint.tensors()

        def predict(batch):
            return predict_batch(batch, params, config)

    linear = LinearAR.fit(materialize(records, statics, std, n, sp.train)) if "linear_ar" in baselines else None

    rows: list[dict] = []
    summary: dict = {}
    for split in splits:
        index_map = sp.get(split)
        if not index_map:
            continue
        batch = materialize(records, statics, std, n, index_map)
        truth = batch.target
        preds = {"model": np.asarray(predict(batch), dtype=np.float64)}
        if preds["model"].shape != truth.shape:
            raise ContractError(f"predictor returned shape {preds['model'].shape}, expected {truth.shape}")
        for b in baselines:
            preds[b] = batch.t_prev.copy() if b == "persistence" else batch.t_prev + linear.predict_delta(batch)
        months = np.array([str(m) for m in batch.timestamp.astype("datetime64[M]")], dtype=object)
        buildings = np.asarray(batch.building_id, dtype=object)
        climate_of = {bid: c for bid, c in zip(batch.building_id, batch.climate)}

        per_building = _aggregate(preds, truth, buildings)
        combo = np.array([f"{b}\x00{m}" for b, m in zip(buildings, months)], dtype=object)
        for key, metrics in _aggregate(preds, truth, combo).items():
            bid, month = key.split("\x00")
            row = {
                "building_id": bid,
                "climate": climate_of[bid],
                "split": split,
                "month": month,
                "is_target": spec.is_target(bid),
                "rmse": metrics["model"]["rmse"],
                "mape": metrics["model"]["mape"],
                "n_windows": metrics["model"]["n_windows"],
                "mape_excluded": metrics["model"]["mape_excluded"],
            }
            for b in baselines:
                row[f"rmse_{b}"] = metrics[b]["rmse"]
                row[f"mape_{b}"] = metrics[b]["mape"]
            rows.append(row)

        is_target = np.array([spec.is_target(b) for b in buildings])
        part = {
            "pooled": {k: _metrics(v, truth) for k, v in preds.items()},
            "building_mean": {
                k: {
                    "rmse": float(np.mean([per_building[b][k]["rmse"] for b in per_building])),
                    "mape": _r(float(np.nanmean([np.nan if per_building[b][k]["mape"] is None else per_building[b][k]["mape"] for b in per_building]))),
                }
                for k in preds
            },
            "per_building": {
                b: {"climate": climate_of[b], "is_target": spec.is_target(b), **{k: m for k, m in per_building[b].items()}}
                for b in per_building
            },
            "months": sorted(set(months.tolist())),
        }
        for label, sel in (("target", is_target), ("non_target", ~is_target)):
            if sel.any():
                part[label] = {k: _metrics(v[sel], truth[sel]) for k, v in preds.items()}
        summary[split] = part
    rows.sort(key=lambda r: (r["split"], r["building_id"], r["month"]))
    return EvalReport(rows=rows, summary=summary, baselines=tuple(baselines))


# transfer ---------------------------------------------------------------

@dataclass
class TransferMatrix:
    row_labels: list[str]
    col_labels: list[str]
    values: list[list[float | None]]  # None marks an absent cell

    def cell(self, train_climate: str, eval_climate: str) -> float | None:
        return self.values[self.row_labels.index(train_climate)][self.col_labels.index(eval_climate)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["train_climate", *self.col_labels])
        for label, vals in zip(self.row_labels, self.values):
            w.writerow([label, *("absent" if v is None else repr(v) for v in vals)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {"rows": self.row_labels, "columns": self.col_labels, "rmse": self.values}, sort_keys=True, indent=2
        )


def heldout_rmse(
    checkpoint: Checkpoint, records: Sequence[TimeSeriesRecord], statics: Mapping[str, BuildingStatic], test_mode: int = 1
) -> float:
    """Pooled one-step RMSE of a checkpoint over every window of the held-out mode."""
    n = checkpoint.config.context_length
    test = {r.key: np.arange(n, len(r)) for r in records if r.hvac_mode == test_mode and len(r) > n}
    if not test:
        raise DataError(f"no records with hvac mode {test_mode}")
    batch = materialize(records, statics, checkpoint.standardizer, n, test)
    return rmse(predict_batch(batch, checkpoint.tensors(), checkpoint.config), batch.target)


def transfer_matrix(
    checkpoints: Mapping[str, Checkpoint | None],
    records: Sequence[TimeSeriesRecord],
    statics: Mapping[str, BuildingStatic],
    test_mode: int = 1,
    include_persistence: bool = True,
) -> TransferMatrix:
    """Rows are the labelled checkpoints, columns the climates present in ``records``."""
    climates = sorted({r.climate for r in records})
    if len(climates) < 2:
        raise ConfigError(f"transfer needs at least 2 climates, found {climates}")
    by_climate = defaultdict(list)
    for r in records:
        by_climate[r.climate].append(r)
    rows, values = [], []
    for label in checkpoints:
        ck = checkpoints[label]
        rows.append(label)
        if ck is None:
            logger.warning("checkpoint for %s is missing; cells marked absent", label)
            values.append([None] * len(climates))
            continue
        values.append([heldout_rmse(ck, by_climate[c], statics, test_mode) for c in climates])
    if include_persistence:
        present = [ck for ck in checkpoints.values() if ck is not None]
        n = present[0].config.context_length if present else 1
        rows.append("persistence")
        vals = []
        for c in climates:
            truth, prev = [], []
            for r in by_climate[c]:
                if r.hvac_mode == test_mode and len(r) > n:
                    truth.append(r.t_in[n:])
                    prev.append(r.t_in[n - 1 : -1])
            vals.append(rmse(np.concatenate(prev), np.concatenate(truth)) if truth else None)
        values.append(vals)
    return TransferMatrix(rows, climates, values)
