"""Raw series and building descriptors -> model-ready windows.

Past channels are the five raw series (``t_in, t_out, solar, q_hvac, q_occ``)
followed by their time derivatives, so ``f = 10``. Derivatives are taken on
the raw series and standardized as channels of their own.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DataError, InsufficientDataError

RAW_CHANNELS = ("t_in", "t_out", "solar", "q_hvac", "q_occ")
PAST_CHANNELS = RAW_CHANNELS + tuple(f"d_{c}" for c in RAW_CHANNELS)
STATIC_FIELDS = ("floor_area", "aspect_ratio", "wwr", "wall_r", "roof_r", "internal_gain_density")
CALENDAR_FEATURES = ("hour_sin", "hour_cos", "day_sin", "day_cos")
STD_FLOOR = 1e-8
DT_HOURS = 1.0


@dataclass(frozen=True)
class BuildingStatic:
    floor_area: float
    aspect_ratio: float
    wwr: float
    wall_r: float
    roof_r: float
    internal_gain_density: float

    def __post_init__(self):
        for name in ("floor_area", "aspect_ratio", "wall_r", "roof_r"):
            if not getattr(self, name) > 0:
                raise DataError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.wwr <= 1:
            raise DataError(f"wwr must lie in [0, 1], got {self.wwr}")
        if not self.internal_gain_density >= 0:
            raise DataError(f"internal_gain_density must be >= 0, got {self.internal_gain_density}")

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in STATIC_FIELDS], dtype=np.float64)

    @classmethod
    def from_dict(cls, d: Mapping) -> BuildingStatic:
        missing = [k for k in STATIC_FIELDS if k not in d]
        if missing:
            raise DataError(f"building statics missing keys: {', '.join(missing)}")
        return cls(**{k: float(d[k]) for k in STATIC_FIELDS})


def load_statics(path) -> dict[str, BuildingStatic]:
    """Statics JSON: an object mapping building_id to an object of the six descriptor keys."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {str(bid): BuildingStatic.from_dict(v) for bid, v in raw.items()}


def dump_statics(statics: Mapping[str, BuildingStatic], path) -> None:
    payload = {bid: asdict(s) for bid, s in sorted(statics.items())}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass(eq=False)
class TimeSeriesRecord:
    """One (building, hvac mode) simulation trace at hourly resolution.

    ``t_in``, ``t_out`` and ``solar`` are instantaneous values at each
    timestamp; ``q_hvac`` and ``q_occ`` are mean powers over the hour ending at
    that timestamp.
    """

    building_id: str
    hvac_mode: int
    climate: str
    timestamps: np.ndarray  # datetime64[s]
    t_in: np.ndarray
    t_out: np.ndarray
    solar: np.ndarray
    q_hvac: np.ndarray
    q_occ: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        for c in RAW_CHANNELS:
            setattr(self, c, np.asarray(getattr(self, c), dtype=np.float64))
        self.hvac_mode = int(self.hvac_mode)
        self.validate()

    def validate(self) -> None:
        n = len(self.timestamps)
        if n < 3:
            raise InsufficientDataError(f"record {self.key} has {n} rows, need at least 3")
        for c in RAW_CHANNELS:
            if getattr(self, c).shape != (n,):
                raise DataError(f"record {self.key}: channel {c} length differs from timestamps")
        if self.hvac_mode not in range(1, 6):
            raise DataError(f"record {self.key}: hvac_mode must be in 1..5")
        steps = np.diff(self.timestamps).astype(np.int64)
        if (steps <= 0).any():
            raise DataError(f"record {self.key}: timestamps not strictly increasing")
        if (steps != 3600).any():
            raise DataError(f"record {self.key}: timestamps not uniformly hourly")

    @property
    def key(self) -> tuple[str, int]:
        return (self.building_id, self.hvac_mode)

    def __len__(self) -> int:
        return len(self.timestamps)

    def raw_matrix(self) -> np.ndarray:
        return np.stack([getattr(self, c) for c in RAW_CHANNELS], axis=1)

    def equals(self, other: TimeSeriesRecord) -> bool:
        return (
            self.building_id == other.building_id
            and self.hvac_mode == other.hvac_mode
            and self.climate == other.climate
            and np.array_equal(self.timestamps, other.timestamps)
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in RAW_CHANNELS)
        )


@dataclass
class WindowSample:
    past: np.ndarray  # [n, f], standardized
    static: np.ndarray  # [6], standardized
    future: np.ndarray  # [k]
    t_prev: float
    target_delta: float
    building_id: str = ""
    target_index: int = -1


@dataclass
class WindowBatch:
    """Stacked windows plus the bookkeeping needed to route them back to records."""

    past: np.ndarray
    static: np.ndarray
    future: np.ndarray
    t_prev: np.ndarray
    target_delta: np.ndarray
    building_id: np.ndarray
    hvac_mode: np.ndarray
    climate: np.ndarray
    target_index: np.ndarray
    timestamp: np.ndarray

    def __len__(self) -> int:
        return len(self.t_prev)

    def __getitem__(self, i: int) -> WindowSample:
        return WindowSample(
            past=self.past[i],
            static=self.static[i],
            future=self.future[i],
            t_prev=float(self.t_prev[i]),
            target_delta=float(self.target_delta[i]),
            building_id=str(self.building_id[i]),
            target_index=int(self.target_index[i]),
        )

    @property
    def target(self) -> np.ndarray:
        return self.t_prev + self.target_delta

    def take(self, idx) -> WindowBatch:
        return WindowBatch(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    @classmethod
    def concat(cls, batches: Sequence[WindowBatch]) -> WindowBatch:
        if not batches:
            raise ContractError("cannot concatenate zero window batches")
        return cls(**{f.name: np.concatenate([getattr(b, f.name) for b in batches]) for f in fields(cls)})


# derivatives ------------------------------------------------------------

def centered_difference(series, dt: float = DT_HOURS) -> np.ndarray:
    """Centered differences inside, one-sided first-order differences at both ends."""
    f = np.asarray(series, dtype=np.float64)
    if f.ndim != 1 or len(f) < 3:
        raise InsufficientDataError(f"centered_difference needs at least 3 points, got {f.shape}")
    if not dt > 0:
        raise ContractError(f"dt must be positive, got {dt}")
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[:-2]) / (2 * dt)
    out[0] = (f[1] - f[0]) / dt
    out[-1] = (f[-1] - f[-2]) / dt
    return out


def _series_derivative(x: np.ndarray, dt: float = DT_HOURS) -> np.ndarray:
    """Column-wise :func:`centered_difference` of an [L, c] matrix."""
    out = np.empty_like(x)
    out[1:-1] = (x[2:] - x[:-2]) / (2 * dt)
    out[0] = (x[1] - x[0]) / dt
    out[-1] = (x[-1] - x[-2]) / dt
    return out


def window_derivative(window: np.ndarray, dt: float = DT_HOURS) -> np.ndarray:
    """Derivative of a [n, c] window using only values inside the window (n >= 2)."""
    if len(window) < 2:
        raise InsufficientDataError("a derivative needs at least 2 points")
    if len(window) == 2:
        d = (window[1] - window[0]) / dt
        return np.stack([d, d])
    return _series_derivative(window, dt)


# calendar covariates ----------------------------------------------------

def build_future_covariates(timestamp, weather: Sequence[float] | None = None) -> np.ndarray:
    """Hour-of-day and day-of-year phases at the target time, optionally followed by weather."""
    ts = np.datetime64(timestamp, "s")
    return _calendar(np.array([ts]), weather=None if weather is None else np.asarray([weather]))[0]


def _calendar(timestamps: np.ndarray, weather: np.ndarray | None = None) -> np.ndarray:
    ts = np.asarray(timestamps, dtype="datetime64[s]")
    day_start = ts.astype("datetime64[D]")
    hour = (ts - day_start).astype(np.int64) / 3600.0
    doy0 = (day_start - day_start.astype("datetime64[Y]")).astype(np.int64)
    h_ang = 2 * math.pi * hour / 24.0
    d_ang = 2 * math.pi * doy0 / 365.0
    cols = [np.sin(h_ang), np.cos(h_ang), np.sin(d_ang), np.cos(d_ang)]
    out = np.stack(cols, axis=1)
    if weather is not None:
        out = np.concatenate([out, np.asarray(weather, dtype=np.float64).reshape(len(ts), -1)], axis=1)
    return out


# standardization --------------------------------------------------------

@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> ChannelStats:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if len(x) == 0:
            raise DataError("cannot fit channel statistics on zero rows")
        return cls(mean=x.mean(axis=0), std=np.maximum(x.std(axis=0), STD_FLOOR))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


@dataclass
class Standardizer:
    past: ChannelStats
    static: ChannelStats
    forecast_weather: bool = False

    @property
    def n_past(self) -> int:
        return len(self.past.mean)

    @property
    def n_future(self) -> int:
        return len(CALENDAR_FEATURES) + (2 if self.forecast_weather else 0)

    def to_dict(self) -> dict:
        return {
            "past_channels": list(PAST_CHANNELS),
            "static_fields": list(STATIC_FIELDS),
            "past_mean": self.past.mean.tolist(),
            "past_std": self.past.std.tolist(),
            "static_mean": self.static.mean.tolist(),
            "static_std": self.static.std.tolist(),
            "forecast_weather": self.forecast_weather,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> Standardizer:
        if list(d.get("past_channels", PAST_CHANNELS)) != list(PAST_CHANNELS):
            raise DataError(f"standardizer channels {d['past_channels']} do not match {list(PAST_CHANNELS)}")
        if list(d.get("static_fields", STATIC_FIELDS)) != list(STATIC_FIELDS):
            raise DataError(f"standardizer static fields {d['static_fields']} do not match {list(STATIC_FIELDS)}")
        return cls(
            past=ChannelStats(np.array(d["past_mean"], dtype=float), np.array(d["past_std"], dtype=float)),
            static=ChannelStats(np.array(d["static_mean"], dtype=float), np.array(d["static_std"], dtype=float)),
            forecast_weather=bool(d.get("forecast_weather", False)),
        )


def past_channels(record: TimeSeriesRecord) -> np.ndarray:
    """[L, 10] raw channels followed by their full-series derivatives."""
    raw = record.raw_matrix()
    return np.concatenate([raw, _series_derivative(raw)], axis=1)


def fit_standardizer(
    records: Sequence[TimeSeriesRecord],
    statics: Mapping[str, BuildingStatic],
    forecast_weather: bool = False,
) -> Standardizer:
    """Channel statistics over all points of the training records; statics over their distinct buildings."""
    if not records:
        raise DataError("fit_standardizer needs at least one training record")
    past = ChannelStats.fit(np.concatenate([past_channels(r) for r in records]))
    buildings = sorted({r.building_id for r in records})
    missing = [b for b in buildings if b not in statics]
    if missing:
        raise DataError(f"no statics for buildings: {', '.join(missing)}")
    static = ChannelStats.fit(np.stack([statics[b].to_vector() for b in buildings]))
    return Standardizer(past=past, static=static, forecast_weather=forecast_weather)


# windows ----------------------------------------------------------------

def window_batch(
    record: TimeSeriesRecord,
    static: BuildingStatic,
    std: Standardizer,
    n: int,
    targets: np.ndarray | None = None,
) -> WindowBatch:
    """Vectorized window assembly for target indices ``targets`` (default: all of ``n..len-1``)."""
    L = len(record)
    if n < 2:
        raise ContractError(f"context length must be >= 2, got {n}")
    if L < n + 1:
        raise InsufficientDataError(f"record {record.key} has {L} rows; context {n} needs at least {n + 1}")
    t = np.arange(n, L) if targets is None else np.asarray(targets, dtype=np.int64)
    if t.size and (t.min() < n or t.max() >= L):
        raise ContractError(f"target indices must lie in [{n}, {L})")

    raw = record.raw_matrix()
    rows = t[:, None] + np.arange(-n, 0)[None, :]  # [N, n]
    win = raw[rows]  # [N, n, 5]
    deriv = np.empty_like(win)
    if n == 2:
        deriv[:] = (win[:, 1:2] - win[:, 0:1]) / DT_HOURS
    else:
        deriv[:, 1:-1] = (win[:, 2:] - win[:, :-2]) / (2 * DT_HOURS)
        deriv[:, 0] = (win[:, 1] - win[:, 0]) / DT_HOURS
        deriv[:, -1] = (win[:, -1] - win[:, -2]) / DT_HOURS
    past = std.past.apply(np.concatenate([win, deriv], axis=2))

    weather = None
    if std.forecast_weather:
        weather = np.stack([record.t_out[t], record.solar[t]], axis=1)
        weather = (weather - std.past.mean[1:3]) / std.past.std[1:3]
    future = _calendar(record.timestamps[t], weather)

    N = len(t)
    static_z = np.broadcast_to(std.static.apply(static.to_vector()), (N, len(STATIC_FIELDS))).copy()
    t_prev = record.t_in[t - 1]
    return WindowBatch(
        past=past,
        static=static_z,
        future=future,
        t_prev=t_prev.copy(),
        target_delta=record.t_in[t] - t_prev,
        building_id=np.full(N, record.building_id, dtype=object),
        hvac_mode=np.full(N, record.hvac_mode, dtype=np.int64),
        climate=np.full(N, record.climate, dtype=object),
        target_index=t.copy(),
        timestamp=record.timestamps[t].copy(),
    )


def assemble_windows(
    record: TimeSeriesRecord, static: BuildingStatic, std: Standardizer, n: int
) -> list[WindowSample]:
    """One :class:`WindowSample` per target index ``t`` in ``[n, len(record))``."""
    batch = window_batch(record, static, std, n)
    return [batch[i] for i in range(len(batch))]


def stack_samples(samples: Iterable[WindowSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    samples = list(samples)
    return (
        np.stack([s.past for s in samples]),
        np.stack([s.static for s in samples]),
        np.stack([s.future for s in samples]),
    )
