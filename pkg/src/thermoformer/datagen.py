"""Single-zone 1R1C building simulator and CSV ingestion.

The zone obeys ``C dT/dt = (T_out - T)/R + q_solar + q_occ + q_hvac``,
integrated with explicit Euler substeps of 6 minutes and reported hourly.

Building parameters are tied to the descriptors:

* geometry: single storey, 2.7 m high, ``length = sqrt(A * aspect)``,
  ``width = sqrt(A / aspect)``; gross wall area ``2 (length + width) 2.7``
* ``UA = opaque_wall / wall_r + A / roof_r + 2.8 * window_area + infiltration``
  with 0.35 air changes per hour at 1200 J/(m3 K); ``R = 1 / UA``
* ``C = 165 kJ/(m2 K) * A``
* ``solar_aperture = 0.5 * 0.15 * gross_wall`` so that
  ``q_solar = solar_aperture * irradiance * wwr``
* ``q_occ = internal_gain_density * A * schedule[hour]``
* ``hvac_capacity = 1.2 * UA * 25 K``

HVAC modes:

1. modulating thermostat, full output 1 K past the setpoint, capacity-limited
2. ideal loads: exactly the power that keeps T inside the setpoint band
3. mode-2 load clipped to ``0.6 * hvac_capacity``
4. free floating
5. mode-2 load scaled each hour by a factor drawn from U(0.3, 1.7) with
   probability 0.6 (factor 1 otherwise)
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericFault, SchemaError
from .features import RAW_CHANNELS, BuildingStatic, TimeSeriesRecord, dump_statics

SUBSTEPS = 10
SUBSTEP_SECONDS = 3600.0 / SUBSTEPS
WARMUP_HOURS = 48
CSV_HEADER = ("timestamp", "building_id", "hvac_mode", "climate", "t_in", "t_out", "solar", "q_hvac", "q_occ")
DEFAULT_START = "2023-01-01T00:00:00"

STATIC_RANGES = {
    "floor_area": (80.0, 250.0),
    "aspect_ratio": (1.0, 3.0),
    "wwr": (0.1, 0.4),
    "wall_r": (1.0, 5.0),
    "roof_r": (2.0, 8.0),
    "internal_gain_density": (2.0, 8.0),
}

# fraction of peak internal gains by hour of day (hour 0 = 00:00-01:00)
OCCUPANCY_SCHEDULE = (
    0.5, 0.5, 0.5, 0.5, 0.5, 0.6, 0.8, 0.9, 0.7, 0.4, 0.3, 0.3,
    0.3, 0.3, 0.3, 0.4, 0.5, 0.8, 1.0, 1.0, 0.9, 0.8, 0.7, 0.6,
)

STOREY_HEIGHT = 2.7
WINDOW_U = 2.8
ACH = 0.35
AIR_HEAT_CAPACITY = 1200.0  # J/(m3 K)
AREAL_CAPACITANCE = 165e3  # J/(m2 K)
SHGC = 0.5
SUNLIT_FRACTION = 0.15
DESIGN_DELTA_T = 25.0
MODE1_BAND = 1.0
MODE3_CAPACITY_FRACTION = 0.6
MODE5_RANGE = (0.3, 1.7)
MODE5_PROBABILITY = 0.6


def derive_seed(root: int, *names) -> int:
    """Stable 63-bit seed from a root seed and component names."""
    h = hashlib.sha256(":".join([str(int(root))] + [str(n) for n in names]).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


@dataclass(frozen=True)
class ClimateProfile:
    region: str
    t_mean: float
    seasonal_amp: float
    diurnal_amp: float
    noise_std: float
    solar_peak: float
    solar_seasonal: float

    def __post_init__(self):
        for k in ("seasonal_amp", "diurnal_amp", "noise_std", "solar_peak", "solar_seasonal"):
            if getattr(self, k) < 0:
                raise ConfigError(f"climate {self.region}: {k} must be >= 0")


CLIMATES = {
    "hot-humid": ClimateProfile("hot-humid", 20.0, 10.0, 5.0, 1.5, 850.0, 0.25),
    "marine": ClimateProfile("marine", 15.0, 4.0, 4.0, 1.0, 700.0, 0.4),
    "cold": ClimateProfile("cold", 8.0, 14.0, 6.0, 2.0, 650.0, 0.5),
}


def get_climate(tag: str) -> ClimateProfile:
    try:
        return CLIMATES[tag]
    except KeyError:
        raise ConfigError(f"unknown climate {tag!r}; choose from {sorted(CLIMATES)}") from None


@dataclass(frozen=True)
class RcBuilding:
    building_id: str
    static: BuildingStatic
    capacitance: float
    resistance: float
    solar_aperture: float
    setpoint_heat: float
    setpoint_cool: float
    hvac_capacity: float

    def __post_init__(self):
        if not (self.capacitance > 0 and self.resistance > 0):
            raise ConfigError(f"{self.building_id}: C and R must be positive")
        if self.hvac_capacity < 0:
            raise ConfigError(f"{self.building_id}: hvac_capacity must be >= 0")
        if not self.setpoint_heat < self.setpoint_cool:
            raise ConfigError(f"{self.building_id}: setpoint_heat must be below setpoint_cool")
        if not SUBSTEP_SECONDS < self.resistance * self.capacitance / 2:
            raise ConfigError(f"{self.building_id}: Euler substep unstable for RC = {self.resistance * self.capacitance:.0f} s")

    @property
    def time_constant_hours(self) -> float:
        return self.resistance * self.capacitance / 3600.0


def building_from_static(
    building_id: str, static: BuildingStatic, setpoint_heat: float = 20.0, setpoint_cool: float = 24.0
) -> RcBuilding:
    length = math.sqrt(static.floor_area * static.aspect_ratio)
    width = math.sqrt(static.floor_area / static.aspect_ratio)
    wall = 2 * (length + width) * STOREY_HEIGHT
    window = static.wwr * wall
    volume = static.floor_area * STOREY_HEIGHT
    ua = (
        (wall - window) / static.wall_r
        + static.floor_area / static.roof_r
        + WINDOW_U * window
        + ACH * volume * AIR_HEAT_CAPACITY / 3600.0
    )
    return RcBuilding(
        building_id=building_id,
        static=static,
        capacitance=AREAL_CAPACITANCE * static.floor_area,
        resistance=1.0 / ua,
        solar_aperture=SHGC * SUNLIT_FRACTION * wall,
        setpoint_heat=setpoint_heat,
        setpoint_cool=setpoint_cool,
        hvac_capacity=1.2 * ua * DESIGN_DELTA_T,
    )


def sample_buildings(n: int, climate: ClimateProfile | str, seed: int) -> list[RcBuilding]:
    if n < 1:
        raise ConfigError(f"need at least one building, got {n}")
    climate = get_climate(climate) if isinstance(climate, str) else climate
    rng = np.random.default_rng(derive_seed(seed, "buildings", climate.region))
    out = []
    for i in range(n):
        draws = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in STATIC_RANGES.items()}
        sp_heat = float(rng.uniform(19.0, 21.0))
        sp_cool = float(rng.uniform(23.5, 25.5))
        bid = f"{climate.region}-{i:03d}"
        out.append(building_from_static(bid, BuildingStatic(**draws), sp_heat, sp_cool))
    return out


# weather ----------------------------------------------------------------

def hourly_timestamps(start, hours: int) -> np.ndarray:
    return np.datetime64(start, "s") + np.arange(hours) * np.timedelta64(3600, "s")


def weather(climate: ClimateProfile, timestamps: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Outdoor temperature (°C) and horizontal irradiance (W/m²) at each timestamp."""
    ts = np.asarray(timestamps, dtype="datetime64[s]")
    day = ts.astype("datetime64[D]")
    hour = (ts - day).astype(np.int64) / 3600.0
    doy = (day - day.astype("datetime64[Y]")).astype(np.int64) + 1
    rng = np.random.default_rng(derive_seed(seed, "weather", climate.region))

    seasonal = -climate.seasonal_amp * np.cos(2 * math.pi * (doy - 15) / 365.0)
    diurnal = -climate.diurnal_amp * np.cos(2 * math.pi * (hour - 3) / 24.0)
    phi = 0.9
    shocks = rng.normal(0.0, climate.noise_std * math.sqrt(1 - phi**2), size=len(ts))
    noise = np.empty(len(ts))
    state = rng.normal(0.0, climate.noise_std) if len(ts) else 0.0
    for i, s in enumerate(shocks):
        state = phi * state + s
        noise[i] = state
    t_out = climate.t_mean + seasonal + diurnal + noise

    season = (1 + climate.solar_seasonal * np.cos(2 * math.pi * (doy - 172) / 365.0)) / (1 + climate.solar_seasonal)
    day_index = (day - day[0]).astype(np.int64) if len(ts) else np.zeros(0, dtype=np.int64)
    clouds = rng.uniform(0.4, 1.0, size=int(day_index.max()) + 1 if len(ts) else 0)
    sun = np.maximum(0.0, np.sin(math.pi * (hour - 6) / 12.0))
    solar = climate.solar_peak * sun * season * (clouds[day_index] if len(ts) else 1.0)
    return t_out, solar


def mode5_scale_factors(hours: int, seed: int, building_id: str = "") -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, "mode5", building_id))
    deviate = rng.random(hours) < MODE5_PROBABILITY
    factors = rng.uniform(*MODE5_RANGE, size=hours)
    return np.where(deviate, factors, 1.0)


# simulation -------------------------------------------------------------

def simulate(
    building: RcBuilding,
    climate: ClimateProfile | str,
    hvac_mode: int,
    hours: int,
    seed: int,
    *,
    start=DEFAULT_START,
    occupancy_schedule: Sequence[float] = OCCUPANCY_SCHEDULE,
    initial_temperature: float | None = None,
    warmup_hours: int = WARMUP_HOURS,
) -> TimeSeriesRecord:
    """Integrate the zone and report ``hours`` hourly rows starting at ``start``."""
    if hvac_mode not in (1, 2, 3, 4, 5):
        raise ConfigError(f"unknown hvac mode {hvac_mode}")
    if hours < 72:
        raise ConfigError(f"simulate needs at least 72 hours, got {hours}")
    climate = get_climate(climate) if isinstance(climate, str) else climate
    if len(occupancy_schedule) != 24:
        raise ConfigError("occupancy schedule needs 24 hourly fractions")

    total = hours + warmup_hours
    stamps = hourly_timestamps(np.datetime64(start, "s") - np.timedelta64(3600 * warmup_hours, "s"), total)
    t_out_h, solar_h = weather(climate, stamps, seed)
    hour_of_day = ((stamps - stamps.astype("datetime64[D]")).astype(np.int64) // 3600).astype(int)
    schedule = np.asarray(occupancy_schedule, dtype=np.float64)
    factors = mode5_scale_factors(total, seed, building.building_id) if hvac_mode == 5 else None

    b = building
    s = b.static
    k = SUBSTEP_SECONDS / b.capacitance
    ua = 1.0 / b.resistance
    occ_peak = s.internal_gain_density * s.floor_area
    T = 0.5 * (b.setpoint_heat + b.setpoint_cool) if initial_temperature is None else float(initial_temperature)

    t_in = np.empty(total)
    q_hvac = np.empty(total)
    q_occ = np.empty(total)
    t_in[0] = T
    q_hvac[0] = 0.0
    q_occ[0] = occ_peak * schedule[(hour_of_day[0] - 1) % 24]
    fr = (np.arange(SUBSTEPS) + 0.5) / SUBSTEPS
    for h in range(1, total):
        # hour (h-1, h]: weather interpolated at substep midpoints
        t_out_sub = t_out_h[h - 1] + fr * (t_out_h[h] - t_out_h[h - 1])
        solar_sub = solar_h[h - 1] + fr * (solar_h[h] - solar_h[h - 1])
        q_o = occ_peak * schedule[hour_of_day[h - 1]]
        acc = 0.0
        for j in range(SUBSTEPS):
            gains = ua * (t_out_sub[j] - T) + b.solar_aperture * solar_sub[j] * s.wwr + q_o
            if hvac_mode == 4:
                q = 0.0
            elif hvac_mode == 1:
                q = b.hvac_capacity * (
                    min(max((b.setpoint_heat - T) / MODE1_BAND, 0.0), 1.0)
                    - min(max((T - b.setpoint_cool) / MODE1_BAND, 0.0), 1.0)
                )
            else:
                t_free = T + k * gains
                if t_free < b.setpoint_heat:
                    q = (b.setpoint_heat - t_free) / k
                elif t_free > b.setpoint_cool:
                    q = (b.setpoint_cool - t_free) / k
                else:
                    q = 0.0
                if hvac_mode == 3:
                    cap = MODE3_CAPACITY_FRACTION * b.hvac_capacity
                    q = min(max(q, -cap), cap)
                elif hvac_mode == 5:
                    q *= factors[h - 1]
            if hvac_mode == 2 and q != 0.0:
                T = b.setpoint_heat if q > 0 else b.setpoint_cool
            else:
                T = T + k * (gains + q)
            acc += q
        if not math.isfinite(T):
            raise NumericFault(f"{b.building_id} mode {hvac_mode}: non-finite temperature at hour {h}")
        t_in[h] = T
        q_hvac[h] = acc / SUBSTEPS
        q_occ[h] = q_o

    keep = slice(warmup_hours, total)
    return TimeSeriesRecord(
        building_id=b.building_id,
        hvac_mode=hvac_mode,
        climate=climate.region,
        timestamps=stamps[keep],
        t_in=t_in[keep],
        t_out=t_out_h[keep],
        solar=solar_h[keep],
        q_hvac=q_hvac[keep],
        q_occ=q_occ[keep],
    )


# datasets ---------------------------------------------------------------

@dataclass
class Dataset:
    records: list[TimeSeriesRecord]
    statics: dict[str, BuildingStatic]
    buildings: dict[str, RcBuilding]

    def record(self, building_id: str, mode: int) -> TimeSeriesRecord:
        for r in self.records:
            if r.building_id == building_id and r.hvac_mode == mode:
                return r
        raise KeyError((building_id, mode))


def generate_dataset(
    counts: Mapping[str, int],
    modes: Sequence[int] = (1, 2, 3, 4, 5),
    hours: int = 24 * 30,
    seed: int = 0,
    *,
    start=DEFAULT_START,
    out_dir=None,
) -> Dataset:
    """Simulate every (building, mode) pair. Weather is shared by all buildings of a climate."""
    for tag, n in counts.items():
        get_climate(tag)
        if n < 1:
            raise ConfigError(f"climate {tag}: need at least one building, got {n}")
    records, statics, buildings = [], {}, {}
    for tag in sorted(counts):
        climate = CLIMATES[tag]
        for b in sample_buildings(counts[tag], climate, seed):
            buildings[b.building_id] = b
            statics[b.building_id] = b.static
            for mode in modes:
                records.append(simulate(b, climate, mode, hours, seed, start=start))
    ds = Dataset(records, statics, buildings)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def record_filename(record: TimeSeriesRecord) -> str:
    return f"{record.building_id}_mode{record.hvac_mode}.csv"


def record_to_csv(record: TimeSeriesRecord) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_HEADER) + "\n")
    stamps = np.datetime_as_string(record.timestamps, unit="s")
    cols = [getattr(record, c) for c in RAW_CHANNELS]
    for i, ts in enumerate(stamps):
        vals = ",".join(repr(float(c[i])) for c in cols)
        buf.write(f"{ts},{record.building_id},{record.hvac_mode},{record.climate},{vals}\n")
    return buf.getvalue()


def write_dataset(ds: Dataset, out_dir) -> dict[str, str]:
    """Write one CSV per record plus ``statics.json``; return sha256 per file name."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for r in ds.records:
        text = record_to_csv(r).encode("utf-8")
        (out / record_filename(r)).write_bytes(text)
        hashes[record_filename(r)] = hashlib.sha256(text).hexdigest()
    dump_statics(ds.statics, out / "statics.json")
    hashes["statics.json"] = hashlib.sha256((out / "statics.json").read_bytes()).hexdigest()
    return hashes


def ingest_csv(path) -> TimeSeriesRecord:
    """Parse and validate one record CSV (header must contain every schema column)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in CSV_HEADER:
            if col not in header:
                raise SchemaError(f"{path.name}: missing column {col!r}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path.name}: no data rows")

    ids = {r["building_id"] for r in rows}
    modes = {r["hvac_mode"] for r in rows}
    climates = {r["climate"] for r in rows}
    if len(ids) != 1 or len(modes) != 1 or len(climates) != 1:
        raise DataError(f"{path.name}: a record file must hold exactly one building, mode and climate")

    values = {c: np.empty(len(rows)) for c in RAW_CHANNELS}
    stamps = []
    for i, row in enumerate(rows):
        try:
            stamps.append(np.datetime64(row["timestamp"], "s"))
        except ValueError:
            raise DataError(f"{path.name}: bad timestamp {row['timestamp']!r} in row {i}") from None
        for c in RAW_CHANNELS:
            try:
                v = float(row[c])
            except (TypeError, ValueError):
                raise DataError(f"{path.name}: non-numeric {c} in row {i}") from None
            if not math.isfinite(v):
                raise DataError(f"{path.name}: non-finite {c} in row {i}")
            values[c][i] = v
    stamps = np.array(stamps, dtype="datetime64[s]")
    steps = np.diff(stamps).astype(np.int64)
    if (steps <= 0).any():
        bad = int(np.argmax(steps <= 0)) + 1
        raise DataError(f"{path.name}: timestamps not monotonic at row {bad}")
    if (steps != 3600).any():
        bad = int(np.argmax(steps != 3600)) + 1
        raise DataError(f"{path.name}: timestamps not hourly at row {bad}")
    try:
        mode = int(modes.pop())
    except ValueError:
        raise DataError(f"{path.name}: hvac_mode is not an integer") from None
    return TimeSeriesRecord(
        building_id=ids.pop(), hvac_mode=mode, climate=climates.pop(), timestamps=stamps, **values
    )


def load_dataset(data_dir) -> tuple[list[TimeSeriesRecord], dict[str, BuildingStatic]]:
    from .features import load_statics

    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"dataset directory {data_dir} does not exist")
    statics_path = data_dir / "statics.json"
    if not statics_path.exists():
        raise DataError(f"{data_dir} has no statics.json")
    statics = load_statics(statics_path)
    records = [ingest_csv(p) for p in sorted(data_dir.glob("*.csv"))]
    if not records:
        raise DataError(f"{data_dir} holds no record CSVs")
    return records, statics


def building_metadata(b: RcBuilding) -> dict:
    d = asdict(b)
    d["time_constant_hours"] = b.time_constant_hours
    return d
