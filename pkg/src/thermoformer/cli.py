"""Command-line entry point: simulate, train, evaluate, transfer, sweep.

Configuration is one JSON file merged over built-in defaults, then flat overrides of
the form ``--section.key=value`` (values parsed as JSON, falling back to strings).
Every random stream derives from the root ``seed`` via ``derive_seed(seed, component)``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numeric fault.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

from threadpoolctl import threadpool_limits

from .datagen import CLIMATES, DEFAULT_START, derive_seed, generate_dataset, get_climate, load_dataset, write_dataset
from .errors import ConfigError, DataError, ThermoformerError
from .evaluation import BASELINES, SplitSpec, evaluate, make_splits, nested_building_subsets, training_batches, transfer_matrix
from .model import Checkpoint, ModelConfig, init_params, make_checkpoint
from .training import TrainConfig, TrainResult, train

logger = logging.getLogger("thermoformer")

FORMAT_VERSION = 1


def default_config() -> dict:
    train_defaults = asdict(TrainConfig())
    del train_defaults["seed"]
    return {
        "seed": 0,
        "data": {
            "climates": {tag: 10 for tag in sorted(CLIMATES)},
            "hours": 4380,
            "start": DEFAULT_START,
            "modes": [1, 2, 3, 4, 5],
        },
        "features": {"forecast_weather": False},
        "model": asdict(ModelConfig()),
        "train": train_defaults,
        "split": {"test_mode": 1, "val_fraction": 0.10, "train_buildings": None, "climate": None},
        "sweep": {"counts": [1, 2, 4, 8]},
        "paths": {"data_dir": None, "out_dir": None},
    }


# configuration ------------------------------------------------------------

def _merge(base: dict, update: dict, where: str = "") -> dict:
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and key != "climates":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items: Sequence[str]) -> dict:
    """``--model.hidden_dim=32`` style flags into a nested dict."""
    out: dict = {}
    for item in items:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"unrecognized argument {item!r}; overrides look like --section.key=value")
        key, value = item[2:].split("=", 1)
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
    return out


def resolve_config(path: str | None, overrides: Sequence[str] = ()) -> dict:
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            loaded = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from None
        loaded.pop("format_version", None)
        _merge(cfg, loaded)
    _merge(cfg, parse_overrides(overrides))
    validate_config(cfg)
    return cfg


def _build(cls, section: dict, name: str, **extra):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    try:
        return cls(**section, **extra)
    except TypeError as e:
        raise ConfigError(f"invalid {name} section: {e}") from None


def model_config(cfg: dict) -> ModelConfig:
    return _build(ModelConfig, cfg["model"], "model")


def train_config(cfg: dict) -> TrainConfig:
    return _build(TrainConfig, cfg["train"], "train", seed=derive_seed(cfg["seed"], "train"))


def split_spec(cfg: dict) -> SplitSpec:
    s = dict(cfg["split"])
    s.pop("climate")
    tb = s.pop("train_buildings")
    return SplitSpec(seed=derive_seed(cfg["seed"], "split"), train_buildings=None if tb is None else tuple(tb), **s)


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    data = cfg["data"]
    if not isinstance(data["climates"], dict) or not data["climates"]:
        raise ConfigError("data.climates must map climate tags to building counts")
    for tag, n in data["climates"].items():
        get_climate(tag)
        if not isinstance(n, int) or n < 1:
            raise ConfigError(f"data.climates.{tag} must be a positive integer")
    if not isinstance(data["hours"], int) or data["hours"] < 72:
        raise ConfigError("data.hours must be an integer >= 72")
    if not set(data["modes"]) <= {1, 2, 3, 4, 5} or not data["modes"]:
        raise ConfigError("data.modes must be a nonempty subset of 1-5")
    if not isinstance(cfg["features"]["forecast_weather"], bool):
        raise ConfigError("features.forecast_weather must be true or false")
    if cfg["split"]["climate"] is not None:
        get_climate(cfg["split"]["climate"])
    counts = cfg["sweep"]["counts"]
    if not counts or any(not isinstance(c, int) or c < 1 for c in counts):
        raise ConfigError("sweep.counts must be positive integers")
    model_config(cfg)
    train_config(cfg)
    split_spec(cfg)


def write_snapshot(cfg: dict, out_dir: Path) -> None:
    snap = copy.deepcopy(cfg)
    snap["format_version"] = FORMAT_VERSION
    (out_dir / "resolved_config.json").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")



def _out_dir(args, cfg) -> Path:
    out = args.out or cfg["paths"]["out_dir"]
    if out is None:
        raise ConfigError("no output directory: pass --out or set paths.out_dir")
    cfg["paths"]["out_dir"] = str(out)
    p = Path(out)
    data = getattr(args, "data", None) and cfg["paths"]["data_dir"]
    if data and Path(data).resolve() == p.resolve():
        raise ConfigError("output directory must differ from the dataset directory")
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {p}: {e}") from None
    return p


def _data_dir(args, cfg) -> Path:
    d = args.data or cfg["paths"]["data_dir"]
    if d is None:
        raise ConfigError("no dataset directory: pass --data or set paths.data_dir")
    cfg["paths"]["data_dir"] = str(d)
    return Path(d)


def _select_climate(records, cfg):
    climate = cfg["split"]["climate"]
    if climate is None:
        return records
    chosen = [r for r in records if r.climate == climate]
    if not chosen:
        raise DataError(f"dataset has no records for climate {climate}")
    return chosen


# pipeline -----------------------------------------------------------------

def fit_checkpoint(records, statics, spec: SplitSpec, mc: ModelConfig, tc: TrainConfig, forecast_weather: bool = False, on_epoch=None) -> tuple[Checkpoint, TrainResult]:
    """Split, standardize, train and package the best-validation parameters."""
    splits = make_splits(records, spec, mc.context_length)
    std, tr, va = training_batches(records, statics, splits, mc.context_length, forecast_weather)
    if std.n_future != mc.future_dim:
        raise ConfigError(
            f"model.future_dim is {mc.future_dim} but the feature settings produce {std.n_future} future covariates"
        )
    params = init_params(mc, seed=derive_seed(tc.seed, "init"))
    result = train(tr, va, mc, tc, params=params, on_epoch=on_epoch)
    train_keys = sorted(splits.train)
    meta = {
        "train_climates": sorted({r.climate for r in records if r.key in set(train_keys)}),
        "train_buildings": sorted({k[0] for k in train_keys}),
        "split": {"test_mode": spec.test_mode, "val_fraction": spec.val_fraction, "seed": spec.seed},
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "epochs_run": len(result.log),
    }
    return make_checkpoint(result.params, mc, std, meta), result


def spec_from_checkpoint(ck: Checkpoint, cfg: dict) -> SplitSpec:
    """Target buildings and split seed as used when the checkpoint was trained."""
    s = ck.meta.get("split", {})
    base = split_spec(cfg)
    return SplitSpec(
        test_mode=s.get("test_mode", base.test_mode),
        val_fraction=s.get("val_fraction", base.val_fraction),
        seed=s.get("seed", base.seed),
        train_buildings=tuple(ck.meta["train_buildings"]) if "train_buildings" in ck.meta else base.train_buildings,
    )


def check_compatible(ck: Checkpoint, cfg: dict, explicit_model: dict) -> None:
    if ck.standardizer.forecast_weather != cfg["features"]["forecast_weather"]:
        raise ConfigError(
            f"checkpoint was trained with forecast_weather={ck.standardizer.forecast_weather} "
            f"({ck.standardizer.n_future} future channels) but the config sets "
            f"forecast_weather={cfg['features']['forecast_weather']}"
        )
    ck_model = asdict(ck.config)
    for key, value in explicit_model.items():
        if key in ck_model and ck_model[key] != value:
            raise ConfigError(f"config model.{key}={value!r} disagrees with checkpoint value {ck_model[key]!r}")


def _load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint {p} does not exist")
    return Checkpoint.load(p)


# commands -----------------------------------------------------------------

def cmd_simulate(args, cfg) -> int:
    out = _out_dir(args, cfg)
    data = cfg["data"]
    ds = generate_dataset(data["climates"], modes=tuple(data["modes"]), hours=data["hours"], seed=cfg["seed"], start=data["start"])
    hashes = write_dataset(ds, out)
    manifest = {
        "seed": cfg["seed"],
        "counts": data["climates"],
        "hours": data["hours"],
        "modes": data["modes"],
        "start": data["start"],
        "files": hashes,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_snapshot(cfg, out)
    print(f"wrote {len(ds.records)} records for {len(ds.statics)} buildings to {out}")
    return 0


def cmd_train(args, cfg) -> int:
    data_dir = _data_dir(args, cfg)
    out = _out_dir(args, cfg)
    records, statics = load_dataset(data_dir)
    records = _select_climate(records, cfg)
    ck, result = fit_checkpoint(
        records, statics, split_spec(cfg), model_config(cfg), train_config(cfg), cfg["features"]["forecast_weather"]
    )
    digest = ck.save(out / "model.ckpt")
    (out / "train_log.csv").write_text(result.log_csv())
    write_snapshot(cfg, out)
    print(f"best epoch {result.best_epoch} val mse {result.best_val_loss:.6g}; checkpoint sha256 {digest}")
    return 0


def cmd_evaluate(args, cfg, explicit_model: dict) -> int:
    data_dir = _data_dir(args, cfg)
    ck = _load_checkpoint(args.checkpoint)
    check_compatible(ck, cfg, explicit_model)
    out = _out_dir(args, cfg)
    records, statics = load_dataset(data_dir)
    records = _select_climate(records, cfg)
    report = evaluate(ck, records, statics, spec_from_checkpoint(ck, cfg), baselines=tuple(args.baseline or ()))
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    pooled = report.summary.get("test", {}).get("pooled", {}).get("model")
    if pooled:
        print(f"test rmse {pooled['rmse']:.4f} C over {pooled['n_windows']} windows")
    return 0


def cmd_transfer(args, cfg) -> int:
    paths = list(args.checkpoint or [])
    if len(paths) < 2:
        raise ConfigError("transfer needs at least 2 checkpoints (--checkpoint A --checkpoint B)")
    data_dir = _data_dir(args, cfg)
    out = _out_dir(args, cfg)
    checkpoints: dict = {}
    for p in paths + ([args.multi] if args.multi else []):
        if not Path(p).exists():
            logger.warning("checkpoint %s not found; its row is marked absent", p)
            checkpoints[Path(p).stem] = None
            continue
        ck = Checkpoint.load(p)
        label = "+".join(ck.meta.get("train_climates", [])) or Path(p).stem
        if label in checkpoints:
            raise ConfigError(f"two checkpoints share the label {label!r}")
        checkpoints[label] = ck
    records, statics = load_dataset(data_dir)
    mat = transfer_matrix(checkpoints, records, statics, test_mode=cfg["split"]["test_mode"])
    (out / "transfer.csv").write_text(mat.to_csv())
    (out / "transfer.json").write_text(mat.to_json() + "\n")
    print(mat.to_csv(), end="")
    return 0


def cmd_sweep(args, cfg) -> int:
    data_dir = _data_dir(args, cfg)
    out = _out_dir(args, cfg)
    records, statics = load_dataset(data_dir)
    records = _select_climate(records, cfg)
    counts = cfg["sweep"]["counts"]
    subsets = nested_building_subsets(sorted({r.building_id for r in records}), counts, derive_seed(cfg["seed"], "sweep"))
    base = split_spec(cfg)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["count", "building_id", "climate", "split", "is_target", "rmse", "mape", "n_windows"])
    summary = {}
    for count in sorted(subsets):
        spec = SplitSpec(base.test_mode, base.val_fraction, base.seed, subsets[count])
        ck, result = fit_checkpoint(records, statics, spec, model_config(cfg), train_config(cfg), cfg["features"]["forecast_weather"])
        sub = out / f"n{count}"
        sub.mkdir(exist_ok=True)
        summary[count] = {"buildings": list(subsets[count]), "sha256": ck.save(sub / "model.ckpt")}
        (sub / "train_log.csv").write_text(result.log_csv())
        report = evaluate(ck, records, statics, spec)
        for split in ("validation", "test"):
            for bid, m in sorted(report.summary.get(split, {}).get("per_building", {}).items()):
                mm = m["model"]
                w.writerow([count, bid, m["climate"], split, m["is_target"], repr(mm["rmse"]), "" if mm["mape"] is None else repr(mm["mape"]), mm["n_windows"]])
    (out / "sweep.csv").write_text(buf.getvalue())
    (out / "sweep.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_snapshot(cfg, out)
    print(f"trained {len(subsets)} models; results in {out / 'sweep.csv'}")
    return 0


# entry point --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="thermoformer", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True, out=True):
        p.add_argument("--config", help="JSON config file merged over the defaults")
        if data:
            p.add_argument("--data", help="dataset directory (overrides paths.data_dir)")
        if out:
            p.add_argument("--out", help="output directory (overrides paths.out_dir)")

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    common(p, data=False)
    p = sub.add_parser("train", help="train one model")
    common(p)
    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline", action="append", choices=BASELINES, help="add baseline columns (repeatable)")
    p = sub.add_parser("transfer", help="cross-climate zero-shot matrix")
    common(p)
    p.add_argument("--checkpoint", action="append", help="single-climate checkpoint (repeat for each)")
    p.add_argument("--multi", help="optional multi-climate checkpoint added as an extra row")
    p = sub.add_parser("sweep", help="train on nested building subsets")
    common(p)
    return parser


def _thread_limit() -> int | None:
    raw = os.environ.get("THERMOFORMER_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"THERMOFORMER_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"THERMOFORMER_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, extra)
        explicit_model = {}
        if args.config:
            explicit_model.update(json.loads(Path(args.config).read_text()).get("model", {}))
        explicit_model.update(parse_overrides(extra).get("model", {}))
        handlers = {
            "simulate": lambda: cmd_simulate(args, cfg),
            "train": lambda: cmd_train(args, cfg),
            "evaluate": lambda: cmd_evaluate(args, cfg, explicit_model),
            "transfer": lambda: cmd_transfer(args, cfg),
            "sweep": lambda: cmd_sweep(args, cfg),
        }
        with threadpool_limits(limits=_thread_limit()):
            return handlers[args.command]()
    except ThermoformerError as e:
        print(f"thermoformer: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"thermoformer: error: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
