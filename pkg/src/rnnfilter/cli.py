"""Command-line entry point: generate, train, evaluate, reproduce.

Every run is reproducible from one experiment seed. Stream splitting:
dataset sequence i uses seed ``seed + i``; each architecture's training run
(parameter init and epoch shuffling) is seeded from
``SeedSequence([seed, ARCH_CODE])``; the out-of-region test set from
``SeedSequence([seed, OOR_CODE])``. Progress goes to stderr; machine-readable
results live only in the output files.

Exit status: 0 success, 1 usage error, 2 missing/malformed artifacts or I/O
failure, 3 numerical divergence.
"""

import argparse
from dataclasses import dataclass, fields, replace
import json
import os
import sys

import numpy as np

from .dynamics import (SYSTEM_NAMES, generate_dataset, get_model,
                       load_dataset, save_dataset)
from .errors import (DatasetFormatError, DivergedTrainingError,
                     IntegrationDivergedError, InvalidModelError,
                     SingularInnovationError)
from .evaluation import (FilterEstimator, NetworkEstimator, evaluate,
                         oor_region, out_of_region_testset,
                         write_error_curve_csv, write_summary_csv)
from .filters import EKF, KF
from .networks import (ARCHITECTURES, NetworkConfig, load_checkpoint,
                       save_checkpoint)
from .training import (TrainConfig, desk_scale_length, preset_configs,
                       train, write_train_log)

_ARCH_SEED_CODES = {"jlstm": 1, "elstm": 2, "ern": 3, "jrn": 4}
_OOR_SEED_CODE = 5

MIN_SEQUENCE_COUNT = 10


class UsageError(Exception):
    pass


@dataclass
class ExperimentSpec:
    """Merged configuration of one CLI invocation (defaults, config file,
    flags; flags win)."""

    system: str = None
    seed: int = 0
    sequence_count: int = 100
    sequence_length: int = None
    hidden: int = None
    max_epochs: int = None
    batch_size: int = None
    patience: int = None
    learning_rate: float = None
    truncation_window: int = None
    out: str = None
    data: str = None
    threads: int = None
    desk_scale: bool = False
    arch: str = None
    estimators: str = None
    checkpoints: list = None
    oor: bool = False


def _load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path!r} must hold a JSON object")
    known = {f.name for f in fields(ExperimentSpec)}
    unknown = set(doc) - known
    if unknown:
        raise UsageError(f"config file {path!r} has unknown keys {sorted(unknown)}")
    return doc


def _build_spec(args):
    values = {}
    if getattr(args, "config", None):
        values.update(_load_config(args.config))
    for f in fields(ExperimentSpec):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    spec = ExperimentSpec(**values)
    if spec.system is None:
        raise UsageError("--system is required (or set it in --config)")
    if spec.system not in SYSTEM_NAMES:
        raise UsageError(f"unknown system {spec.system!r}; choose from {SYSTEM_NAMES}")
    if spec.threads is None:
        spec.threads = os.cpu_count() or 1
    if spec.out is None:
        spec.out = os.path.join("runs", spec.system)
    if spec.data is None:
        spec.data = os.path.join(spec.out, "dataset")
    return spec


def _derived_seed(seed, code):
    return int(np.random.SeedSequence([seed, code]).generate_state(1, np.uint64)[0])


def _status(msg):
    print(msg, file=sys.stderr, flush=True)


def _resolve_length(spec, model):
    if spec.sequence_length is not None:
        return spec.sequence_length
    if spec.desk_scale:
        return desk_scale_length(spec.system, model.default_length)
    return model.default_length


def _train_one(spec, dataset, arch):
    ncfg, tcfg = preset_configs(spec.system, desk_scale=spec.desk_scale)[arch]
    seed = _derived_seed(spec.seed, _ARCH_SEED_CODES[arch])
    ncfg = replace(ncfg, seed=seed)
    overrides = {"seed": seed}
    if spec.max_epochs is not None:
        overrides["max_epochs"] = spec.max_epochs
    if spec.batch_size is not None:
        overrides["batch_size"] = spec.batch_size
    if spec.patience is not None:
        overrides["patience"] = spec.patience
    if spec.learning_rate is not None:
        overrides["learning_rate"] = spec.learning_rate
    if spec.truncation_window is not None:
        overrides["truncation_window"] = spec.truncation_window
    tcfg = replace(tcfg, **overrides)
    if spec.hidden is not None:
        ncfg = replace(ncfg, hidden=spec.hidden)

    def progress(e):
        if e.epoch == 1 or e.epoch % 50 == 0:
            _status(f"[train {arch}] epoch {e.epoch} "
                    f"train {e.train_loss:.6g} val {e.val_loss:.6g}")

    params, record = train(dataset, ncfg, tcfg, threads=spec.threads,
                           progress=progress)
    _status(f"[train {arch}] stopped at epoch {record.stopped_epoch}, "
            f"best val {record.best_val_loss:.6g} (epoch {record.best_epoch})")
    return params, record


def _write_training_outputs(out_dir, system, params, record):
    os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, "checkpoint.json")
    save_checkpoint(params, ckpt, extra={
        "system": system,
        "train_seconds": record.wall_seconds,
        "best_epoch": record.best_epoch,
        "best_val_loss": record.best_val_loss,
        "stopped_epoch": record.stopped_epoch,
    })
    write_train_log(record, os.path.join(out_dir, "train_log.csv"))
    return ckpt


def cmd_generate(spec):
    if spec.sequence_count < MIN_SEQUENCE_COUNT:
        raise UsageError(
            f"--sequence-count must be >= {MIN_SEQUENCE_COUNT}, "
            f"got {spec.sequence_count}")
    model = get_model(spec.system)
    T = _resolve_length(spec, model)
    ds = generate_dataset(model, T=T, count=spec.sequence_count,
                          base_seed=spec.seed)
    save_dataset(ds, spec.data)
    _status(f"[generate] {spec.system}: {ds.count} sequences of length {T} "
            f"(splits {len(ds.train)}/{len(ds.val)}/{len(ds.test)}, "
            f"seed {spec.seed}) -> {spec.data}")
    return 0


def cmd_train(spec):
    if spec.arch not in ARCHITECTURES:
        raise UsageError(f"unknown arch {spec.arch!r}; choose from {ARCHITECTURES}")
    if spec.arch not in ("jlstm", "elstm"):
        raise UsageError("training presets cover the LSTM variants; "
                         "use --arch jlstm or --arch elstm")
    dataset = load_dataset(spec.data)
    if dataset.system.name != spec.system:
        raise DatasetFormatError(
            f"dataset at {spec.data!r} is for {dataset.system.name!r}, "
            f"not {spec.system!r}")
    params, record = _train_one(spec, dataset, spec.arch)
    out_dir = os.path.join(spec.out, f"train_{spec.arch}")
    ckpt = _write_training_outputs(out_dir, spec.system, params, record)
    _status(f"[train {spec.arch}] checkpoint -> {ckpt}")
    return 0


def _filter_kind(model):
    return KF if model.kind == "linear_zoh" else EKF


def _build_estimators(spec, model, checkpoint_paths):
    networks = {}
    for path in checkpoint_paths:
        params, extra = load_checkpoint(path)
        est = NetworkEstimator(params, model,
                               train_seconds=float(extra.get("train_seconds", 0.0)))
        networks[est.name] = est
    if spec.estimators is None:
        names = [_filter_kind(model)] + list(networks)
    else:
        names = [s.strip() for s in spec.estimators.split(",") if s.strip()]
    estimators = []
    for name in names:
        if name in (KF, EKF):
            if name != _filter_kind(model):
                raise UsageError(
                    f"{name} does not apply to the {model.name} system; "
                    f"use {_filter_kind(model)}")
            estimators.append(FilterEstimator(model, name))
        elif name in ARCHITECTURES:
            if name not in networks:
                raise DatasetFormatError(
                    f"no checkpoint given for requested estimator {name!r}")
            estimators.append(networks[name])
        else:
            raise UsageError(f"unknown estimator {name!r}")
    if not estimators:
        raise UsageError("no estimators selected")
    return estimators


def _write_reports(spec, model, dataset, estimators):
    report_dir = os.path.join(spec.out, "report")
    os.makedirs(report_dir, exist_ok=True)
    report = evaluate(model, dataset.test, estimators)
    oor_report = None
    if spec.oor:
        count = len(dataset.test)
        oor_set = out_of_region_testset(
            model, oor_region(model), count,
            _derived_seed(spec.seed, _OOR_SEED_CODE),
            T=dataset.test[0].length)
        oor_report = evaluate(model, oor_set, estimators)
    rows = []
    for est in estimators:
        res = report.results[est.name]
        rows.append((
            model.name, est.name, res.nmse,
            oor_report.results[est.name].nmse if oor_report else None,
            getattr(est, "train_seconds", 0.0),
            res.test_seconds))
    write_summary_csv(os.path.join(report_dir, "summary.csv"), rows)
    write_error_curve_csv(
        os.path.join(report_dir, f"error_curve_{model.name}.csv"),
        {est.name: report.results[est.name].error_curve for est in estimators})
    if oor_report:
        write_error_curve_csv(
            os.path.join(report_dir, f"error_curve_{model.name}_oor.csv"),
            {est.name: oor_report.results[est.name].error_curve
             for est in estimators})
    for system, name, value, value_oor, _, test_s in rows:
        oor_txt = "" if value_oor is None else f" oor {value_oor:.6g}"
        _status(f"[evaluate] {system} {name}: nmse {value:.6g}{oor_txt} "
                f"({test_s:.3g}s)")
    _status(f"[evaluate] reports -> {report_dir}")
    return report_dir


def cmd_evaluate(spec):
    model = get_model(spec.system)
    dataset = load_dataset(spec.data)
    if dataset.system.name != spec.system:
        raise DatasetFormatError(
            f"dataset at {spec.data!r} is for {dataset.system.name!r}, "
            f"not {spec.system!r}")
    estimators = _build_estimators(spec, model, spec.checkpoints or [])
    _write_reports(spec, model, dataset, estimators)
    return 0


def cmd_reproduce(spec):
    model = get_model(spec.system)
    if spec.sequence_count < MIN_SEQUENCE_COUNT:
        raise UsageError(
            f"--sequence-count must be >= {MIN_SEQUENCE_COUNT}, "
            f"got {spec.sequence_count}")
    T = _resolve_length(spec, model)
    ds = generate_dataset(model, T=T, count=spec.sequence_count,
                          base_seed=spec.seed)
    save_dataset(ds, spec.data)
    _status(f"[reproduce] dataset: {ds.count} sequences of length {T} "
            f"-> {spec.data}")
    estimators = [FilterEstimator(model, _filter_kind(model))]
    for arch in ("jlstm", "elstm"):
        params, record = _train_one(spec, ds, arch)
        out_dir = os.path.join(spec.out, f"train_{arch}")
        _write_training_outputs(out_dir, spec.system, params, record)
        estimators.append(
            NetworkEstimator(params, model, train_seconds=record.wall_seconds))
    spec.oor = True
    _write_reports(spec, model, ds, estimators)
    return 0


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit status 2 on usage errors; we reserve 2 for
    I/O and use 1 for usage."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p, system_flag=True):
    if system_flag:
        p.add_argument("--system", choices=SYSTEM_NAMES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default runs/<system>)")
    p.add_argument("--config", help="JSON file with ExperimentSpec fields; flags win")
    p.add_argument("--threads", type=int,
                   help="worker threads for per-sequence passes (default: cores); "
                        "results are bitwise identical for any value")
    p.add_argument("--desk-scale", action="store_true", default=None,
                   dest="desk_scale",
                   help="reduced epoch budget / sequence lengths for desktop runs")


def build_parser():
    parser = _Parser(prog="rnnfilter",
                     description="Recurrent-network state estimators vs Kalman filtering")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[], help="simulate and save a dataset")
    _add_common(p)
    p.add_argument("--sequence-count", type=int, dest="sequence_count")
    p.add_argument("--sequence-length", type=int, dest="sequence_length")
    p.add_argument("--data", help="dataset directory (default <out>/dataset)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one architecture on a dataset")
    _add_common(p)
    p.add_argument("--arch", help="jlstm or elstm")
    p.add_argument("--data", help="dataset directory (default <out>/dataset)")
    p.add_argument("--hidden", type=int)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--patience", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--truncation-window", type=int, dest="truncation_window")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run estimators over the test split")
    _add_common(p)
    p.add_argument("--data", help="dataset directory (default <out>/dataset)")
    p.add_argument("--checkpoints", nargs="*", help="network checkpoint files")
    p.add_argument("--estimators",
                   help="comma list, e.g. ekf,jlstm,elstm (default: filter + checkpoints)")
    p.add_argument("--oor", action="store_true", default=None,
                   help="also evaluate on the out-of-region test set")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reproduce",
                       help="full pipeline: generate, train both LSTMs, evaluate")
    p.add_argument("system", choices=SYSTEM_NAMES)
    _add_common(p, system_flag=False)
    p.add_argument("--sequence-count", type=int, dest="sequence_count")
    p.add_argument("--sequence-length", type=int, dest="sequence_length")
    p.add_argument("--hidden", type=int)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--patience", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--truncation-window", type=int, dest="truncation_window")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        spec = _build_spec(args)
        return args.func(spec)
    except UsageError as exc:
        _status(f"error: {exc}")
        return 1
    except (FileNotFoundError, OSError, DatasetFormatError) as exc:
        _status(f"error: {exc}")
        return 2
    except (DivergedTrainingError, IntegrationDivergedError,
            SingularInnovationError) as exc:
        _status(f"numerical failure: {exc}")
        return 3
    except InvalidModelError as exc:
        _status(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
