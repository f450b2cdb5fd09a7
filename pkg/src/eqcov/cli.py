"""Command-line interface.

Subcommands: ``train`` (fit + calibrate), ``predict``, ``experiment``,
``bias``, ``simulate``, ``describe`` and ``generate``. Exit codes: 0 success,
2 configuration error, 3 data error, 4 no coverage guarantee available.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from dataclasses import asdict

import numpy as np

from .conformal import (
    CalibrationSpec,
    Learner,
    fit_calibrated,
    load_predictor,
    predict_interval,
    save_predictor,
)
from .data import (
    SYNTHETIC_PRESETS,
    Dataset,
    Standardizer,
    TableSchema,
    bundled_sample_path,
    fit_standardizer,
    generate_synthetic,
    load_table,
    split_train_calibration,
    split_train_test,
    transform_response,
)
from .exceptions import ConfigError, DataError, EqcovError, GuaranteeError
from .metrics import bias_report, run_repeated_splits, comparison_methods
from .models import NetConfig
from .testlab import exact_rank_coverage, monte_carlo_coverage, normal_scores, tied_scores

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_GUARANTEE = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# argument groups


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _mapping(text: str) -> dict[str, str]:
    out = {}
    for item in _csv_list(text):
        key, sep, value = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", default=None, help="CSV file with a header row (default: bundled synthetic sample)")
    g.add_argument("--features", type=_csv_list, default=None, help="comma-separated feature columns (default: all others)")
    g.add_argument("--group", default="group", help="group column")
    g.add_argument("--response", default="y", help="response column")
    g.add_argument("--group-map", type=_mapping, default=None, help="raw=label pairs, e.g. white=1,nonwhite=0")
    g.add_argument("--log-response", action="store_true", help="replace the response by log(1 + y)")


def _add_alpha_args(p):
    g = p.add_argument_group("calibration")
    g.add_argument("--alpha", type=float, default=0.1)
    g.add_argument("--alpha-lo", type=float, default=None)
    g.add_argument("--alpha-hi", type=float, default=None)
    sym = g.add_mutually_exclusive_group()
    sym.add_argument("--symmetric", dest="symmetric", action="store_true")
    sym.add_argument("--asymmetric", dest="symmetric", action="store_false")
    p.set_defaults(symmetric=False)
    g.add_argument("--calib-frac", type=float, default=0.5)


def _add_learner_args(p):
    g = p.add_argument_group("base model")
    g.add_argument("--learner", choices=("net", "linear"), default="net")
    g.add_argument("--hidden", type=lambda s: tuple(int(v) for v in _csv_list(s)), default=(64, 64))
    g.add_argument("--lr", type=float, default=5e-4)
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--weight-decay", type=float, default=1e-6)
    g.add_argument("--dropout", type=float, default=0.1)
    g.add_argument("--epochs", type=int, default=1000)
    g.add_argument("--val-frac", type=float, default=0.1)
    g.add_argument("--patience", type=int, default=None)


def _learner(args) -> Learner:
    config = NetConfig(
        hidden=args.hidden,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        weight_decay=args.weight_decay,
        dropout=args.dropout,
        max_epochs=args.epochs,
        validation_fraction=args.val_frac,
        patience=args.patience,
        seed=args.seed,
    )
    return Learner(args.learner, config)


def _group_map(args):
    if args.group_map is None:
        return None
    try:
        return {k: int(v) for k, v in args.group_map.items()}
    except ValueError:
        raise ConfigError("--group-map labels must be integers") from None


def _schema(args) -> TableSchema:
    path = args.data or bundled_sample_path()
    features = args.features
    if features is None:
        with open(path, newline="") as fh:
            header = [h.strip() for h in next(csv.reader(fh), [])]
        features = [h for h in header if h not in (args.group, args.response)]
    return TableSchema(tuple(features), args.group, args.response, _group_map(args))


def _load(args) -> tuple[Dataset, TableSchema]:
    path = args.data or bundled_sample_path()
    try:
        schema = _schema(args)
    except OSError as exc:
        raise DataError(str(exc)) from None
    ds = load_table(path, schema)
    if args.log_response:
        ds = ds.map_response(transform_response)
    return ds, schema


def _spec(args, method=None, coverage=None, mode=None) -> CalibrationSpec:
    return CalibrationSpec(
        method=method or args.method,
        coverage=coverage or args.coverage,
        symmetric=args.symmetric,
        alpha=args.alpha,
        alpha_lo=None if args.symmetric else args.alpha_lo,
        alpha_hi=None if args.symmetric else args.alpha_hi,
        mode=mode or args.mode,
    )


def _write(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _manifest(args) -> str:
    items = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    return "".join(f"{k}={_fmt(v)}\n" for k, v in items.items())


def _fmt(v) -> str:
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if isinstance(v, dict):
        return ",".join(f"{k}={x}" for k, x in v.items())
    return str(v)


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    ds, schema = _load(args)
    spec = _spec(args)
    scaler = fit_standardizer(ds)
    ds = ds.with_features(scaler.transform(ds.X))
    split = split_train_calibration(ds, args.calib_frac, args.seed)
    predictor = fit_calibrated(ds, split, spec, _learner(args))
    meta = {
        "features": list(schema.features),
        "group_column": schema.group,
        "response_column": schema.response,
        "group_map": None if schema.group_map is None else dict(schema.group_map),
        "log_response": bool(args.log_response),
        "standardizer": scaler.to_dict(),
        "seed": args.seed,
    }
    predictor = type(predictor)(
        predictor.spec, predictor.corrections, predictor.model, predictor.group_models, meta
    )
    save_predictor(predictor, args.out)
    _write(args.out + ".manifest", _manifest(args))
    _write(args.out + ".corrections.csv", predictor.corrections.to_text())

    sys.stdout.write(predictor.corrections.to_text())
    for key, (lo, hi) in predictor.corrections.table.items():
        if math.isinf(lo) or math.isinf(hi):
            label = "pooled" if key is None else f"group {key}"
            _warn(
                f"{label}: {predictor.corrections.sizes[key]} calibration samples are too few "
                f"for alpha={spec.alpha}; its intervals are unbounded"
            )
    return EXIT_OK


def cmd_predict(args) -> int:
    predictor = load_predictor(args.model)
    meta = predictor.meta
    if "standardizer" not in meta:
        raise DataError(f"{args.model} lacks the preprocessing metadata written by 'train'")
    scaler = Standardizer.from_dict(meta["standardizer"])
    group_map = meta.get("group_map")
    with open(args.input, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = [f.strip() for f in (reader.fieldnames or [])]
        missing = [c for c in [*meta["features"], meta["group_column"]] if c not in fields]
        if missing:
            raise DataError(f"columns not found in {args.input}: {', '.join(missing)}")
        rows = [{k.strip(): v for k, v in row.items()} for row in reader]

    out = io.StringIO()
    out.write("row,group,lower,upper,error\n")
    status = EXIT_OK
    for i, row in enumerate(rows):
        raw_group = (row.get(meta["group_column"]) or "").strip()
        try:
            try:
                x = np.array([float(row[c]) for c in meta["features"]])
                if not np.all(np.isfinite(x)):
                    raise ValueError
            except (TypeError, ValueError):
                raise DataError("non-numeric feature") from None
            if group_map is not None:
                if raw_group not in group_map:
                    raise GuaranteeError(f"unknown group {raw_group!r}")
                a = int(group_map[raw_group])
            else:
                try:
                    a = int(float(raw_group))
                except ValueError:
                    raise DataError(f"bad group label {raw_group!r}") from None
            iv = predict_interval(predictor, scaler.transform(x), a)
            out.write(f"{i},{raw_group},{_fmt_bound(iv.lower)},{_fmt_bound(iv.upper)},\n")
        except GuaranteeError as exc:
            out.write(f"{i},{raw_group},,,{exc}\n")
            status = max(status, EXIT_GUARANTEE)
        except DataError as exc:
            out.write(f"{i},{raw_group},,,{exc}\n")
            status = EXIT_DATA if status == EXIT_OK else status
    _write(args.out, out.getvalue())
    return status


def _fmt_bound(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def cmd_experiment(args) -> int:
    ds, _ = _load(args)
    methods = comparison_methods(args.alpha, args.symmetric, *(
        (None, None) if args.symmetric else (args.alpha_lo, args.alpha_hi)
    ))
    summary = run_repeated_splits(
        ds,
        methods,
        repetitions=args.reps,
        train_fraction=args.train_frac,
        calibration_fraction=args.calib_frac,
        seed=args.seed,
        learner=_learner(args),
    )
    names = {int(k): v for k, v in (args.group_names or {}).items()}
    table = summary.to_table(names)
    _write(args.out, table)
    if args.out not in (None, "-"):
        _write(args.out + ".json", summary.to_json())
        _write(args.out + ".manifest", _manifest(args))
        sys.stdout.write(table)
    for (m, a), cell in summary.cells.items():
        if cell.errors:
            _warn(f"{m} / group {a}: {len(cell.errors)} failed repetitions ({cell.errors[0]})")
    return EXIT_OK


def cmd_bias(args) -> int:
    ds, _ = _load(args)
    train, test = split_train_test(ds.n, args.train_frac, args.seed)
    scaler = fit_standardizer(ds, train)
    ds = ds.with_features(scaler.transform(ds.X))
    learner = _learner(args)
    model = learner.fit("cp", ds.X[train], ds.y[train])
    report = bias_report(model, ds, test, (args.level_lo, args.level_hi))
    _write(args.out, report.summary_text())
    if args.out not in (None, "-"):
        _write(args.out + ".ecdf.csv", report.ecdf_text())
        _write(args.out + ".manifest", _manifest(args))
        sys.stdout.write(report.summary_text())
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.m < 1:
        raise ConfigError("--m must be at least 1")
    sampler = {"normal": normal_scores, "tied": tied_scores}[args.scores]
    est = monte_carlo_coverage(sampler, args.m, args.alpha, args.trials, args.seed)
    exact = float(exact_rank_coverage(args.m, args.alpha))
    text = (
        f"m={args.m}\nalpha={args.alpha}\nscores={args.scores}\ntrials={est.trials}\n"
        f"hits={est.hits}\nestimate={est.estimate:.6f}\nse={est.se:.6f}\n"
        f"exact={exact:.6f}\nwithin_3se={est.within(exact)}\n"
    )
    _write(args.out, text)
    return EXIT_OK


def cmd_describe(args) -> int:
    ds, _ = _load(args)
    _write(args.out, ds.summary())
    return EXIT_OK


def cmd_generate(args) -> int:
    spec = SYNTHETIC_PRESETS[args.preset]
    if args.n is not None:
        spec = type(spec)(**{**asdict(spec), "n": args.n})
    ds = generate_synthetic(spec, args.seed)
    out = io.StringIO()
    names = list(ds.feature_names)
    out.write(",".join(names + ["group", "y"]) + "\n")
    for x, a, y in zip(ds.X, ds.group, ds.y):
        out.write(",".join([*(repr(float(v)) for v in x), str(int(a)), repr(float(y))]) + "\n")
    _write(args.out, out.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eqcov", description="Prediction intervals with equalized coverage.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a base model and calibrate it")
    _add_data_args(p)
    _add_alpha_args(p)
    _add_learner_args(p)
    p.add_argument("--method", choices=("cp", "cqr"), default="cqr")
    p.add_argument("--coverage", choices=("marginal", "conditional"), default="conditional")
    p.add_argument("--mode", choices=("joint", "groupwise"), default="joint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="calibrated predictor file (JSON)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="intervals for new rows")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="CSV with the training feature and group columns")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("experiment", help="six-method comparison over repeated splits")
    _add_data_args(p)
    _add_alpha_args(p)
    _add_learner_args(p)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--reps", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--group-names", type=_mapping, default=None, help="label=name pairs for the table")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("bias", help="signed-residual diagnostics per group")
    _add_data_args(p)
    _add_learner_args(p)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--level-lo", type=float, default=0.05)
    p.add_argument("--level-hi", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_bias)

    p = sub.add_parser("simulate", help="Monte Carlo check of the inflated-quantile coverage")
    p.add_argument("--m", type=int, default=19)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--scores", choices=("normal", "tied"), default="normal")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("describe", help="dataset summary")
    _add_data_args(p)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("generate", help="write a synthetic dataset as CSV")
    p.add_argument("--preset", choices=sorted(SYNTHETIC_PRESETS), default="two-group")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GuaranteeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GUARANTEE
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EqcovError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
