"""Command-line entry point: ``residiff {synth,train,calibrate,forecast,evaluate}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from .bundle import load_bundle, save_bundle
from .config import load_config, parse_overrides
from .data import SYNTH_KINDS, load_csv, synth_generate, write_csv
from .errors import ConfigurationError, DataError, NumericalError
from .pipeline import ARMS, PLOT_COLUMNS, forecast, report_text, run_calibrate, run_evaluate, run_train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def cmd_synth(args) -> None:
    params = {}
    for item in args.param or ():
        key, val = item.split("=", 1)
        params[key] = float(val)
    ds = synth_generate(args.kind, args.T, args.d, args.seed, **params)
    write_csv(ds, args.out)


def _train_config(args):
    overrides = parse_overrides(args.set)
    for flag, key in (("seed", "seed"), ("epochs", "num_epochs"), ("samples", "samples")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "joint", False):
        overrides["joint"] = True
    if getattr(args, "data", None):
        overrides["data"] = args.data
    return load_config(args.config, overrides)


def cmd_train(args) -> None:
    cfg = _train_config(args)
    if not cfg.data:
        raise ConfigurationError("no dataset given (use --data or the 'data' config key)")
    bundle = run_train(cfg, load_csv(cfg.data))
    save_bundle(bundle, args.out)
    if args.log:
        with open(args.log, "w") as fh:
            json.dump(bundle.log, fh, sort_keys=True, indent=1)


def cmd_calibrate(args) -> None:
    bundle = load_bundle(args.model)
    bundle = run_calibrate(bundle, load_csv(args.data))
    save_bundle(bundle, args.out or args.model)
    for w in bundle.profile.warnings:
        print(f"warning: {w}", file=sys.stderr)


def cmd_forecast(args) -> None:
    bundle = load_bundle(args.model)
    data = load_csv(args.data)
    bundle.check_data(data.d)
    cfg = bundle.config
    x, _, starts = data.windows(args.split, cfg.input_len, cfg.pred_len, cfg.eval_stride)
    if x.shape[0] == 0:
        raise ConfigurationError(f"{args.split} split holds no complete window")
    _, ens = forecast(bundle, x, use_co=None if not args.no_co else False)
    ens = data.destandardize(ens)
    B, S, M, d = ens.shape
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "origin", "sample", "step"] + list(data.columns))
        for b in range(B):
            origin = data.timestamps[starts[b] + cfg.input_len - 1]
            for s in range(S):
                for m in range(M):
                    w.writerow([b, origin, s, m + 1] + [_fmt(v) for v in ens[b, s, m]])
    if args.summary:
        qs = (0.05, 0.25, 0.5, 0.75, 0.95)
        quant = np.quantile(ens, qs, axis=1)
        mean, std = ens.mean(axis=1), ens.std(axis=1)
        with open(args.summary, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["window", "step", "variate", "mean", "std"] + [f"q{int(q * 100):02d}" for q in qs])
            for b in range(B):
                for m in range(M):
                    for j in range(d):
                        w.writerow([b, m + 1, data.columns[j], _fmt(mean[b, m, j]), _fmt(std[b, m, j])]
                                   + [_fmt(quant[i, b, m, j]) for i in range(len(qs))])


def cmd_evaluate(args) -> None:
    bundle = load_bundle(args.model)
    data = load_csv(args.data)
    result = run_evaluate(bundle, data, args.arms, trajectory=args.trajectory,
                          plot_data=bool(args.plot_data), split=args.split)
    if args.json:
        print(json.dumps(result.to_rows(), sort_keys=True))
    else:
        print(report_text(result), end="")
    if args.plot_data is not None and result.plot_data is not None:
        with open(args.plot_data, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(PLOT_COLUMNS)
            for row in result.plot_data:
                w.writerow([int(v) for v in row[:3]] + [_fmt(v) for v in row[3:]])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="residiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset as CSV")
    s.add_argument("--kind", choices=SYNTH_KINDS, required=True)
    s.add_argument("--T", type=int, default=2000)
    s.add_argument("--d", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--param", action="append", help="generator parameter key=value")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="fit point estimator, residual scale and denoiser")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="write the training loss curves as JSON")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--samples", type=int)
    t.add_argument("--joint", action="store_true", help="train point estimator and denoiser together")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="fit coverage optimization on the validation split")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", help="output bundle (default: overwrite --model)")
    c.set_defaults(func=cmd_calibrate)

    f = sub.add_parser("forecast", help="write sampled forecast paths")
    f.add_argument("--model", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--split", default="test", choices=("train", "val", "test"))
    f.add_argument("--out", required=True)
    f.add_argument("--summary", help="per-cell mean/std/quantile CSV")
    f.add_argument("--no-co", action="store_true", help="skip coverage optimization")
    f.set_defaults(func=cmd_forecast)

    e = sub.add_parser("evaluate", help="score ablation arms")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--arms", nargs="+", choices=ARMS)
    e.add_argument("--trajectory", action="store_true", help="CRPS after every denoising step")
    e.add_argument("--plot-data", metavar="CSV", help="write mean +- 1/2 std interval series")
    e.add_argument("--json", action="store_true", help="machine-readable rows on stdout")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
