"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
The output directory defaults to paths.out_dir in the config and can be
overridden with the UQCASCADE_OUT_DIR environment variable only.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from .bundle import Bundle, BundleError
from .cascade import timing_csv_text
from .config import (
    ConfigError,
    config_checksum,
    default_config_text,
    load_config,
)
from .data import CsvFormatError, ingest_csv
from .mae import DivergenceError
from .pipeline import (
    INFER_COLUMNS,
    run_calibrate,
    run_evaluate,
    run_infer,
    run_pretrain,
    run_timing,
    run_train_head,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _out_dir(config) -> str:
    return os.environ.get("UQCASCADE_OUT_DIR", config.paths.out_dir)


def _write_curve(path, curve: list[dict]):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(curve[0].keys()))
        writer.writeheader()
        writer.writerows(curve)


def _save_bundle(bundle: Bundle, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    bundle.save(path)
    print(f"bundle written to {path}")
    print(f"bundle checksum: {bundle.content_checksum()}")


def _cmd_init_config(args):
    with open(args.path, "w", encoding="utf-8") as fh:
        fh.write(default_config_text())
    print(f"default config written to {args.path}")
    return EXIT_OK


def _cmd_pretrain(args):
    config = load_config(args.config)
    bundle, curve = run_pretrain(config)
    out_dir = _out_dir(config)
    _write_curve(os.path.join(out_dir, "pretrain_curve.csv"), curve)
    print(f"pretrain: {len(curve)} epochs, "
          f"final train loss {curve[-1]['train_loss']:.4f}, "
          f"val loss {curve[-1]['val_loss']:.4f}")
    _save_bundle(bundle, args.bundle)
    return EXIT_OK


def _cmd_train_head(args):
    config = load_config(args.config)
    bundle = Bundle.load(args.bundle)
    out_bundle, curve = run_train_head(config, bundle)
    out_dir = _out_dir(config)
    _write_curve(os.path.join(out_dir, "head_curve.csv"), curve)
    print(f"train-head: {len(curve)} epochs, "
          f"validation accuracy {curve[-1]['val_accuracy']:.4f}")
    _save_bundle(out_bundle, args.out or args.bundle)
    return EXIT_OK


def _cmd_calibrate(args):
    config = load_config(args.config)
    bundle = Bundle.load(args.bundle)
    out_bundle, red_rates = run_calibrate(config, bundle)
    for name, rate in red_rates.items():
        print(f"calibrate: {name} red rate on validation = {100 * rate:.2f}%")
    _save_bundle(out_bundle, args.out or args.bundle)
    return EXIT_OK


def _cmd_evaluate(args):
    config = load_config(args.config)
    bundle = Bundle.load(args.bundle)
    out_dir = args.out_dir or _out_dir(config)
    report, paths = run_evaluate(config, bundle, out_dir)
    print(report.format_text())
    print()
    print(f"config checksum: {config_checksum(config)}")
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def _cmd_infer(args):
    bundle = Bundle.load(args.bundle)
    mode = "cascade" if args.cascade or args.detector is None else args.detector
    windows = ingest_csv(
        args.input,
        window_len=bundle.config.data.window_len,
        sample_rate_hz=bundle.config.data.sample_rate_hz,
    )
    if not windows:
        raise CsvFormatError(f"{args.input}: no complete windows to score")
    rows = run_infer(bundle, windows, mode=mode)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=INFER_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            out.close()
            print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_timing(args):
    config = load_config(args.config) if args.config else None
    bundle = Bundle.load(args.bundle)
    rows = run_timing(config or bundle.config, bundle, n_samples=args.n)
    text = timing_csv_text(rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    print(text, end="")
    return EXIT_OK


def _build_parser() -> _Parser:
    parser = _Parser(prog="uqcascade", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write the default config file")
    p.add_argument("path")
    p.set_defaults(fn=_cmd_init_config)

    p = sub.add_parser("pretrain", help="train the masked autoencoder")
    p.add_argument("--config", required=True)
    p.add_argument("--bundle", required=True, help="output bundle path")
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("train-head", help="train the classifier head (frozen MAE)")
    p.add_argument("--config", required=True)
    p.add_argument("--bundle", required=True, help="input bundle with MAE")
    p.add_argument("--out", help="output bundle path (default: overwrite input)")
    p.set_defaults(fn=_cmd_train_head)

    p = sub.add_parser("calibrate", help="fit centroids and quantile thresholds")
    p.add_argument("--config", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", help="output bundle path (default: overwrite input)")
    p.set_defaults(fn=_cmd_calibrate)

    p = sub.add_parser("evaluate", help="UA report over the four scenario splits")
    p.add_argument("--config", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("infer", help="score windows from a CSV file")
    p.add_argument("--bundle", required=True)
    p.add_argument("--input", required=True, help="sensor CSV (header t,ax,..,domain)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--cascade", action="store_true", help="full cascade (default)")
    group.add_argument(
        "--detector", choices=["reconstruction", "distance", "mcdropout"],
        help="single detector instead of the cascade",
    )
    p.add_argument("--out", help="write the verdict stream here instead of stdout")
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("timing", help="per-method wall-clock timing")
    p.add_argument("--bundle", required=True)
    p.add_argument("--config", help="config override (default: bundle snapshot)")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_timing)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (CsvFormatError, BundleError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
