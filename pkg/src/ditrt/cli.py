"""Command-line entry points: run, calibrate, bench, replay, compare."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .errors import ConfigurationError, TraceFormatError
from .harness import (
    calibrate,
    compare_outputs,
    import_trace,
    load_config,
    output_dir,
    replay_check,
    run_benchmark,
    toggles_label,
    write_metrics_csv,
)
from .tensor import Tensor


def _metrics_obj(run_id, toggles, m):
    return {
        "run_id": run_id,
        "toggles": toggles_label(toggles),
        "speedup_mac": m.speedup_mac,
        "speedup_wall": m.speedup_wall,
        "mse": m.mse_vs_baseline,
        "psnr": m.psnr_vs_baseline,
        "executed_macs": m.executed_macs,
        "baseline_macs": m.baseline_macs,
    }


def cmd_run(args):
    cfg = load_config(args.config)
    metrics, _, _, _ = run_benchmark(cfg, run_id=args.run_id, write=True)
    print(json.dumps(_metrics_obj(args.run_id, cfg.toggles_obj(), metrics), indent=2))


def cmd_calibrate(args):
    cfg = load_config(args.config)
    out = args.out or cfg.calibration
    if out is None:
        raise ConfigurationError("calibration: no output path (set --out or config.calibration)")
    calibrate(cfg, out_path=out)
    print(f"calibration written to {out}")


def cmd_bench(args):
    with open(args.sweep) as fh:
        paths = json.load(fh)
    if not isinstance(paths, list):
        raise ConfigurationError("sweep file must be a JSON list of config paths")
    rows = []
    base_dir = os.path.dirname(os.path.abspath(args.sweep))
    for path in paths:
        full = path if os.path.isabs(path) else os.path.join(base_dir, path)
        cfg = load_config(full)
        run_id = os.path.splitext(os.path.basename(full))[0]
        metrics, _, _, _ = run_benchmark(cfg, run_id=run_id, write=True)
        rows.append((run_id, cfg.toggles_obj(), metrics))
        print(json.dumps(_metrics_obj(run_id, cfg.toggles_obj(), metrics)))
    if rows:
        merged = os.path.join(output_dir(load_config(
            paths[0] if os.path.isabs(paths[0]) else os.path.join(base_dir, paths[0]))),
            "sweep.metrics.csv")
        os.makedirs(os.path.dirname(merged), exist_ok=True)
        write_metrics_csv(merged, rows)
        print(f"merged metrics: {merged}")


def cmd_replay(args):
    trace = import_trace(args.trace)
    cfg = load_config(args.config) if args.config else None
    print(json.dumps(replay_check(trace, cfg), indent=2))


def cmd_compare(args):
    a = Tensor(np.load(args.a))
    b = Tensor(np.load(args.b))
    mse, psnr = compare_outputs(a, b)
    print(json.dumps({"mse": mse, "psnr": psnr}, indent=2))


def build_parser():
    p = argparse.ArgumentParser(prog="ditrt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one benchmark config")
    r.add_argument("--config", required=True)
    r.add_argument("--run-id", default="run")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("calibrate", help="write the calibration snapshot")
    c.add_argument("--config", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate)

    b = sub.add_parser("bench", help="run a sweep of configs")
    b.add_argument("--sweep", required=True)
    b.set_defaults(func=cmd_bench)

    y = sub.add_parser("replay", help="validate a decision trace")
    y.add_argument("--trace", required=True)
    y.add_argument("--config")
    y.set_defaults(func=cmd_replay)

    m = sub.add_parser("compare", help="MSE/PSNR between two saved tensors")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TraceFormatError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
