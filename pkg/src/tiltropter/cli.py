"""Command-line entry point: ``tiltropter {run,sweep,metrics,dump-allocation}``."""
from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import yaml

from .allocation import build_allocation, dump_allocation_csv
from .core import VehicleParams
from .harness import ScenarioConfig, compute_metrics, read_log, run_scenario


def _load_scenario(args):
    cfg = ScenarioConfig.from_yaml(args.scenario)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.no_noise:
        changes["noise"] = cfg.noise.off()
    if args.no_estimator:
        changes["estimator"] = replace(cfg.estimator, enabled=False)
    if args.rti is not None:
        changes["nmpc"] = cfg.nmpc.with_(rti=args.rti)
    return replace(cfg, **changes)


def _print_metrics(metrics, stream=None):
    yaml.safe_dump(metrics.to_dict(), stream or sys.stdout, sort_keys=False)


def cmd_run(args):
    cfg = _load_scenario(args)
    result = run_scenario(cfg)
    _print_metrics(result.metrics)
    return 1 if result.metrics.failed else 0


def _sweep_one(path, args):
    args = argparse.Namespace(**{**vars(args), "scenario": path})
    return path, run_scenario(_load_scenario(args)).metrics


def cmd_sweep(args):
    paths = sorted(glob.glob(os.path.join(args.directory, "*.yaml")))
    if not paths:
        print(f"no scenario files in {args.directory}", file=sys.stderr)
        return 2
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_one, paths, [args] * len(paths)))
    else:
        results = [_sweep_one(p, args) for p in paths]
    summary = {}
    for path, m in results:
        summary[os.path.basename(path)] = m.to_dict()
        print(f"{os.path.basename(path)}: rmse={m.rmse_position:.4f} m  "
              f"power_ratio={m.power_ratio:.4f}  failed={m.failed}")
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "sweep_summary.yaml"), "w") as fh:
            yaml.safe_dump(summary, fh, sort_keys=True)
    return 1 if any(m.failed for _, m in results) else 0


def cmd_metrics(args):
    logs = read_log(args.log)
    r = VehicleParams.from_yaml(args.vehicle).r_wheel if args.vehicle else None
    _print_metrics(compute_metrics(logs, r, args.settle))
    return 0


def cmd_dump_allocation(args):
    params = VehicleParams.from_yaml(args.vehicle) if args.vehicle else VehicleParams()
    for path in dump_allocation_csv(build_allocation(params), args.prefix):
        print(path)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="tiltropter", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_args(sp, positional="scenario", help="scenario YAML file"):
        sp.add_argument(positional, help=help)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="directory for the CSV log and metrics YAML")
        sp.add_argument("--no-noise", action="store_true", help="disable all sensor noise")
        sp.add_argument("--no-estimator", action="store_true",
                        help="feed the true external wrench instead of the estimate")
        sp.add_argument("--rti", dest="rti", action="store_true", default=None,
                        help="one SQP iteration per tick")
        sp.add_argument("--full-sqp", dest="rti", action="store_false",
                        help="iterate the SQP to convergence each tick")

    sp = sub.add_parser("run", help="run one closed-loop scenario")
    scenario_args(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run every scenario file in a directory")
    scenario_args(sp, "directory", "directory of scenario YAML files")
    sp.add_argument("--jobs", type=int, default=1, help="scenarios run in parallel")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("metrics", help="recompute metrics from a CSV log")
    sp.add_argument("log")
    sp.add_argument("--vehicle", default=None, help="vehicle YAML (for the wheel radius)")
    sp.add_argument("--settle", type=float, default=0.5)
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("dump-allocation", help="write A and its pseudoinverse as CSV")
    sp.add_argument("--vehicle", default=None)
    sp.add_argument("--prefix", default="allocation")
    sp.set_defaults(func=cmd_dump_allocation)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
