"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from ..adafbio import ConfigError as ScheduleError
from ..adafbio import NumericalError
from ..problems.base import InvalidArgument
from .checks import check_constants
from .config import ConfigError, parse_config
from .experiments import bias_study, build_problem, compare_variants, hyperclean_demo, run_experiment, worker_count

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _parser():
    p = argparse.ArgumentParser(prog="fedbilevel", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="seeded repetitions; traces, summary and plot data")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=_u64)
    r.add_argument("--out")
    b = sub.add_parser("bias-study", help="empirical Neumann bias against its bound")
    b.add_argument("--config", required=True)
    b.add_argument("--out")
    c = sub.add_parser("compare", help="matched-seed comparison of adaptive rules")
    c.add_argument("--config", required=True)
    c.add_argument("--rules")
    c.add_argument("--out")
    k = sub.add_parser("check-constants", help="evaluate the step-size and schedule conditions")
    k.add_argument("--config", required=True)
    d = sub.add_parser("clean-demo", help="data hyper-cleaning against a uniform-weight baseline")
    d.add_argument("--config", required=True)
    d.add_argument("--out")
    return p


def _emit(obj, out_dir=None, name=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out_dir and name:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, name), "w") as fh:
            fh.write(text + "\n")
    print(text)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
        if getattr(args, "seed", None) is not None:
            cfg = replace(cfg, root_seed=args.seed)
        if getattr(args, "out", None):
            cfg = replace(cfg, out_dir=args.out)
        if args.cmd == "run":
            res = run_experiment(cfg)
            _emit({"out_dir": res.out_dir, "avg_grad_norm": res.summary["avg_grad_norm"],
                   "seeds": res.seeds, "files": res.files})
        elif args.cmd == "bias-study":
            path = os.path.join(cfg.out_dir, "bias_study.csv")
            _emit({"file": path, "rows": bias_study(cfg, path)})
        elif args.cmd == "compare":
            rules = args.rules.split(",") if args.rules else cfg.compare["rules"]
            rep = compare_variants(cfg, [r.strip() for r in rules])
            _emit(rep.to_dict(), cfg.out_dir if args.out else None, "comparison.json")
        elif args.cmd == "check-constants":
            problem = build_problem(cfg)
            rep = check_constants(cfg.schedule, problem, cfg.rule)
            print(rep.text())
            n = len(rep.failures)
            print(f"{n} of {len(rep.checks)} conditions violated (reported only; runs are not blocked)")
        elif args.cmd == "clean-demo":
            _emit(hyperclean_demo(cfg, workers=worker_count()), cfg.out_dir if args.out else None,
                  "clean_demo.json")
    except (ConfigError, ScheduleError, InvalidArgument) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
