"""Command line entry point: ``dpg-transport {run,verify,conjecture} --config FILE``.

Exit codes: 0 success, 1 invalid configuration, 2 solver failure,
3 verify suite reported a failed check.
"""
import argparse
import logging
import sys

from . import driver
from .linalg import SolverError

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("dpg_transport")


def _parser():
    p = argparse.ArgumentParser(prog="dpg-transport", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "adaptive or uniform convergence run"),
                           ("verify", "invariant suites"),
                           ("conjecture", "constrained w-correction probe")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--output", help="override [run] output_dir")
        if name == "verify":
            s.add_argument("--seed", type=int)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = driver.load_config(args.config)
        changes = {}
        if args.output:
            changes["output_dir"] = args.output
        if getattr(args, "seed", None) is not None:
            changes["seed"] = args.seed
        if changes:
            cfg = cfg.replace(**changes)
    except driver.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            mode = cfg.run.mode
            if mode not in ("adaptive", "uniform"):
                mode = "adaptive"
            res = driver.run_adaptive(cfg) if mode == "adaptive" else driver.run_uniform(cfg)
            sys.stdout.write(driver.convergence_csv(res.records))
        elif args.command == "verify":
            results = driver.run_verify(cfg)
            sys.stdout.write(driver.verify_text(results))
            if any(r.status == "FAIL" for r in results):
                return EXIT_VERIFY
        else:
            rows, excluded = driver.run_conjecture(cfg)
            sys.stdout.write(driver.conjecture_csv(rows))
            for name, why in excluded:
                print(f"excluded {name}: {why}", file=sys.stderr)
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
