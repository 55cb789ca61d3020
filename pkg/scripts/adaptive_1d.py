"""Adaptive run on the jump problem: eta per iteration and the reduction factors."""
import argparse
from pathlib import Path

import numpy as np

from dpg_transport import driver

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "jump1d_adaptive.ini"))
    ap.add_argument("--output", default=None)
    args = ap.parse_args()
    cfg = driver.load_config(args.config)
    if args.output:
        cfg = cfg.replace(output_dir=args.output)
    res = driver.run_adaptive(cfg)
    print(driver.convergence_csv(res.records), end="")
    eta = np.array([r.eta for r in res.records])
    if len(eta) > 1:
        print(f"geometric mean reduction factor: {np.exp(np.mean(np.log(eta[1:] / eta[:-1]))):.4f}")
    if res.grading_violations:
        print("downstream grading violations per step:", res.grading_violations)


if __name__ == "__main__":
    main()
