"""Constrained w-correction probe for both trial degrees of u."""
import argparse
import sys
from pathlib import Path

from dpg_transport import driver

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("configs", nargs="*", default=[str(ROOT / "configs" / "conjecture.ini"),
                                                   str(ROOT / "configs" / "conjecture_p0.ini")])
    args = ap.parse_args()
    for path in args.configs:
        cfg = driver.load_config(path)
        rows, excluded = driver.run_conjecture(cfg)
        print(f"# {Path(path).name} (m_u={cfg.disc.m_u}, m_w={cfg.disc.m_w})")
        print(driver.conjecture_csv(rows), end="")
        for name, why in excluded:
            print(f"# excluded {name}: {why}", file=sys.stderr)


if __name__ == "__main__":
    main()
