#!/usr/bin/env python3
"""Convergence tables: backward-solver path ladder and scheme-order study.

Writes the CSVs under runs/ and prints the tables.
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

import duallab.cli as cli
from duallab.config import load_config

HERE = pathlib.Path(__file__).resolve().parents[1]


def main() -> None:
    bsde = cli.run_experiment(load_config(HERE / "configs" / "convergence_bsde.yaml"))
    print("backward solver, |p2(0) - 1/y| by path count:")
    for n, err in sorted(bsde["errors"].items(), key=lambda kv: int(kv[0])):
        print(f"  {int(n):>7d}  {err:.3e}")

    prod = cli.run_experiment(load_config(HERE / "configs" / "convergence_product.yaml"))
    print("product invariant X*G - x*y, max deviation by step count:")
    print(f"  {'steps':>6}  {'euler':>10}  {'exact':>10}")
    for row in prod["rows"]:
        print(f"  {row['steps']:>6d}  {row['deviation_euler']:.3e}  {row['deviation_exact']:.3e}")


if __name__ == "__main__":
    main()
