#!/usr/bin/env python3
"""Headline experiment: plain and robust log investors in one market.

Runs the constant-fraction grid search, the robust saddle search, and the
bridge identity suite on the bundled configurations, then prints a compact
summary.  Outputs land under runs/.
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

import duallab.cli as cli
from duallab.config import load_config

HERE = pathlib.Path(__file__).resolve().parents[1]


def main() -> None:
    primal = cli.run_experiment(load_config(HERE / "configs" / "merton_log.yaml"))
    robust = cli.run_experiment(load_config(HERE / "configs" / "robust_merton.yaml"))

    print("plain investor:")
    print(f"  optimal fraction        {primal['pi']:.4f}")
    print(f"  value                   {primal['value']:.6f} (se {primal['se']:.1e})")
    print(f"  objective derivative    {primal['derivative_check']['estimate']:.2e}")
    print("robust investor:")
    print(f"  saddle (pi, mu)         ({robust['pi']:.4f}, {robust['mu']:.4f})")
    print(f"  pure saddle             {robust['is_saddle']} (gap {robust['gap']:.2e})")
    print(f"  fraction ratio          {robust['pi'] / primal['pi']:.4f}")

    raw = load_config(HERE / "configs" / "merton_log.yaml").raw
    raw = {**raw, "mode": "bridge-check",
           "bridge": {"case": "merton_log", "adjoints": "analytic"},
           "out": "runs/bridge_merton"}
    from duallab.config import validate_config

    bridge = cli.run_experiment(validate_config(raw))
    worst = max(v["max_abs"] for v in bridge["identities_forward"].values())
    print("bridge identities:")
    print(f"  worst forward residual  {worst:.2e}")
    print(f"  product identity        {bridge['product_identity_max_dev']:.2e}")


if __name__ == "__main__":
    main()
