#!/usr/bin/env python3
"""End-to-end reference experiment.

Optimizes the reference configuration, evaluates the analytic bounds at the
optimized point, simulates the optimized policy against the LRU-family
baselines, and emits the bandwidth / capacity / mean-tail sweeps.  All
outputs are CSV files under --outdir.
"""

import argparse
import pathlib
import sys

from stallkit.cli import main as cli


def run(config: str, outdir: pathlib.Path, seeds: str, horizon: str) -> int:
    outdir.mkdir(parents=True, exist_ok=True)
    vars_path = outdir / "optimized_vars.yaml"
    steps = [
        ["optimize", "--config", config, "--out", str(vars_path),
         "--trace", str(outdir / "optimize_trace.csv"),
         "--vars-csv", str(outdir / "optimized_vars.csv")],
        ["bounds", "--config", config, "--vars", str(vars_path),
         "--sigma-grid", "0,10,20,40,60,80,120",
         "--ttfc-exponent", "0.05", "--out", str(outdir / "bounds.csv")],
        ["simulate", "--config", config, "--vars", str(vars_path),
         "--policy", "ttl", "--seeds", seeds, "--horizon", horizon,
         "--sigma-grid", "0,10,20,40,60",
         "--out", str(outdir / "simulate_ttl.csv")],
    ]
    for policy in ("lru", "qlru", "klru", "krandom", "adaptsize"):
        steps.append(
            ["simulate", "--config", config, "--vars", str(vars_path),
             "--policy", policy, "--seeds", seeds, "--horizon", horizon,
             "--sigma-grid", "0,10,20,40,60",
             "--out", str(outdir / f"simulate_{policy}.csv")]
        )
    steps += [
        ["sweep", "--config", config, "--axis", "bandwidth_scale",
         "--values", "1.0,1.25,1.5,1.75,2.0,2.25", "--reoptimize",
         "--max-outer-iters", "6", "--out", str(outdir / "sweep_bandwidth.csv")],
        ["sweep", "--config", config, "--axis", "capacity_ratio",
         "--values", "0.1,0.2,0.35,0.5,0.7", "--seeds", "1",
         "--horizon", horizon, "--policy", "lru",
         "--out", str(outdir / "sweep_capacity.csv")],
        ["sweep", "--config", config, "--axis", "theta",
         "--values", "0.0,0.25,0.5,0.75,1.0", "--max-outer-iters", "8",
         "--out", str(outdir / "sweep_theta.csv")],
    ]
    for argv in steps:
        print("stallkit", " ".join(argv))
        rc = cli(argv)
        if rc != 0:
            print(f"step failed with exit code {rc}", file=sys.stderr)
            return rc
    print(f"all outputs in {outdir}")
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/reference.yaml")
    ap.add_argument("--outdir", type=pathlib.Path, default=pathlib.Path("results"))
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--horizon", default="20000")
    args = ap.parse_args()
    sys.exit(run(args.config, args.outdir, args.seeds, args.horizon))
