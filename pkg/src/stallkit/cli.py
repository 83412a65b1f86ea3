"""Experiment runner: evaluate bounds, optimize, simulate, and sweep.

Every output CSV starts with a comment line carrying the config hash and
seed(s) so results are attributable to an exact configuration.  Subcommands:

    stallkit bounds    --config cfg.yaml --sigma-grid 0,2,4,8,16 --out bounds.csv
    stallkit optimize  --config cfg.yaml --out vars.yaml --trace trace.csv
    stallkit simulate  --config cfg.yaml --vars vars.yaml --policy ttl \
                       --seeds 1,2,3 --horizon 20000 --out metrics.csv
    stallkit sweep     --config cfg.yaml --axis bandwidth_scale \
                       --values 1.0,1.25,1.5 --out sweep.csv

STALLKIT_THREADS caps the seed-parallel simulation fan-out.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import bounds as bnd
from . import config as cfgmod
from . import optimizer as opt
from . import simulator, workload
from .errors import StallkitError
from .model import SystemTopology, uniform_init


def _parse_floats(text):
    return [float(x) for x in str(text).split(",") if x != ""]


def _parse_ints(text):
    return [int(x) for x in str(text).split(",") if x != ""]


def _meta_line(exp, seeds=None):
    seed_part = f" seeds={','.join(map(str, seeds))}" if seeds else ""
    return f"# stallkit config={exp.config_hash} name={exp.name}{seed_part}"


def _write_rows(path, header, rows, meta):
    with open(path, "w", newline="") as fh:
        fh.write(meta + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _initial_vars(exp, args):
    if getattr(args, "vars", None):
        return cfgmod.load_vars(args.vars)
    defaults = exp.defaults
    return uniform_init(
        exp.topo,
        omega_default=float(defaults.get("omega_s", 0.0)),
        exponent_default=float(defaults.get("exponent", 0.01)),
    )


def _optimizer_config(exp, args):
    kw = dict(exp.optimizer)
    for name, attr in (
        ("sigma", "sigma"), ("theta", "theta"), ("max_outer_iters", "max_outer_iters"),
        ("grad_mode", "grad_mode"), ("tol", "tol"),
    ):
        val = getattr(args, attr, None)
        if val is not None:
            kw[name] = val
    allowed = {f.name for f in dataclasses.fields(opt.OptimizerConfig)}
    kw = {k: v for k, v in kw.items() if k in allowed}
    return opt.OptimizerConfig(**kw)


def _scaled_topology(topo, arrival_scale=1.0, bandwidth_scale=1.0, epsilon=None,
                     capacity_ratio=None):
    kw = {f.name: getattr(topo, f.name) for f in dataclasses.fields(topo)}
    kw["arrival_rate"] = topo.arrival_rate * arrival_scale
    kw["base_rate_dc"] = topo.base_rate_dc * bandwidth_scale
    kw["base_rate_edge"] = topo.base_rate_edge * bandwidth_scale
    kw["shift_dc"] = topo.shift_dc / bandwidth_scale
    kw["shift_edge"] = topo.shift_edge / bandwidth_scale
    if epsilon is not None:
        kw["violation_budget"] = np.full(topo.num_edge_routers, epsilon)
    if capacity_ratio is not None:
        total = float((topo.segments * topo.tau).sum())
        kw["edge_capacity"] = np.full(topo.num_edge_routers, capacity_ratio * total)
    return SystemTopology(**kw)


# ---------------------------------------------------------------------------
# subcommands


def cmd_bounds(args):
    exp = cfgmod.load_experiment(args.config)
    vars = _initial_vars(exp, args)
    sigmas = _parse_floats(args.sigma_grid)
    report = bnd.bound_report(exp.topo, vars, sigmas, ttfc_exponent=args.ttfc_exponent)
    rows = []
    r, rr = exp.topo.num_files, exp.topo.num_edge_routers
    for i in range(r):
        for l in range(rr):
            for s_idx, sigma in enumerate(report.sigmas):
                rows.append([
                    i, l, sigma,
                    f"{report.sdtp[i, l, s_idx]:.10g}",
                    f"{report.sdtp_raw[i, l, s_idx]:.10g}",
                    f"{report.msd[i, l]:.10g}",
                    f"{report.ttfc[i, l]:.10g}",
                    int(report.feasible),
                ])
    _write_rows(args.out, ["file", "router", "sigma", "sdtp_bound", "sdtp_raw",
                           "msd_bound", "ttfc_bound", "feasible_flag"],
                rows, _meta_line(exp))
    for note in report.notes:
        print(f"note: {note}", file=sys.stderr)
    if not report.feasible and args.strict:
        raise StallkitError("bound evaluation infeasible: " + "; ".join(report.notes))
    print(f"wrote {args.out}")
    return 0


def cmd_optimize(args):
    exp = cfgmod.load_experiment(args.config)
    vars = _initial_vars(exp, args)
    cfg = _optimizer_config(exp, args)
    final, trace = opt.alternate(exp.topo, vars, cfg, baseline=args.baseline)
    cfgmod.save_vars(final, args.out)
    if args.vars_csv:
        cfgmod.save_vars_csv(final, args.vars_csv)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            fh.write(_meta_line(exp) + "\n")
            w = csv.writer(fh)
            w.writerow(["iteration", "block", "objective", "delta", "wall_ms"])
            for row in trace.rows:
                w.writerow([row[0], row[1], f"{row[2]:.12g}", f"{row[3]:.6g}",
                            f"{row[4]:.3f}"])
    print(f"objective {trace.objectives[-1]:.6g} after "
          f"{trace.rows[-1][0]} iterations; wrote {args.out}")
    return 0


def _worker_count(n_jobs):
    cap = os.environ.get("STALLKIT_THREADS")
    cap = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n_jobs, cap))


def _simulate_one(payload):
    topo, vars, policy, trace, seed, horizon, sim_kw = payload
    metrics = simulator.run(topo, vars, policy, trace, seed, horizon=horizon, **sim_kw)
    return seed, metrics


def _run_seeds(exp, topo, vars, policy, seeds, horizon, sim_kw, trace_path=None):
    if trace_path:
        trace = workload.load_trace(trace_path, topo.segments, tau=topo.tau)
        traces = {seed: trace for seed in seeds}
    else:
        traces = {
            seed: workload.gen_poisson_trace(topo, horizon, seed + 10_000)
            for seed in seeds
        }
    payloads = [(topo, vars, policy, traces[s], s, horizon, sim_kw) for s in seeds]
    workers = _worker_count(len(seeds))
    if workers == 1:
        return [_simulate_one(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_simulate_one, payloads))


def _metrics_row(seed, m, sigma_grid):
    stall, stall_se = m.mean_stall()
    ttfc, ttfc_se = m.mean_ttfc()
    total = sum(m.served.values())
    row = [seed, m.n_requests, m.n_measured,
           f"{stall:.6g}", f"{stall_se:.3g}", f"{ttfc:.6g}", f"{ttfc_se:.3g}",
           f"{m.miss_rate():.6g}",
           f"{m.served['edge_hit'] / total if total else 0.0:.6g}",
           f"{m.served['edge_join'] / total if total else 0.0:.6g}"]
    for s in sigma_grid:
        est, se = m.sdtp(s)
        row += [f"{est:.6g}", f"{se:.3g}"]
    return row


def cmd_simulate(args):
    exp = cfgmod.load_experiment(args.config)
    vars = _initial_vars(exp, args)
    seeds = _parse_ints(args.seeds)
    if not seeds:
        raise StallkitError("need at least one seed")
    sim_cfg = exp.sim
    horizon = float(args.horizon or sim_cfg.get("horizon_s", 10_000.0))
    sigma_grid = _parse_floats(args.sigma_grid or
                               ",".join(map(str, sim_cfg.get("sigma_grid",
                                                             [0, 2, 4, 8, 16]))))
    policy_kwargs = {}
    for cfg_key, kw_key in (("qlru_q", "q"), ("klru_k", "k"),
                            ("adaptsize_window", "adaptsize_window")):
        if cfg_key in sim_cfg:
            policy_kwargs[kw_key] = sim_cfg[cfg_key]
    sim_kw = dict(
        sigma_grid=sigma_grid,
        warmup_frac=float(sim_cfg.get("warmup_frac", 0.1)),
        ttl_mode=str(sim_cfg.get("ttl_mode", "fixed")),
        policy_kwargs=policy_kwargs,
        request_log=bool(args.request_log),
    )
    policy = args.policy or sim_cfg.get("policy", "ttl")
    results = _run_seeds(exp, exp.topo, vars, policy, seeds, horizon, sim_kw,
                         trace_path=args.trace)
    if args.request_log:
        with open(args.request_log, "w", newline="") as fh:
            fh.write(_meta_line(exp, seeds) + "\n")
            w = csv.writer(fh)
            w.writerow(["seed", "request", "file", "router", "start_s",
                        "served_from", "stall_s", "ttfc_s"])
            for seed, m in results:
                for k, rec in enumerate(m.request_log or []):
                    w.writerow([seed, k, rec.file, rec.router, f"{rec.start:.6g}",
                                rec.served_from, f"{rec.stall:.6g}",
                                f"{rec.ttfc:.6g}"])
    header = ["seed", "n_requests", "n_measured", "mean_stall", "mean_stall_se",
              "ttfc_mean", "ttfc_se", "miss_rate", "edge_hit_rate", "edge_join_rate"]
    for s in sigma_grid:
        header += [f"sdtp_{s:g}", f"sdtp_{s:g}_se"]
    rows = [_metrics_row(seed, m, sigma_grid) for seed, m in results]
    stalls = np.array([m.mean_stall()[0] for _, m in results])
    agg = ["aggregate", "", "", f"{stalls.mean():.6g}",
           f"{stalls.std(ddof=1) / np.sqrt(len(stalls)) if len(stalls) > 1 else 0.0:.3g}",
           "", "", "", "", ""]
    for s in sigma_grid:
        vals = np.array([m.sdtp(s)[0] for _, m in results])
        agg += [f"{vals.mean():.6g}",
                f"{vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0:.3g}"]
    _write_rows(args.out, header, rows + [agg], _meta_line(exp, seeds))
    print(f"wrote {args.out}")
    return 0


def cmd_sweep(args):
    exp = cfgmod.load_experiment(args.config)
    values = _parse_floats(args.values)
    if not values:
        raise StallkitError("sweep needs at least one value")
    seeds = _parse_ints(args.seeds) if args.seeds else []
    cfg = _optimizer_config(exp, args)
    sim_cfg = exp.sim
    horizon = float(args.horizon or sim_cfg.get("horizon_s", 10_000.0))
    policy = args.policy or sim_cfg.get("policy", "ttl")
    rows = []
    header = ["axis", "value", "objective", "weighted_sdtp", "weighted_msd",
              "sim_miss_rate", "sim_mean_stall"]
    vars0 = _initial_vars(exp, args)

    if args.axis == "theta":
        candidates = {}
        warm = vars0
        for theta in values:
            c = dataclasses.replace(cfg, theta=float(theta))
            warm, _tr = opt.alternate(exp.topo, warm, c, baseline=args.baseline)
            candidates[theta] = warm
        pool = list(candidates.values())
        for theta in values:
            c = dataclasses.replace(cfg, theta=float(theta))
            best = min(pool, key=lambda v: opt.objective_value(exp.topo, v, c))
            tail = opt.objective_value(exp.topo, best,
                                       dataclasses.replace(c, theta=1.0))
            mean = opt.objective_value(exp.topo, best,
                                       dataclasses.replace(c, theta=0.0))
            rows.append([f"{args.axis}", f"{theta:g}",
                         f"{opt.objective_value(exp.topo, best, c):.8g}",
                         f"{tail:.8g}", f"{mean:.8g}", "", ""])
    else:
        warm = vars0
        for value in values:
            if args.axis == "arrival_scale":
                topo = _scaled_topology(exp.topo, arrival_scale=value)
            elif args.axis == "bandwidth_scale":
                topo = _scaled_topology(exp.topo, bandwidth_scale=value)
            elif args.axis == "epsilon":
                topo = _scaled_topology(exp.topo, epsilon=value)
            elif args.axis == "capacity_ratio":
                topo = _scaled_topology(exp.topo, capacity_ratio=value)
            elif args.axis == "sigma":
                topo = exp.topo
            else:
                raise StallkitError(f"unknown sweep axis {args.axis!r}")
            c = cfg if args.axis != "sigma" else dataclasses.replace(cfg, sigma=value)
            if args.reoptimize:
                warm, _tr = opt.alternate(topo, warm, c, baseline=args.baseline)
                point_vars = warm
            else:
                from .model import project_feasible

                point_vars = project_feasible(warm, topo)
            obj = opt.objective_value(topo, point_vars, c)
            miss = stall = ""
            if seeds:
                results = _run_seeds(exp, topo, point_vars, policy, seeds, horizon,
                                     dict(sigma_grid=[c.sigma]))
                miss = f"{np.mean([m.miss_rate() for _, m in results]):.6g}"
                stall = f"{np.mean([m.mean_stall()[0] for _, m in results]):.6g}"
            rows.append([args.axis, f"{value:g}", f"{obj:.8g}", "", "", miss, stall])
    _write_rows(args.out, header, rows, _meta_line(exp, seeds))
    print(f"wrote {args.out}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="stallkit", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment YAML")
    common.add_argument("--vars", help="decision-variables YAML (default: uniform init)")
    common.add_argument("--out", required=True, help="output CSV/YAML path")

    b = sub.add_parser("bounds", parents=[common], help="evaluate analytic bounds")
    b.add_argument("--sigma-grid", default="0,2,4,8,16")
    b.add_argument("--ttfc-exponent", type=float, default=1.0)
    b.add_argument("--strict", action="store_true",
                   help="exit nonzero if any bound is infeasible")
    b.set_defaults(fn=cmd_bounds)

    o = sub.add_parser("optimize", parents=[common], help="run the alternating optimizer")
    o.add_argument("--baseline", default="none", choices=sorted(opt.BASELINES))
    o.add_argument("--theta", type=float)
    o.add_argument("--sigma", type=float)
    o.add_argument("--tol", type=float)
    o.add_argument("--max-outer-iters", dest="max_outer_iters", type=int)
    o.add_argument("--grad-mode", dest="grad_mode", choices=["analytic", "fd"])
    o.add_argument("--trace", help="write the objective trace CSV here")
    o.add_argument("--vars-csv", help="also export variables as long-format CSV")
    o.set_defaults(fn=cmd_optimize)

    s = sub.add_parser("simulate", parents=[common], help="run the simulator")
    s.add_argument("--policy", choices=["ttl", "lru", "qlru", "klru", "krandom",
                                        "adaptsize"])
    s.add_argument("--trace", help="CSV request trace (default: synthetic Poisson)")
    s.add_argument("--seeds", default="1")
    s.add_argument("--horizon", type=float)
    s.add_argument("--sigma-grid")
    s.add_argument("--request-log", dest="request_log",
                   help="also write a per-request CSV log here")
    s.set_defaults(fn=cmd_simulate)

    w = sub.add_parser("sweep", parents=[common], help="sweep a parameter axis")
    w.add_argument("--axis", required=True,
                   choices=["arrival_scale", "bandwidth_scale", "epsilon",
                            "capacity_ratio", "theta", "sigma"])
    w.add_argument("--values", required=True, help="comma-separated axis values")
    w.add_argument("--reoptimize", action="store_true")
    w.add_argument("--baseline", default="none", choices=sorted(opt.BASELINES))
    w.add_argument("--policy")
    w.add_argument("--seeds", default="")
    w.add_argument("--horizon", type=float)
    w.add_argument("--theta", type=float)
    w.add_argument("--sigma", type=float)
    w.add_argument("--tol", type=float)
    w.add_argument("--max-outer-iters", dest="max_outer_iters", type=int)
    w.add_argument("--grad-mode", dest="grad_mode", choices=["analytic", "fd"])
    w.set_defaults(fn=cmd_sweep)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StallkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
