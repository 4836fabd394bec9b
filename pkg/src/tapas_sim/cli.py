"""Command-line front end.

Subcommands: ``fit`` (train thermal models and report held-out error),
``gen-traces`` (write workload traces as CSV), ``simulate`` (run one or
more policies on a scenario), ``sweep`` (oversubscription-ratio capping
study), ``failure`` (emergency-impact matrix), ``report`` (collect
metrics.json files into one comparison table). Exit codes: 0 success,
1 runtime fault, 2 configuration error. ``TAPAS_SIM_THREADS`` bounds
sweep parallelism.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .engine import (Engine, POLICIES, Scenario, ScenarioError, TICKS_PER_DAY,
                     emergency_impacts, failure_scenario, pressure_scenario,
                     reference_scenario)
from .thermal import (FittingError, GroundTruth, fit_profile_set)
from .topology import GPUS_PER_SERVER, TopologyError, grid_topology
from .workload import (ArrivalParams, WorkloadError, generate_outside_temp,
                       generate_request_trace, generate_vm_arrivals,
                       EndpointSpec, diurnal_rate_series)

CONFIG_ERRORS = (ScenarioError, TopologyError, WorkloadError, FittingError)


def _load_scenario(args) -> Scenario:
    if getattr(args, "scenario", None):
        sc = Scenario.load(args.scenario)
    else:
        sc = reference_scenario()
    if args.seed is not None:
        sc = Scenario.from_dict({**sc.to_dict(), "seed": args.seed})
    return sc


def _write_logs(engine: Engine, outdir: Path) -> None:
    logs = {"allocator_log.csv": engine.allocator.log,
            "router_log.csv": engine.router.log,
            "configurator_log.csv": engine.configurator.log}
    for name, rows in logs.items():
        if not rows:
            continue
        with open(outdir / name, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def _run_policy(payload: tuple) -> dict:
    """Worker: run one scenario dict and return its summary."""
    sc = Scenario.from_dict(payload[0])
    return Engine(sc).run().summary()


def _max_workers() -> int:
    env = os.environ.get("TAPAS_SIM_THREADS")
    if env:
        n = int(env)
        if n <= 0:
            raise ScenarioError("TAPAS_SIM_THREADS: must be a positive integer")
        return n
    return min(os.cpu_count() or 1, 8)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 7
    topo = grid_topology(n_aisles=args.aisles, racks_per_row=args.racks,
                         servers_per_rack=args.servers_per_rack)
    gt = GroundTruth(seed, topo)

    if args.train_csv:
        rows = list(csv.DictReader(open(args.train_csv)))
        if not rows:
            raise ScenarioError(f"train csv: {args.train_csv} is empty")
        # External telemetry replaces generator sampling; columns are
        # kind (inlet|gpu), server_id, gpu, x1, x2, y.
        for r in rows:
            if r.get("kind") not in ("inlet", "gpu"):
                raise ScenarioError("train csv: kind must be inlet or gpu")

    fitted = fit_profile_set(gt, n_samples=args.samples, seed=seed + 100)
    fitted.save(out / "profiles.json")

    # Held-out error against fresh noisy samples the fit never saw.
    abs_err = []
    for sid in topo.server_ids:
        t_out, load, y = gt.sample_inlet(sid, 50, seed=seed + 999)
        pred = [fitted.inlet_models[sid].evaluate(a, b)
                for a, b in zip(t_out, load)]
        abs_err.extend(np.abs(np.array(pred) - y))
        for g in range(GPUS_PER_SERVER):
            gl, t_in, yg = gt.sample_gpu(sid, g, 50, seed=seed + 999)
            pred = [fitted.gpu_models[(sid, g)].evaluate(a, b)
                    for a, b in zip(gl, t_in)]
            abs_err.extend(np.abs(np.array(pred) - yg))
    mae = float(np.mean(abs_err))
    print(f"held-out MAE: {mae:.4f} C over {len(abs_err)} samples")
    print(f"wrote {out / 'profiles.json'}")
    return 0


def cmd_gen_traces(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = _load_scenario(args)
    arrivals = generate_vm_arrivals(ArrivalParams(
        n_vms=sc.n_vms, n_servers=sc.n_servers,
        iaas_fraction=sc.iaas_fraction, n_customers=sc.n_customers,
        n_endpoints=sc.n_endpoints,
        arrival_window_ticks=max(sc.duration_ticks - 1, 1),
        initial_fraction=sc.initial_fraction,
        long_lived_fraction=sc.long_lived_fraction), sc.seed)

    with open(out / "arrivals.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vm_id", "kind", "arrival_tick", "lifetime_ticks",
                    "customer_id", "endpoint_id"])
        for vm in arrivals:
            w.writerow([vm.vm_id, vm.kind, vm.arrival_tick, vm.lifetime_ticks,
                        vm.customer_id or "", vm.endpoint_id or ""])

    ep_counts: dict[str, int] = {}
    for vm in arrivals:
        if vm.kind == "saas":
            ep_counts[vm.endpoint_id] = ep_counts.get(vm.endpoint_id, 0) + 1
    with open(out / "requests.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["endpoint_id", "tick", "prompt_tokens", "decode_tokens",
                    "affinity_key"])
        for ep_id in sorted(ep_counts):
            # Same sizing rule the engine uses: peak scales with fleet size.
            peak = sc.saas_peak_util * ep_counts[ep_id] * 1000.0
            rates = diurnal_rate_series(sc.duration_ticks, peak, sc.seed, ep_id)
            spec = EndpointSpec(endpoint_id=ep_id, vm_count=ep_counts[ep_id],
                                rate_tps=tuple(rates))
            for b in generate_request_trace(
                    spec, sc.seed,
                    batches_per_tick=max(8, 8 * ep_counts[ep_id])):
                w.writerow([b.endpoint_id, b.tick, f"{b.prompt_tokens:.3f}",
                            f"{b.decode_tokens:.3f}", b.affinity_key])

    temps = generate_outside_temp(sc.duration_ticks, sc.seed,
                                  mean_c=sc.outside_mean_c,
                                  daily_amplitude_c=sc.outside_amplitude_c)
    with open(out / "outside_temp.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tick", "t_outside_c"])
        for t, v in enumerate(temps):
            w.writerow([t, f"{v:.4f}"])
    print(f"wrote {out / 'arrivals.csv'}, requests.csv, outside_temp.csv")
    return 0


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = _load_scenario(args)
    policies = [p.strip() for p in args.policy.split(",") if p.strip()]
    for p in policies:
        if p not in POLICIES:
            raise ScenarioError(f"policy: unknown policy {p!r}")
    summaries = {}
    for pol in policies:
        run_sc = Scenario.from_dict({**sc.to_dict(), "policy": pol,
                                     "log_decisions": args.logs})
        eng = Engine(run_sc)
        rep = eng.run()
        subdir = out / pol if len(policies) > 1 else out
        subdir.mkdir(parents=True, exist_ok=True)
        rep.save_metrics(subdir / "metrics.json")
        rep.save_timeseries(subdir / "timeseries.csv")
        if args.logs:
            _write_logs(eng, subdir)
        summaries[pol] = rep.summary()
        print(f"{pol}: peak temp {summaries[pol]['peak_temp_c']:.2f} C, "
              f"peak row power {summaries[pol]['peak_row_power_w']:.0f} W")
    if "baseline" in summaries and len(summaries) > 1:
        base = summaries["baseline"]
        print("policy          peak_temp_reduction  peak_power_reduction")
        for pol, s in summaries.items():
            if pol == "baseline":
                continue
            dt = 100 * (1 - s["peak_temp_c"] / base["peak_temp_c"])
            dp = 100 * (1 - s["peak_row_power_w"] / base["peak_row_power_w"])
            print(f"{pol:15s} {dt:18.1f}% {dp:19.1f}%")
    return 0


def cmd_sweep(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ratios = [float(r) for r in args.ratios.split(",")]
    if any(r < 0 for r in ratios):
        raise ScenarioError("oversubscription_pct: must be >= 0")
    policies = [p.strip() for p in args.policies.split(",")]
    for p in policies:
        if p not in POLICIES:
            raise ScenarioError(f"policy: unknown policy {p!r}")
    seed = args.seed if args.seed is not None else 7
    jobs = []
    for ratio in ratios:
        for pol in policies:
            sc = pressure_scenario(policy=pol, oversubscription_pct=ratio,
                                   seed=seed,
                                   duration_ticks=args.days * TICKS_PER_DAY)
            jobs.append((ratio, pol, sc.to_dict()))
    with ProcessPoolExecutor(max_workers=_max_workers()) as pool:
        results = list(pool.map(_run_policy, [(j[2],) for j in jobs]))
    path = out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["oversubscription_pct", "policy", "capping_fraction",
                    "capping_fraction_thermal", "capping_fraction_power",
                    "peak_temp_c", "peak_row_power_w"])
        for (ratio, pol, _), s in zip(jobs, results):
            w.writerow([ratio, pol, s["capping_fraction"],
                        s["capping_fraction_thermal"],
                        s["capping_fraction_power"],
                        s["peak_temp_c"], s["peak_row_power_w"]])
    print(f"wrote {path}")
    return 0


def cmd_failure(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 7
    kinds = ["power", "thermal"] if args.kind == "both" else [args.kind]
    policies = [p.strip() for p in args.policies.split(",")]
    matrix: dict[str, dict] = {}
    for kind in kinds:
        if kind == "none":
            matrix["none"] = {pol: {"iaas_perf_impact_pct": 0.0,
                                    "saas_perf_impact_pct": 0.0,
                                    "saas_quality_impact_pct": 0.0}
                              for pol in policies}
            continue
        fail_sc = failure_scenario(kind, seed=seed)
        ev = fail_sc.failures[0]
        t0, t1 = ev.start_tick, ev.start_tick + ev.duration_ticks
        matrix[kind] = {}
        for pol in policies:
            f_rep = Engine(Scenario.from_dict(
                {**fail_sc.to_dict(), "policy": pol})).run()
            n_rep = Engine(Scenario.from_dict(
                {**fail_sc.to_dict(), "policy": pol, "failures": []})).run()
            matrix[kind][pol] = emergency_impacts(f_rep, n_rep, t0, t1)
    path = out / "failure_matrix.json"
    path.write_text(json.dumps(matrix, indent=1, sort_keys=True) + "\n")
    for kind, by_pol in matrix.items():
        for pol, imp in by_pol.items():
            print(f"{kind:8s} {pol:10s} iaas_perf {imp['iaas_perf_impact_pct']:+7.2f}%  "
                  f"saas_perf {imp['saas_perf_impact_pct']:+7.2f}%  "
                  f"saas_quality {imp['saas_quality_impact_pct']:+7.2f}%")
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in sorted(Path(args.results).rglob("metrics.json")):
        rows.append(json.loads(path.read_text()))
    if not rows:
        raise ScenarioError(f"results: no metrics.json found under {args.results}")
    fields = sorted({k for r in rows for k in r})
    path = out / "report.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {path} ({len(rows)} runs)")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tapas-sim")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out")
        p.add_argument("--config", default=None,
                       help="JSON file of default argument values")

    p = sub.add_parser("fit", help="fit thermal models, report held-out MAE")
    common(p)
    p.add_argument("--samples", type=int, default=300)
    p.add_argument("--aisles", type=int, default=1)
    p.add_argument("--racks", type=int, default=2)
    p.add_argument("--servers-per-rack", type=int, default=4)
    p.add_argument("--train-csv", default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gen-traces", help="write workload traces as CSV")
    common(p)
    p.add_argument("--scenario", default=None)
    p.set_defaults(func=cmd_gen_traces)

    p = sub.add_parser("simulate", help="run one or more policies")
    common(p)
    p.add_argument("--scenario", default=None)
    p.add_argument("--policy", default="tapas",
                   help="comma-separated policy names")
    p.add_argument("--logs", action="store_true",
                   help="write allocator/router/configurator decision logs")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="oversubscription capping sweep")
    common(p)
    p.add_argument("--ratios", default="0,10,20,30,40")
    p.add_argument("--policies", default="baseline,tapas")
    p.add_argument("--days", type=int, default=2)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("failure", help="emergency impact matrix")
    common(p)
    p.add_argument("--kind", choices=["power", "thermal", "both", "none"],
                   default="both")
    p.add_argument("--policies", default="baseline,tapas")
    p.set_defaults(func=cmd_failure)

    p = sub.add_parser("report", help="collect metrics.json files into a table")
    common(p)
    p.add_argument("--results", default="out")
    p.set_defaults(func=cmd_report)
    return ap


def _apply_config_file(args) -> None:
    if getattr(args, "config", None):
        overrides = json.loads(Path(args.config).read_text())
        if not isinstance(overrides, dict):
            raise ScenarioError("config: expected a JSON object")
        for k, v in overrides.items():
            if not hasattr(args, k):
                raise ScenarioError(f"config: unknown option {k!r}")
            setattr(args, k, v)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        _apply_config_file(args)
        return args.func(args)
    except (*CONFIG_ERRORS, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
