"""Command-line entry point: run, baseline, mfe, analyze, verify."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis
from .io import (ParseError, ValidationError, __version__, config_hash, load_scenario, read_trace, write_trace)
from .simulator import MaxDaysExceeded, SimulationAborted, run_mfe_iteration, run_simulation

log = logging.getLogger("mfmarket")


def _parser():
    p = argparse.ArgumentParser(prog="mfmarket", description="Mean-field storage aggregators in a nodal market.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_args(sp, out=True):
        sp.add_argument("--scenario", required=True, help="bundled name or path to a YAML file")
        sp.add_argument("--days", type=int, help="override n_days")
        sp.add_argument("--mode", choices=("finite", "limit"), help="override execution mode")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    for name, helptext in (("run", "simulate with storage and learning"),
                           ("baseline", "simulate with storage idle")):
        sp = sub.add_parser(name, help=helptext)
        scenario_args(sp)
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--seed", type=int, help="single seed")
        g.add_argument("--seeds", type=int, help="first N seeds of the scenario (or 0..N-1)")
        sp.add_argument("--log-agents", action="store_true", help="also write per-household records")

    sp = sub.add_parser("mfe", help="limit-population fixed-point iteration")
    scenario_args(sp)
    sp.add_argument("--tol", type=float, default=1e-8)
    sp.add_argument("--max-days", type=int, default=200)
    sp.add_argument("--verify-tol", type=float, default=1e-3)

    sp = sub.add_parser("analyze", help="metrics from saved traces")
    sp.add_argument("--trace", required=True, action="append", help="trace directory (repeatable)")
    sp.add_argument("--metric", required=True, choices=("imv", "cost", "shape", "storage"))
    sp.add_argument("--window", default="last3d", help="all, lastNd or dayA-B")
    sp.add_argument("--summary", action="store_true", help="JSON summary across traces instead of CSV rows")

    sp = sub.add_parser("verify", help="invariant suite: dispatch fuzz, consistency-map ratios, contraction")
    sp.add_argument("--scenario", default="toy_1bus")
    sp.add_argument("--instances", type=int, default=200)
    sp.add_argument("--pairs", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    return p


def _config(args):
    cfg = load_scenario(args.scenario)
    if getattr(args, "days", None) is not None:
        cfg.n_days = args.days
    if getattr(args, "mode", None) is not None:
        cfg.mode = args.mode
    return cfg


def _seeds(args, cfg):
    if args.seed is not None:
        return [args.seed]
    if args.seeds is not None:
        return list(cfg.seeds[: args.seeds]) if args.seeds <= len(cfg.seeds) else list(range(args.seeds))
    return list(cfg.seeds)


def _cmd_simulate(args, storage):
    cfg = _config(args)
    if not storage:
        cfg.storage_enabled = False
    errs = cfg.validate()
    if errs:
        raise ValidationError([("config", e) for e in errs])
    out = Path(args.out)
    runs = []
    for seed in _seeds(args, cfg):
        t0 = time.perf_counter()
        trace = run_simulation(cfg, seed=seed, log_agents=args.log_agents)
        wall = time.perf_counter() - t0
        d = write_trace(trace, out / f"run{seed}", wall_time=wall)
        log.info("seed %d: %d steps in %.1f s -> %s", seed, trace.n_steps, wall, d)
        runs.append({"seed": seed, "dir": d.name, "wall_time_s": wall})
    manifest = {"command": args.command, "scenario": cfg.name, "config_hash": config_hash(cfg),
                "version": __version__, "runs": runs}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(runs)} trace(s) to {out}")
    return 0


def _cmd_mfe(args):
    cfg = _config(args)
    cfg.mode = "limit"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        rep = run_mfe_iteration(cfg, tol=args.tol, max_days=args.max_days)
    except MaxDaysExceeded as exc:
        (out / "mfe.json").write_text(json.dumps({"converged": False, "norms": exc.norms}, indent=2))
        raise
    ver = analysis.verify_mfe(rep, cfg, tol=args.verify_tol)
    ratio, r2, npts = analysis.geometric_fit(rep.norms)
    doc = {
        "scenario": cfg.name, "config_hash": config_hash(cfg), "version": __version__,
        "converged": rep.converged, "days": rep.days, "norms": rep.norms,
        "beliefs": np.asarray(rep.beliefs).tolist(),
        "geometric_fit": {"ratio": ratio, "r_squared": r2, "points": npts},
        "verification": {"passed": ver.passed, "failures": ver.failures(), "policy_gap": ver.policy_gap,
                         "meanfield_gap": ver.meanfield_gap, "price_gap": ver.price_gap},
        "wall_time_s": time.perf_counter() - t0,
    }
    (out / "mfe.json").write_text(json.dumps(doc, indent=2))
    print(f"converged in {rep.days} days; verification {'passed' if ver.passed else 'FAILED ' + str(ver.failures())}")
    return 0 if ver.passed else 1


def _cmd_analyze(args):
    traces = [read_trace(t) for t in args.trace]
    if args.summary:
        if args.metric != "imv":
            raise ValueError("--summary is available for the imv metric")
        vals = {t.meta["seed"]: analysis.trace_imv(t, args.window)["bus_mean"] for t in traces}
        sys.stdout.write(analysis.summary_json("imv", args.window, vals) + "\n")
        return 0
    rows = []
    for t in traces:
        rows += analysis.metric_rows(t, args.metric, args.window)
    sys.stdout.write(analysis.rows_to_csv(rows))
    return 0


def _cmd_verify(args):
    from .checks import consistency_ratios, ed_fuzz
    from .meanfield import build_transition_model
    cfg = load_scenario(args.scenario)
    fuzz = ed_fuzz(args.instances, seed=args.seed)
    ratios = {}
    g = cfg.grids()[0]
    for z in (0.05, 0.5, 0.9):
        r_mf, r_pi = consistency_ratios(build_transition_model(g, z), z, args.pairs, seed=args.seed,
                                        variant=cfg.mf_variant)
        ratios[str(z)] = {"meanfield": r_mf, "policy": r_pi, "bound": 1 - z}
    contraction = analysis.estimate_contraction(cfg, seed=args.seed).as_dict()
    ok = (fuzz["max_kkt_residual"] <= 1e-8 and fuzz["max_fd_error"] <= 1e-3
          and fuzz["max_uncongested_spread"] <= 1e-8
          and all(v["meanfield"] <= v["bound"] + 1e-9 and v["policy"] <= v["bound"] + 1e-9
                  for v in ratios.values()))
    print(json.dumps({"dispatch": fuzz, "consistency_ratios": ratios, "contraction": contraction,
                      "passed": ok}, indent=2))
    return 0 if ok else 1


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command in ("run", "baseline"):
            return _cmd_simulate(args, storage=args.command == "run")
        if args.command == "mfe":
            return _cmd_mfe(args)
        if args.command == "analyze":
            return _cmd_analyze(args)
        return _cmd_verify(args)
    except (ParseError, ValidationError, FileNotFoundError, ValueError, SimulationAborted,
            MaxDaysExceeded, OSError) as exc:
        print(f"mfmarket {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
