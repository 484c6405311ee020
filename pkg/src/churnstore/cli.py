"""Command-line interface.

Subcommands: gen (emit a schedule dump), soup, run (store-retrieve), sweep,
report (aggregate result CSVs). Flags override config-file values."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import netgen
from .errors import ChurnstoreError
from .harness import SimulationConfig, config_from_sources, parse_config_file


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed-protocol", type=int, dest="protocol_seed")
    p.add_argument("--seed-adversary", type=int, dest="adversary_seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=float)
    p.add_argument("--rate-scale", type=float, dest="rate_scale")
    p.add_argument("--rounds", type=int, dest="horizon")
    p.add_argument("--trials", type=int)
    p.add_argument("--mode", choices=["replicate", "erasure"])


def _build_config(args) -> SimulationConfig:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {}
    for key in ("protocol_seed", "adversary_seed", "n", "d", "k", "rate_scale",
                "horizon", "trials", "mode", "out"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return config_from_sources(file_values, overrides)


def _outdir(cfg: SimulationConfig) -> str:
    out = cfg.out or "out"
    os.makedirs(out, exist_ok=True)
    return out


def cmd_gen(args) -> int:
    cfg = _build_config(args).resolved()
    sched = netgen.commit_churn_schedule(
        cfg.n, cfg.d, cfg.lambda_max, cfg.horizon, cfg.k, cfg.rate_scale,
        cfg.strategy, cfg.adversary_seed,
        rate_override=None if cfg.rate_override < 0 else cfg.rate_override,
        rewire_fraction=cfg.rewire_fraction)
    out = _outdir(cfg)
    path = os.path.join(out, "schedule.dump")
    with open(path, "w") as fh:
        sched.dump(fh)
    print(f"wrote {path}")
    print(f"schedule_hash {sched.schedule_hash()}")
    return 0


def cmd_soup(args) -> int:
    from .scenarios import scenario_soup
    cfg = _build_config(args)
    rep = scenario_soup(cfg)
    out = _outdir(cfg)
    with open(os.path.join(out, "soup_report.json"), "w") as fh:
        json.dump(rep, fh, indent=2, default=str)
    print(f"max engine-vs-oracle TV      {rep['max_tv']:.4f}")
    print(f"max survival gap             {rep['max_survival_gap']:.4f}")
    print(f"soup band fraction           {rep['band_fraction']:.3f} "
          f"({rep['band_pairs']} pairs, {rep['window_survivors']} survivors)")
    if "reversibility_max_err" in rep:
        print(f"reversibility max error      {rep['reversibility_max_err']:.2e}")
    return 0


def cmd_run(args) -> int:
    from .scenarios import scenario_store_retrieve
    cfg = _build_config(args)
    trials = max(1, cfg.trials)
    out = _outdir(cfg)
    agg = []
    for t in range(trials):
        tcfg = config_from_sources(
            {f: getattr(cfg, f) for f in ("n", "d", "k", "rate_scale", "horizon",
                                          "mode", "strategy", "n_items")},
            {"protocol_seed": cfg.protocol_seed + 2 * t,
             "adversary_seed": cfg.adversary_seed + 2 * t})
        rep = scenario_store_retrieve(tcfg)
        sim = rep.pop("sim")
        sim.write_outputs(out, tag=f"trial{t}")
        rep.pop("results", None)
        rep.pop("availability", None)
        agg.append(rep)
        print(f"trial {t}: success {rep['successes']}/{rep['trials']}, "
              f"median latency {rep['latency_median']}, "
              f"epochs good {rep['epochs_good']}/{rep['epochs_measured']}")
    with open(os.path.join(out, "run_report.json"), "w") as fh:
        json.dump(agg, fh, indent=2, default=str)
    return 0


def cmd_sweep(args) -> int:
    from .scenarios import scenario_sweep, sweep_csv
    cfg = _build_config(args)
    scales = [float(s) for s in args.rate_scales.split(",")]
    rows = scenario_sweep(cfg, rate_scales=scales)
    out = _outdir(cfg)
    path = os.path.join(out, "sweep.csv")
    with open(path, "w") as fh:
        fh.write(sweep_csv(rows))
    for row in rows:
        print(f"rate_scale={row['rate_scale']:<4} rate={row['rate']:<4} "
              f"success={row['success_rate']:.2f} "
              f"avail={row['availability_rate']:.2f}")
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    import csv as csvmod
    cfg = _build_config(args)
    out = _outdir(cfg)
    files = sorted(f for f in os.listdir(out) if f.endswith("_metrics.csv"))
    if not files:
        print(f"no *_metrics.csv files in {out}", file=sys.stderr)
        return 1
    for fname in files:
        with open(os.path.join(out, fname)) as fh:
            rows = list(csvmod.DictReader(fh))
        if not rows:
            continue
        last = rows[-1]
        drop = sum(int(r["messages_dropped"]) for r in rows)
        sent = sum(int(r["messages_sent"]) for r in rows)
        p99 = max(float(r["p99_units"]) for r in rows)
        print(f"{fname}: rounds={len(rows)} sent={sent} dropped={drop} "
              f"p99_units_max={p99:.0f} in_flight_end={last['in_flight']}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="churnstore",
        description="storage and search in dynamic P2P networks under churn")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("gen", cmd_gen), ("soup", cmd_soup), ("run", cmd_run),
                     ("sweep", cmd_sweep), ("report", cmd_report)):
        p = sub.add_parser(name)
        _add_common(p)
        if name == "sweep":
            p.add_argument("--rate-scales", default="0,1,2,4")
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ChurnstoreError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
