"""Experiment scenarios: soup validation, store-retrieve campaigns, committee
lifetime studies, and churn-rate sweeps. Each returns a plain report dict and
can be driven from the CLI."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
from scipy import stats as sstats

from . import netgen, walks
from .errors import InsufficientSamples, TooLarge
from .harness import Simulation, SimulationConfig


def _scenario_rng(cfg: SimulationConfig, tag: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([0x5C, cfg.protocol_seed, tag]))


# -- soup ---------------------------------------------------------------------


def soup_band_fraction(schedule, r0: int, r1: int, sources: np.ndarray):
    """Fraction of oracle-computed (source, destination) pairs over
    [r0, r1]-window survivors with probability inside [1/17n, 3/2n]."""
    n = schedule.n
    lo, hi = 1.0 / (17 * n), 3.0 / (2 * n)
    survivors = schedule.present_throughout(r0, r1)
    surv_set = set(int(x) for x in survivors)
    inside = 0
    total = 0
    for s in sources:
        dv = walks.exact_walk_distribution(schedule, int(s), r0, r1)
        mask = np.fromiter((int(i) in surv_set for i in dv.ids), bool,
                           count=dv.ids.size)
        probs = dv.probs[mask]
        inside += int(np.count_nonzero((probs >= lo) & (probs <= hi)))
        total += probs.size
    return inside / max(1, total), total


def engine_oracle_tv(schedule, source: int, r0: int, T: int, n_walks: int,
                     protocol_seed: int):
    """Spawn one cohort at the source and compare the empirical destination
    histogram and survival fraction against the exact oracle."""
    cfg = walks.WalkConfig(n=schedule.n, alpha=36, h=1, walk_len=T,
                           forward_cap=10**9)
    eng = walks.WalkEngine(schedule, cfg, protocol_seed=protocol_seed)
    eng.spawn_walks(source, r0, count=n_walks)
    for r in range(r0 + 1, r0 + T + 1):
        eng.step_round(r)
    recv, _, _ = eng.harvest_arrays(r0 + T)
    dv = walks.exact_walk_distribution(schedule, source, r0, r0 + T)
    idx = {int(i): j for j, i in enumerate(dv.ids)}
    emp = np.zeros(dv.ids.size)
    for node, cnt in zip(*np.unique(recv, return_counts=True)):
        emp[idx[int(node)]] = cnt / n_walks
    tv = walks.total_variation(emp, dv.probs)
    surv_emp = recv.size / n_walks
    surv_exact = 1.0 - dv.kill_mass
    return tv, surv_emp, surv_exact


def scenario_soup(cfg: SimulationConfig, n_sources: int = 4,
                  walks_per_source: int = 250_000,
                  check_reversibility: bool = None) -> dict:
    """Oracle-backed walk validation on one seeded schedule."""
    cfg = cfg.resolved()
    if cfg.n > 4096:
        raise TooLarge("soup scenario is oracle-backed; n must be <= 4096")
    schedule = netgen.commit_churn_schedule(
        cfg.n, cfg.d, cfg.lambda_max, cfg.horizon, cfg.k, cfg.rate_scale,
        cfg.strategy, cfg.adversary_seed,
        rate_override=None if cfg.rate_override < 0 else cfg.rate_override,
        rewire_fraction=cfg.rewire_fraction)
    tau = cfg.tau
    r0 = 0
    T = cfg.walk_len
    rng = _scenario_rng(cfg, 1)
    ids0 = schedule.snapshots[r0].ids
    sources = rng.choice(ids0, size=min(n_sources, ids0.size), replace=False)
    rows = []
    for s in sources:
        tv, se, sx = engine_oracle_tv(schedule, int(s), r0, T,
                                      walks_per_source, cfg.protocol_seed)
        rows.append({"source": int(s), "tv": tv, "survival_emp": se,
                     "survival_exact": sx})
    r1 = min(r0 + 2 * tau, schedule.horizon - 1)
    surv = schedule.present_throughout(r0, r1)
    band_sources = rng.choice(surv, size=min(n_sources * 4, surv.size),
                              replace=False) if surv.size else np.empty(0, int)
    band_frac, band_pairs = soup_band_fraction(schedule, r0, r1, band_sources)
    report = {
        "n": cfg.n, "rate": int(schedule.events[1].count) if schedule.horizon > 1 else 0,
        "walk_tv": rows,
        "max_tv": max(r["tv"] for r in rows),
        "max_survival_gap": max(abs(r["survival_emp"] - r["survival_exact"])
                                for r in rows),
        "band_fraction": band_frac,
        "band_pairs": band_pairs,
        "window_survivors": int(surv.size),
    }
    if check_reversibility is None:
        check_reversibility = cfg.n <= 64
    if check_reversibility:
        t0b, tb = 1, min(1 + tau, schedule.horizon - 1)
        ids_t = schedule.snapshots[tb].ids
        fwd = np.zeros((cfg.n, cfg.n))
        for si, s in enumerate(schedule.snapshots[t0b].ids):
            fwd[:, si] = walks.exact_walk_distribution(schedule, int(s), t0b, tb).probs
        max_err = 0.0
        for di in range(cfg.n):
            col = fwd[di, :]
            if col.sum() <= 0:
                continue
            _, cond_rev = walks.conditional_origin_reversed(
                schedule, int(ids_t[di]), t0b, tb)
            max_err = max(max_err, float(np.abs(col / col.sum() - cond_rev).max()))
        report["reversibility_max_err"] = max_err
    return report


# -- store / retrieve ----------------------------------------------------------


def _pick_present(sim: Simulation, r: int, rng) -> int:
    ids = sim.schedule.snapshots[r].ids
    return int(ids[rng.integers(0, ids.size)])


def scenario_store_retrieve(cfg: SimulationConfig, schedule=None) -> dict:
    """Store cfg.n_items items at staggered rounds, retrieve each later from
    a random live node, and report success, latency, availability and budget."""
    cfg = cfg.resolved()
    sim = Simulation(cfg, schedule=schedule)
    rng = _scenario_rng(cfg, 2)
    trials = []
    items = {}

    def make_store(i):
        def act(s, r):
            u = _pick_present(s, r, rng)
            rec = {"item": None, "store_round": r, "storer": u,
                   "store_ok": False, "result": None}
            trials.append(rec)
            try:
                task = s.store(u, s.random_payload(), r)
            except InsufficientSamples:
                rec["reason"] = "store-insufficient-samples"
                return
            rec["store_ok"] = True
            rec["item"] = task.item.item_id
            items[task.item.item_id] = rec
            rr = r + cfg.retrieve_delay
            if rr < s.schedule.horizon:
                s.at_round(rr, make_retrieve(task.item.item_id))
        return act

    def make_retrieve(item_id):
        def act(s, r):
            u = _pick_present(s, r, rng)
            task = s.retrieve(u, item_id, r)
            items[item_id]["ret_task"] = task.task_id
        return act

    for i in range(cfg.n_items):
        r = cfg.store_start + i * cfg.store_spacing
        if r < cfg.horizon:
            sim.at_round(r, make_store(i))
    sim.run()
    by_task = {}
    for res in sim.results:
        by_task.setdefault(res.item_id, res)
    for rec in trials:
        if rec["item"] is not None:
            rec["result"] = by_task.get(rec["item"])
    ok = [rec for rec in trials
          if rec["result"] is not None and rec["result"].success]
    lat = sorted(r["result"].rounds_elapsed for r in ok)
    availability = []
    for item_id, rec in items.items():
        for r in range(rec["store_round"] + 2 * sim.tau,
                       cfg.horizon - sim.tau, sim.tau):
            av, rate = sim.is_available(item_id, r)
            availability.append({"item": item_id.hex()[:8], "round": r,
                                 "available": av, "hit_rate": rate})
    rows = np.array(sim.metrics.rows, dtype=object)
    p99s = np.array([row[11] for row in sim.metrics.rows], dtype=float)
    maxs = np.array([row[10] for row in sim.metrics.rows], dtype=float)
    health = [e for e in sim.metrics.events if e["kind"] == "committee-health"]
    report = {
        "trials": len(trials),
        "stores_ok": sum(1 for t in trials if t["store_ok"]),
        "successes": len(ok),
        "success_rate": len(ok) / max(1, len(trials)),
        "latency_median": float(lat[len(lat) // 2]) if lat else None,
        "latency_max": float(lat[-1]) if lat else None,
        "availability": availability,
        "availability_rate": (sum(1 for a in availability if a["available"])
                              / max(1, len(availability))),
        "epochs_measured": len(health),
        "epochs_good": sum(1 for e in health if e["good"]),
        "budget_p99_max": float(p99s.max()) if p99s.size else 0.0,
        "budget_max": float(maxs.max()) if maxs.size else 0.0,
        "budget_cap": cfg.budget_cap_units,
        "metrics_hash": sim.metrics.csv_hash(),
        "schedule_hash": sim.schedule.schedule_hash(),
        "results": [r["result"] for r in trials],
        "tau": sim.tau,
    }
    report["sim"] = sim
    return report


# -- committee lifetime ----------------------------------------------------------


def geometric_fit_pvalue(lifetimes, censored_at):
    """Chi-square goodness-of-fit of per-epoch failure hazard to a constant
    (the memoryless shape of a geometric lifetime).

    lifetimes: epoch index of first not-good epoch per committee (1-based),
    or None when never observed bad. censored_at: epochs observed for each.
    Returns (p_value, failures, exposure)."""
    failures = [lt for lt in lifetimes if lt is not None]
    n_fail = len(failures)
    exposure = sum(censored_at)
    if exposure == 0:
        return 1.0, 0, 0
    p_hat = n_fail / exposure
    if n_fail < 8 or p_hat in (0.0, 1.0):
        return 1.0, n_fail, exposure
    max_epoch = max(censored_at)
    obs = np.zeros(max_epoch + 1)
    at_risk = np.zeros(max_epoch + 1)
    for lt, cz in zip(lifetimes, censored_at):
        last = lt if lt is not None else cz
        for j in range(1, min(last, max_epoch) + 1):
            at_risk[j] += 1
        if lt is not None and lt <= max_epoch:
            obs[lt] += 1
    exp = at_risk * p_hat
    # merge epochs until each bin expects >= 5 failures
    bins_o, bins_e = [], []
    acc_o = acc_e = 0.0
    for j in range(1, max_epoch + 1):
        acc_o += obs[j]
        acc_e += exp[j]
        if acc_e >= 5.0:
            bins_o.append(acc_o)
            bins_e.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 and bins_e:
        bins_o[-1] += acc_o
        bins_e[-1] += acc_e
    if len(bins_e) < 2:
        return 1.0, n_fail, exposure
    chi2 = sum((o - e) ** 2 / e for o, e in zip(bins_o, bins_e))
    df = len(bins_e) - 1
    return float(sstats.chi2.sf(chi2, df)), n_fail, exposure


def scenario_committee_lifetime(cfg: SimulationConfig, n_committees: int = 8,
                                schedule=None) -> dict:
    """Create plain committees at staggered rounds and observe per-epoch
    goodness and lifetimes until the horizon."""
    cfg = cfg.resolved()
    sim = Simulation(cfg, schedule=schedule)
    rng = _scenario_rng(cfg, 3)
    created = []

    def make_create(i):
        def act(s, r):
            for _ in range(4):
                u = _pick_present(s, r, rng)
                try:
                    task = s.create_plain_committee(u, r)
                except InsufficientSamples:
                    continue
                created.append(task)
                return
        return act

    start = 2 * cfg.tau + 1
    for i in range(n_committees):
        r = start + i * 3
        if r < cfg.horizon:
            sim.at_round(r, make_create(i))
    sim.run()
    lifetimes = [t.first_bad_epoch for t in created]
    censored = [t.epochs_observed for t in created]
    all_health = [e for e in sim.metrics.events if e["kind"] == "committee-health"]
    pval, n_fail, exposure = geometric_fit_pvalue(lifetimes, censored)
    return {
        "committees": len(created),
        "epochs_measured": len(all_health),
        "epochs_good": sum(1 for e in all_health if e["good"]),
        "good_rate": (sum(1 for e in all_health if e["good"])
                      / max(1, len(all_health))),
        "failures": n_fail,
        "exposure_epochs": exposure,
        "geometric_p": pval,
        "lifetimes": lifetimes,
        "censored_at": censored,
        "metrics_hash": sim.metrics.csv_hash(),
        "sim": sim,
    }


# -- sweep -----------------------------------------------------------------------


def scenario_sweep(cfg: SimulationConfig, rate_scales=(0.0, 1.0, 2.0, 4.0),
                   ks=None) -> list:
    """Grid over churn parameters with fixed seeds; one summary row per cell."""
    ks = [cfg.k] if ks is None else list(ks)
    rows = []
    for k in ks:
        for rs in rate_scales:
            cell = replace(cfg, rate_scale=float(rs), k=float(k))
            rep = scenario_store_retrieve(cell)
            rows.append({
                "k": k, "rate_scale": rs,
                "rate": netgen.churn_rate(cfg.n, k, rs),
                "trials": rep["trials"],
                "success_rate": rep["success_rate"],
                "latency_median": rep["latency_median"],
                "availability_rate": rep["availability_rate"],
                "epochs_good": rep["epochs_good"],
                "epochs_measured": rep["epochs_measured"],
                "budget_p99_max": rep["budget_p99_max"],
            })
    return rows


def sweep_csv(rows) -> str:
    cols = list(rows[0].keys()) if rows else []
    out = [",".join(cols)]
    for row in rows:
        out.append(",".join(str(row[c]) for c in cols))
    return "\n".join(out) + "\n"
