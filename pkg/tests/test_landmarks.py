"""Landmark tree depth formula and level-synchronous set construction."""

import math

import mpmath
import numpy as np
import pytest

from churnstore import landmarks as lm
from churnstore.errors import DomainError, InvalidParams
from churnstore.harness import Simulation, SimulationConfig
from conftest import FakeSim


def depth_oracle(n, k, dps=50):
    """Independent high-precision evaluation of the depth formula."""
    with mpmath.workdps(dps):
        n = mpmath.mpf(n)
        ln_n = mpmath.log(n)
        numer = mpmath.log(n, 2) - 2 * (mpmath.log(ln_n, 2) + mpmath.log(2))
        shrink = 2 * (1 - ln_n ** (-(k - 1) / 2)) * (1 - ln_n ** (-(k - 1))) \
            * (1 - n ** -3)
        if shrink <= 1:
            return None
        denom = 2 * mpmath.log(shrink, 2)
        return int(mpmath.ceil(numer / denom))


def test_depth_reference_value_n_2_20():
    assert depth_oracle(2 ** 20, 2.0) == 13
    assert lm.tree_depth(2 ** 20, 2.0) == 13


def test_depth_matches_oracle_across_grid():
    for p in range(11, 31, 2):
        for k in (1.5, 2.0, 3.0):
            want = depth_oracle(2 ** p, k)
            if want is None:
                with pytest.raises(DomainError):
                    lm.tree_depth(2 ** p, k)
            else:
                assert lm.tree_depth(2 ** p, k) == want


def test_depth_monotone_in_n():
    prev = None
    for p in range(12, 31):
        try:
            mu = lm.tree_depth(2 ** p, 2.0)
        except DomainError:
            continue
        if prev is not None:
            assert mu >= prev
        prev = mu


def test_depth_bounded_by_half_plus_delta_log2n():
    # above the threshold where the shrink factor reaches 2^(1/(1/2+delta)),
    # the depth stays under (1/2+delta) log2 n
    k = 2.0
    delta = k - 1.0
    for p in (24, 28, 32, 40):
        n = 2 ** p
        ln_n = math.log(n)
        shrink = 2 * (1 - ln_n ** (-0.5)) * (1 - ln_n ** (-1.0)) * (1 - n ** -3)
        if 2 * math.log2(shrink) >= 1.0 / (0.5 + delta):
            assert lm.tree_depth(n, k) <= (0.5 + delta) * math.log2(n)


def test_depth_guards():
    with pytest.raises(InvalidParams):
        lm.tree_depth(8, 2.0)
    with pytest.raises(DomainError):
        lm.tree_depth(64, 2.0)      # shrink factor below 1 at desk scale
    assert lm.tree_depth_or_default(64, 2.0) == max(1, math.ceil(1.5 * 6))


def test_depth_zero_build_is_live_members():
    fake = FakeSim(n=64, h=2)
    members = [3, 7, 11]
    fake.gone.add(7)
    build = lm.LandmarkBuild(fake, "b0", key=("i", "storage", ""),
                             item_id=b"i", kind="storage",
                             committee_ids=members, start_round=10,
                             target_depth=0)
    build.on_round(10)
    assert build.done
    assert build.joined == 2
    holders = fake.records.holders(("i", "storage", ""), 10)
    assert sorted(holders.tolist()) == [3, 11]


def test_full_binary_trees_with_unlimited_distinct_samples():
    fake = FakeSim(n=64, h=2)
    members = [1, 2, 3]
    mu = 2
    build = lm.LandmarkBuild(fake, "b1", key=("i", "storage", ""),
                             item_id=b"i", kind="storage",
                             committee_ids=members, start_round=10,
                             target_depth=mu)
    handlers = {"lm-": lambda m, r: build.handle_invite(m, r)}
    next_origin = [100]

    def feed_all(nodes, r):
        for node in nodes:
            fake.feed_samples(node, r, [next_origin[0], next_origin[0] + 1])
            next_origin[0] += 2

    frontier = list(members)
    r = 10
    while not build.done:
        feed_all(frontier, r)
        build.on_round(r)
        frontier = [m.dest for m in fake.outbox if m.kind == "lm-invite"]
        fake.pump(r + 1, handlers)
        r += 1
        if r > 20:
            break
        build.on_round(r) if False else None
    # drive remaining rounds of the level-synchronous build
    assert build.joined == 3 * (2 ** (mu + 1) - 1)


def test_records_expire_at_exact_ttl():
    fake = FakeSim(n=64, h=2)
    build = lm.LandmarkBuild(fake, "b2", key=("i", "storage", ""),
                             item_id=b"i", kind="storage",
                             committee_ids=[5], start_round=10,
                             target_depth=0)
    rec = fake.records.record_of(("i", "storage", ""), 5, 10)
    assert rec.expires_round - rec.created_round == 2 * fake.tau
    assert fake.records.has(("i", "storage", ""), 5, rec.expires_round - 1)
    assert not fake.records.has(("i", "storage", ""), 5, rec.expires_round)


def test_no_duplicate_records_within_build():
    fake = FakeSim(n=64, h=2)
    members = [1, 2]
    build = lm.LandmarkBuild(fake, "b3", key=("i", "storage", ""),
                             item_id=b"i", kind="storage",
                             committee_ids=members, start_round=10,
                             target_depth=3)
    handlers = {"lm-": lambda m, r: build.handle_invite(m, r)}
    # both parents sample the same two origins; only one invitation each may
    # convert into a record
    fake.feed_samples(1, 10, [50, 51])
    fake.feed_samples(2, 10, [50, 51])
    build.on_round(10)
    fake.pump(11, handlers)
    assert build.joined == 2 + 2
    assert sorted(fake.records.holders(("i", "storage", ""), 11).tolist()) \
        == [1, 2, 50, 51]


def test_committee_ids_travel_with_records():
    fake = FakeSim(n=64, h=2)
    members = [4, 9]
    build = lm.LandmarkBuild(fake, "b4", key=("i", "storage", ""),
                             item_id=b"i", kind="storage",
                             committee_ids=members, start_round=10,
                             target_depth=1)
    fake.feed_samples(4, 10, [70])
    build.on_round(10)
    fake.pump(11, {"lm-": lambda m, r: build.handle_invite(m, r)})
    rec = fake.records.record_of(("i", "storage", ""), 70, 11)
    assert rec.committee_ids == (4, 9)
    assert rec.kind == "storage"


def test_rebuild_cadence_and_generation_overlap():
    cfg = SimulationConfig(n=64, d=8, horizon=140, rate_scale=0.0,
                           strategy="none", alpha=72, h=2, m=2,
                           protocol_seed=1, adversary_seed=2)
    sim = Simulation(cfg)
    holder = {}

    def do_store(s, r):
        u = int(s.schedule.snapshots[r].ids[1])
        holder["task"] = s.store(u, s.random_payload(), r)

    sim.at_round(2 * sim.tau + 1, do_store)
    sim.run(rounds=120)
    builds = [e for e in sim.metrics.events if e["kind"] == "landmark-build"]
    created = holder["task"].committee_task.committee.created_round
    starts = sorted(e["round"] - e["depth"] for e in builds)
    # one build per tau rounds from committee creation
    assert starts == [created + j * sim.tau for j in range(len(starts))]
    assert len(builds) >= 4
    # steady state: at any round after the first TTL, 1..2 generations live
    key = holder["task"].record_key
    item = holder["task"].item.item_id
    for r in range(created + 2 * sim.tau, created + 4 * sim.tau):
        gens = set()
        table = sim.records._by_key.get(key, {})
        for hid, rec in table.items():
            if rec.expires_round > r:
                gens.add(rec.created_round)
    # builds every tau with TTL 2*tau leave at most 2 overlapping generations
    assert 1 <= len(gens) <= 2


def test_size_cap_formula():
    assert lm.set_size_cap(2, 1024, 3) == math.ceil(2 * math.log(1024)) * 15
