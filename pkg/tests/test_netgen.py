"""Expander generation, spectral certification, and churn schedules."""

import math

import numpy as np
import pytest

from churnstore import netgen
from churnstore.errors import (GenerationExhausted, InvalidParams,
                               OutOfHorizon, RateTooHigh)


def dense_lambda2(adj, d):
    """Full-spectrum oracle: |lambda_2| of A/d by dense eigendecomposition."""
    n = adj.shape[0]
    A = np.zeros((n, n))
    for s in range(n):
        A[s, adj[s]] = 1.0
    w = np.linalg.eigvalsh(A / d)
    return max(abs(w[0]), abs(w[-2]))


def test_k4_is_complete_graph_with_lambda_third():
    g = netgen.build_regular_expander(4, 3, 0.5, seed=1)
    for s in range(4):
        assert set(g.adj[s]) == set(range(4)) - {s}
    est = netgen.estimate_lambda(g, tol=1e-8)
    assert abs(est - 1.0 / 3.0) < 1e-7
    assert g.lambda_bound <= 0.5


def test_two_regular_on_four_nodes_is_bipartite_cycle():
    with pytest.raises(GenerationExhausted):
        netgen.build_regular_expander(4, 2, 0.9, seed=1, max_attempts=5)


def test_invalid_params():
    with pytest.raises(InvalidParams):
        netgen.build_regular_expander(5, 3, 0.9, seed=1)   # n*d odd
    with pytest.raises(InvalidParams):
        netgen.build_regular_expander(8, 1, 0.9, seed=1)   # degree too small
    with pytest.raises(InvalidParams):
        netgen.build_regular_expander(4, 4, 0.9, seed=1)   # n <= d
    with pytest.raises(InvalidParams):
        netgen.build_regular_expander(16, 4, 1.2, seed=1)  # bound not in (0,1)


def test_five_cycle_lambda_matches_analytic_value():
    # eigenvalues of C5 / 2 are cos(2*pi*k/5); largest non-trivial |.| is cos(pi/5)
    adj = np.array([[(i - 1) % 5, (i + 1) % 5] for i in range(5)], dtype=np.int32)
    g = netgen.GraphSnapshot(round=0, d=2, ids=np.arange(5, dtype=np.int32),
                             adj=adj, lambda_bound=1.0)
    est = netgen.estimate_lambda(g, tol=1e-8)
    assert abs(est - math.cos(math.pi / 5)) < 1e-6


def test_estimate_lambda_matches_dense_oracle():
    g = netgen.build_regular_expander(64, 8, 0.7, seed=1)
    est = netgen.estimate_lambda(g, tol=1e-7)
    assert abs(est - dense_lambda2(g.adj, 8)) < 1e-6


def test_churn_rate_formula_example():
    # floor(4 * 1024 / ln(1024)^2) = floor(4096 / 48.05) = 85
    assert netgen.churn_rate(1024, 2.0, 4.0) == 85


def test_zero_churn_schedule_membership_constant():
    s = netgen.commit_churn_schedule(32, 4, 0.9, horizon=20, k=2.0,
                                     rate_scale=0.0, strategy="none", seed=3)
    nodes0 = s.snapshots[0].nodes
    for r in range(20):
        assert s.events[r].count == 0
        assert s.snapshots[r].nodes == nodes0


def test_rate_too_high():
    with pytest.raises(RateTooHigh):
        netgen.commit_churn_schedule(16, 4, 0.9, horizon=4, k=1.5,
                                     rate_scale=0.0, strategy="uniform-random",
                                     seed=1, rate_override=16)


def test_oldest_first_removes_smallest_ids():
    s = netgen.commit_churn_schedule(16, 4, 0.92, horizon=6, k=2.0,
                                     rate_scale=0.0, strategy="oldest-first",
                                     seed=3, rate_override=2,
                                     rewire_fraction=0.0)
    # round 1 removes the two oldest (smallest ids among the originals)
    assert sorted(s.events[1].removed.tolist()) == [0, 1]
    assert sorted(s.events[2].removed.tolist()) == [2, 3]


def test_block_strategy_contiguous_id_ranges():
    s = netgen.commit_churn_schedule(16, 4, 0.92, horizon=5, k=2.0,
                                     rate_scale=0.0, strategy="block",
                                     seed=3, rate_override=3,
                                     rewire_fraction=0.0)
    for r in (1, 2, 3):
        removed = np.sort(s.events[r].removed)
        present_sorted = np.sort(s.snapshots[r - 1].ids)
        pos = np.searchsorted(present_sorted, removed)
        assert np.all(np.diff(pos) == 1), "block removals must be contiguous"


def test_snapshot_invariants_hold_under_churn_and_rewiring():
    s = netgen.commit_churn_schedule(48, 4, 0.92, horizon=12, k=2.0,
                                     rate_scale=0.0, strategy="uniform-random",
                                     seed=5, rate_override=3,
                                     rewire_fraction=0.1)
    for r in range(12):
        netgen.validate_snapshot(s.snapshots[r], lambda_max=0.92)
        ev = s.events[r]
        assert ev.removed.size == ev.added.size
        if r > 0:
            assert ev.removed.size == 3


def test_membership_delta_matches_event():
    s = netgen.commit_churn_schedule(32, 4, 0.92, horizon=8, k=2.0,
                                     rate_scale=0.0, strategy="uniform-random",
                                     seed=9, rate_override=2,
                                     rewire_fraction=0.05)
    for r in range(1, 8):
        prev = s.snapshots[r - 1].nodes
        cur = s.snapshots[r].nodes
        ev = s.events[r]
        assert prev - cur == set(ev.removed.tolist())
        assert cur - prev == set(ev.added.tolist())


def test_fresh_ids_never_reused():
    s = netgen.commit_churn_schedule(32, 4, 0.92, horizon=15, k=2.0,
                                     rate_scale=0.0, strategy="uniform-random",
                                     seed=7, rate_override=4,
                                     rewire_fraction=0.0)
    seen = set(s.snapshots[0].ids.tolist())
    for r in range(1, 15):
        added = set(s.events[r].added.tolist())
        assert not (added & seen), "added ids must be globally fresh"
        seen |= added
    # one contiguous presence interval per id
    assert np.all(s.join_round < s.leave_round)


def test_schedule_replay_is_byte_identical():
    kw = dict(n=32, d=4, lambda_max=0.92, horizon=10, k=2.0, rate_scale=2.0,
              strategy="uniform-random", seed=13, rewire_fraction=0.1)
    a = netgen.commit_churn_schedule(**kw)
    b = netgen.commit_churn_schedule(**kw)
    assert a.dump_text() == b.dump_text()
    assert a.schedule_hash() == b.schedule_hash()


def test_advance_round_zero_and_determinism():
    s = netgen.commit_churn_schedule(32, 4, 0.92, horizon=10, k=2.0,
                                     rate_scale=1.0, strategy="uniform-random",
                                     seed=3)
    snap0, ev0 = netgen.advance(s, 0)
    assert snap0.round == 0 and ev0.count == 0
    a = netgen.advance(s, 5)
    b = netgen.advance(s, 5)
    assert a[0] is b[0] and a[1] is b[1]
    with pytest.raises(OutOfHorizon):
        netgen.advance(s, 10)
    with pytest.raises(OutOfHorizon):
        netgen.advance(s, -1)


def test_dump_format():
    s = netgen.commit_churn_schedule(16, 4, 0.92, horizon=2, k=2.0,
                                     rate_scale=0.0, strategy="none", seed=3)
    lines = s.dump_text().splitlines()
    head = lines[0].split()
    assert head[0] == "round" and head[1] == "0"
    assert int(head[2]) == 16 and int(head[3]) == 4
    edge_lines = [ln for ln in lines[1:] if not ln.startswith("round")]
    # each undirected edge appears exactly once per snapshot
    assert len(edge_lines) == 2 * (16 * 4 // 2)
    u, v = map(int, edge_lines[0].split())
    assert u != v


def test_strategy_validation():
    with pytest.raises(InvalidParams):
        netgen.commit_churn_schedule(32, 4, 0.92, horizon=5, k=2.0,
                                     rate_scale=0.0, strategy="bogus", seed=1)
    with pytest.raises(InvalidParams):
        netgen.commit_churn_schedule(32, 4, 0.92, horizon=5, k=1.0,
                                     rate_scale=0.0, strategy="none", seed=1)
