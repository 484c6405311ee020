"""Dynamic expander network generation.

Builds d-regular non-bipartite expander graphs with a certified spectral
bound, and pre-commits an oblivious churn schedule: the entire sequence of
graphs and node replacements is a pure function of the parameters and the
adversary seed, fixed before round 0.

Topology under churn uses slot inheritance: a removed node's d edge slots
are taken over by the fresh node replacing it, and an optional fraction of
edges is resampled each round via degree-preserving double-edge swaps,
after which the spectral bound is re-certified.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from .errors import (
    GenerationExhausted,
    InvalidParams,
    NotConverged,
    OutOfHorizon,
    RateTooHigh,
)

CHURN_STRATEGIES = ("none", "uniform-random", "oldest-first", "block")

# RNG domain tags keep the adversary stream disjoint from protocol streams.
_ADVERSARY_DOMAIN = 0xAD


@dataclass
class GraphSnapshot:
    """One round's topology. Slot s is a stable physical position whose
    occupant id may change over time; ``ids[s]`` is the current occupant and
    ``adj[s]`` its d neighbor slots."""

    round: int
    d: int
    ids: np.ndarray        # int32[n]: node id occupying each slot
    adj: np.ndarray        # int32[n, d]: neighbor slots
    lambda_bound: float

    @property
    def n(self) -> int:
        return self.ids.size

    @property
    def nodes(self) -> set:
        return set(int(i) for i in self.ids)

    def slot_of(self, node_id: int) -> int:
        hits = np.nonzero(self.ids == node_id)[0]
        if hits.size == 0:
            raise KeyError(node_id)
        return int(hits[0])

    def neighbors(self, node_id: int) -> np.ndarray:
        """Neighbor ids of ``node_id`` in this snapshot."""
        return self.ids[self.adj[self.slot_of(node_id)]]


@dataclass
class ChurnEvent:
    """Replacements applied when entering a round. ``added[i]`` inherits the
    slot (graph position) of ``removed[i]``."""

    round: int
    removed: np.ndarray    # int32
    added: np.ndarray      # int32
    slots: np.ndarray      # int32: the inherited slot indices

    @property
    def count(self) -> int:
        return self.removed.size


@dataclass
class DynamicNetworkSchedule:
    """A fully pre-committed dynamic network: graphs and churn for every
    round of the horizon, determined by (parameters, seed) alone."""

    n: int
    d: int
    horizon: int
    lambda_max: float
    k: float
    rate_scale: float
    strategy: str
    seed: int
    snapshots: list = field(default_factory=list)
    events: list = field(default_factory=list)
    join_round: np.ndarray = None   # int32 by id
    leave_round: np.ndarray = None  # int32 by id; == horizon if never removed
    id_to_slot: np.ndarray = None   # int32 by id; constant for an id's life
    preserving: bool = False        # walk state survives churn via slot inheritance

    @property
    def next_id(self) -> int:
        return self.join_round.size

    def is_present(self, node_id: int, r: int) -> bool:
        if node_id < 0 or node_id >= self.next_id:
            return False
        return bool(self.join_round[node_id] <= r < self.leave_round[node_id])

    def present_throughout(self, r0: int, r1: int) -> np.ndarray:
        """Ids present in every round of [r0, r1]. Ids are never reused, so
        presence at both ends implies presence throughout."""
        ids = np.arange(self.next_id, dtype=np.int64)
        mask = (self.join_round <= r0) & (self.leave_round > r1)
        return ids[mask]

    def dump(self, fh) -> None:
        for snap in self.snapshots:
            fh.write(f"round {snap.round} {snap.n} {snap.d} {snap.lambda_bound:.9f}\n")
            seen = set()
            for s in range(snap.n):
                u = int(snap.ids[s])
                for t in snap.adj[s]:
                    v = int(snap.ids[t])
                    e = (u, v) if u < v else (v, u)
                    if e not in seen:
                        seen.add(e)
                        fh.write(f"{e[0]} {e[1]}\n")

    def dump_text(self) -> str:
        buf = io.StringIO()
        self.dump(buf)
        return buf.getvalue()

    def schedule_hash(self) -> str:
        return hashlib.sha256(self.dump_text().encode()).hexdigest()


def _apply_operator(adj: np.ndarray, x: np.ndarray, d: int) -> np.ndarray:
    """y = (A/d) x - mean(x), columnwise: the degree-normalized adjacency
    operator with the uniform top eigenvector deflated (exact for regular
    graphs)."""
    y = x[adj].sum(axis=1) / d
    y -= y.mean(axis=0)
    return y


def estimate_lambda(g: GraphSnapshot, tol: float = 1e-6,
                    max_iter: int = 20_000, seed: int = 7,
                    block: int = 4) -> float:
    """Estimate |lambda_2| of A/d by block power iteration on the deflated
    squared operator, with Rayleigh-Ritz extraction of the top mode.

    Squaring removes sign oscillation between the +/- spectral extremes, and
    a 4-dimensional block tracks every near-extreme mode at once, so a single
    vector cannot stall on a saddle plateau between two close eigenvalues.
    The top Ritz value increases monotonically; Aitken extrapolation of its
    remaining gap (with the worst recent decay ratio) sets the stop."""
    n, d = g.n, g.d
    b = max(1, min(block, n - 1))
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((n, b))
    V -= V.mean(axis=0)
    V, _ = np.linalg.qr(V)
    est_prev = None
    delta_prev = None
    ratios = []
    streak = 0
    tiny = 0
    for _ in range(max_iter):
        W = _apply_operator(g.adj, V, d)
        gram = W.T @ W                  # V orthonormal: Ritz values of B^2
        top = float(np.linalg.eigvalsh(gram)[-1])
        est = math.sqrt(max(top, 0.0))
        U = _apply_operator(g.adj, W, d)
        norms = np.linalg.norm(U, axis=0)
        if norms.max() < 1e-300:
            return 0.0                  # B annihilates everything (e.g. K_n)
        V, _ = np.linalg.qr(U)
        if est_prev is not None:
            delta = est - est_prev
            if abs(delta) < 1e-14:
                tiny += 1
                if tiny >= 5:
                    return est
            else:
                tiny = 0
            if delta_prev is not None and delta > 0 and delta_prev > 0:
                ratios.append(delta / delta_prev)
                ratios = ratios[-8:]
                rho = min(max(ratios[-5:], default=1.0), 0.9999)
                remaining = delta * rho / (1.0 - rho)
                if len(ratios) >= 5 and delta < 0.25 * tol and remaining < 0.25 * tol:
                    streak += 1
                    if streak >= 3:
                        return min(1.0, est + remaining)
                else:
                    streak = 0
            delta_prev = delta
        est_prev = est
    raise NotConverged(f"lambda estimate did not stabilize in {max_iter} iterations")


def _bfs_connected_nonbipartite(adj: np.ndarray) -> tuple:
    """BFS 2-coloring: returns (connected, non_bipartite)."""
    n = adj.shape[0]
    color = np.full(n, -1, dtype=np.int8)
    color[0] = 0
    queue = [0]
    odd_cycle = False
    seen = 1
    while queue:
        nxt = []
        for u in queue:
            cu = color[u]
            for v in adj[u]:
                if color[v] == -1:
                    color[v] = cu ^ 1
                    nxt.append(int(v))
                    seen += 1
                elif color[v] == cu:
                    odd_cycle = True
        queue = nxt
    return seen == n, odd_cycle


def _certify(adj: np.ndarray, d: int, lambda_max: float, tol: float):
    """Check connectivity, non-bipartiteness and the spectral bound.
    Returns the certified bound or None if the graph fails."""
    connected, non_bip = _bfs_connected_nonbipartite(adj)
    if not (connected and non_bip):
        return None
    probe = GraphSnapshot(round=-1, d=d, ids=np.arange(adj.shape[0], dtype=np.int32),
                          adj=adj, lambda_bound=1.0)
    try:
        est = estimate_lambda(probe, tol=tol)
    except NotConverged:
        return None
    bound = est + tol
    if bound > lambda_max:
        return None
    return bound


def build_regular_expander(n: int, d: int, lambda_max: float, seed: int,
                           max_attempts: int = 60,
                           cert_tol: float = 1e-4) -> GraphSnapshot:
    """Sample a d-regular simple graph (configuration-model style sampling via
    networkx) and resample until the certified |lambda_2| bound holds."""
    if n * d % 2 != 0:
        raise InvalidParams(f"n*d must be even, got n={n}, d={d}")
    if d < 2:
        raise InvalidParams(f"degree must be at least 2, got d={d}")
    if not (0.0 < lambda_max < 1.0):
        raise InvalidParams(f"lambda_max must be in (0,1), got {lambda_max}")
    if n <= d:
        raise InvalidParams(f"need n > d, got n={n}, d={d}")
    for attempt in range(max_attempts):
        G = nx.random_regular_graph(d, n, seed=seed + attempt * 7919)
        adj = np.full((n, d), -1, dtype=np.int32)
        fill = np.zeros(n, dtype=np.int32)
        for u, v in G.edges():
            adj[u, fill[u]] = v
            fill[u] += 1
            adj[v, fill[v]] = u
            fill[v] += 1
        bound = _certify(adj, d, lambda_max, cert_tol)
        if bound is not None:
            return GraphSnapshot(round=0, d=d, ids=np.arange(n, dtype=np.int32),
                                 adj=adj, lambda_bound=float(bound))
    raise GenerationExhausted(
        f"no (n={n}, d={d}) graph met |lambda_2| <= {lambda_max} in {max_attempts} attempts")


def _edge_set(adj: np.ndarray) -> set:
    n, d = adj.shape
    edges = set()
    for u in range(n):
        for v in adj[u]:
            v = int(v)
            edges.add((u, v) if u < v else (v, u))
    return edges


def _double_edge_swaps(adj: np.ndarray, count: int, rng: np.random.Generator,
                       max_tries_factor: int = 20) -> int:
    """Degree-preserving rewiring in place: replace edges (a,b),(c,e) with
    (a,e),(c,b) when that creates no self-loop or multi-edge. Returns the
    number of swaps performed."""
    n, d = adj.shape
    edges = _edge_set(adj)
    done = 0
    tries = 0
    budget = max(1, count) * max_tries_factor
    while done < count and tries < budget:
        tries += 1
        a, c = rng.integers(0, n, size=2)
        ia, ic = rng.integers(0, d, size=2)
        b = int(adj[a, ia])
        e = int(adj[c, ic])
        a, c = int(a), int(c)
        if len({a, b, c, e}) < 4:
            continue
        new1 = (a, e) if a < e else (e, a)
        new2 = (c, b) if c < b else (b, c)
        if new1 in edges or new2 in edges:
            continue
        old1 = (a, b) if a < b else (b, a)
        old2 = (c, e) if c < e else (e, c)
        edges.discard(old1)
        edges.discard(old2)
        edges.add(new1)
        edges.add(new2)
        adj[a, ia] = e
        adj[c, ic] = b
        ib = int(np.nonzero(adj[b] == a)[0][0])
        ie = int(np.nonzero(adj[e] == c)[0][0])
        adj[b, ib] = c
        adj[e, ie] = a
        done += 1
    return done


def churn_rate(n: int, k: float, rate_scale: float) -> int:
    """Per-round replacement count: floor(rate_scale * n / ln(n)^k)."""
    return int(math.floor(rate_scale * n / math.log(n) ** k))


def commit_churn_schedule(n: int, d: int, lambda_max: float, horizon: int,
                          k: float, rate_scale: float, strategy: str, seed: int,
                          rate_override: int = None,
                          rewire_fraction: float = 0.05,
                          cert_tol: float = 5e-3,
                          max_round_retries: int = 30) -> DynamicNetworkSchedule:
    """Pre-commit the adversary's entire graph-and-churn sequence.

    Each round, ``rate`` nodes chosen by ``strategy`` are replaced by fresh
    ids inheriting their slots, then ``rewire_fraction`` of the edges are
    resampled by double-edge swaps and the topology is re-certified.
    """
    if k <= 1:
        raise InvalidParams(f"k must exceed 1, got {k}")
    if rate_scale < 0:
        raise InvalidParams(f"rate_scale must be >= 0, got {rate_scale}")
    if strategy not in CHURN_STRATEGIES:
        raise InvalidParams(f"unknown strategy {strategy!r}")
    if horizon < 1:
        raise InvalidParams("horizon must be at least 1")
    rate = churn_rate(n, k, rate_scale) if rate_override is None else int(rate_override)
    if strategy == "none":
        rate = 0
    if rate >= n:
        raise RateTooHigh(f"per-round churn {rate} >= network size {n}")

    rng = np.random.default_rng(np.random.SeedSequence([_ADVERSARY_DOMAIN, seed]))
    g0 = build_regular_expander(n, d, lambda_max, seed=int(rng.integers(2**31)),
                                cert_tol=min(cert_tol, 1e-4))
    sched = DynamicNetworkSchedule(
        n=n, d=d, horizon=horizon, lambda_max=lambda_max, k=k,
        rate_scale=rate_scale, strategy=strategy, seed=seed)
    join = list(range(n))          # join_round per id, built incrementally
    join_round = [0] * n
    id_to_slot = list(range(n))
    leave_round = [horizon] * n
    ids = np.arange(n, dtype=np.int32)
    adj = g0.adj.copy()
    bound = g0.lambda_bound
    sched.snapshots.append(GraphSnapshot(0, d, ids.copy(), adj.copy(), bound))
    sched.events.append(ChurnEvent(0, np.empty(0, np.int32), np.empty(0, np.int32),
                                   np.empty(0, np.int32)))
    next_id = n
    block_offset = 0
    swaps_per_round = int(round(rewire_fraction * n * d / 2))

    for r in range(1, horizon):
        if rate == 0:
            removed_slots = np.empty(0, dtype=np.int32)
        elif strategy == "uniform-random":
            removed_slots = rng.choice(n, size=rate, replace=False).astype(np.int32)
        elif strategy == "oldest-first":
            # Fresh ids are monotone in join round, so oldest (ties by
            # smallest id) == the smallest present ids.
            oldest = np.sort(ids)[:rate]
            removed_slots = np.array([id_to_slot[i] for i in oldest], dtype=np.int32)
        elif strategy == "block":
            order = np.argsort(ids)
            take = (block_offset + np.arange(rate)) % n
            removed_slots = order[take].astype(np.int32)
            block_offset = (block_offset + rate) % n
        else:
            removed_slots = np.empty(0, dtype=np.int32)

        removed_ids = ids[removed_slots].copy()
        added_ids = np.arange(next_id, next_id + removed_slots.size, dtype=np.int32)
        for rid in removed_ids:
            leave_round[rid] = r
        for aid, slot in zip(added_ids, removed_slots):
            join_round.append(r)
            leave_round.append(horizon)
            id_to_slot.append(int(slot))
        next_id += removed_slots.size
        ids[removed_slots] = added_ids

        if swaps_per_round > 0:
            newbound = None
            for _ in range(max_round_retries):
                trial = adj.copy()
                _double_edge_swaps(trial, swaps_per_round, rng)
                newbound = _certify(trial, d, lambda_max, cert_tol)
                if newbound is not None:
                    adj = trial
                    bound = newbound
                    break
            if newbound is None:
                raise GenerationExhausted(
                    f"round {r}: rewiring never met |lambda_2| <= {lambda_max} "
                    f"in {max_round_retries} retries")

        sched.snapshots.append(GraphSnapshot(r, d, ids.copy(), adj.copy(), float(bound)))
        sched.events.append(ChurnEvent(r, removed_ids, added_ids, removed_slots.copy()))

    sched.join_round = np.array(join_round, dtype=np.int32)
    sched.leave_round = np.array(leave_round, dtype=np.int32)
    sched.id_to_slot = np.array(id_to_slot, dtype=np.int32)
    assert sched.join_round.size == next_id
    del join
    return sched


def advance(schedule: DynamicNetworkSchedule, r: int):
    """Deterministic replay: the snapshot and churn event for round r."""
    if not (0 <= r < schedule.horizon):
        raise OutOfHorizon(f"round {r} outside horizon {schedule.horizon}")
    return schedule.snapshots[r], schedule.events[r]


def validate_snapshot(g: GraphSnapshot, lambda_max: float = None) -> None:
    """Assert all GraphSnapshot invariants; raises AssertionError on failure."""
    n, d = g.n, g.d
    assert g.adj.shape == (n, d), "adjacency shape"
    assert np.all(g.adj >= 0) and np.all(g.adj < n), "slot range"
    for s in range(n):
        nbrs = g.adj[s]
        assert s not in nbrs, f"self-loop at slot {s}"
        assert len(set(nbrs.tolist())) == d, f"multi-edge at slot {s}"
        for t in nbrs:
            assert s in g.adj[t], f"asymmetric edge {s}->{t}"
    connected, non_bip = _bfs_connected_nonbipartite(g.adj)
    assert connected, "graph disconnected"
    assert non_bip, "graph bipartite"
    est = estimate_lambda(g, tol=1e-4)
    assert est <= g.lambda_bound + 1e-3, f"lambda {est} exceeds bound {g.lambda_bound}"
    if lambda_max is not None:
        assert g.lambda_bound <= lambda_max + 1e-12
