"""Random-walk token engine and exact-distribution oracle.

The engine moves walk tokens over a pre-committed dynamic network: tokens on
churned-out nodes are destroyed, each surviving node forwards up to a cap of
tokens per round (one uniform-random neighbor hop each), excess tokens wait
in FIFO order, and tokens that complete their step budget stop and become
harvestable where they landed.

The oracle computes the walk's position distribution exactly by per-round
application of the transition operator, accumulating the probability mass on
removed nodes into a kill term. It models one forwarding step per round; the
engine's queueing deviation from that ideal is measured by tests, never
assumed to be zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .errors import InvalidParams, TooLarge, UnknownNode
from .netgen import ChurnEvent, DynamicNetworkSchedule, GraphSnapshot, advance

_PROTOCOL_DOMAIN = 0x50


@dataclass
class WalkConfig:
    """Walk-protocol constants for a network of stable size n.

    Per round each spawning node emits ``alpha * ceil(ln n)`` tokens; walks
    take ``walk_len`` steps; a node forwards at most ``forward_cap`` tokens
    per round. The default cap ``2*h*ceil(ln n)`` is twice the per-node load
    of a single one-shot cohort of ``h*ceil(ln n)`` walks; continuous
    spawning offers a per-node load of roughly ``spawn_per_node * walk_len``
    and needs the cap overridden accordingly (the harness does this).
    """

    n: int
    alpha: int
    h: int
    m: int = 3
    walk_len: int = None      # T; default ceil(m * ln n)
    forward_cap: int = None   # default 2 * h * ceil(ln n)
    allow_large_h: bool = False

    def __post_init__(self):
        if self.n < 2:
            raise InvalidParams("n must be at least 2")
        if self.alpha < 0 or self.h < 0 or self.m < 1:
            raise InvalidParams("alpha, h must be >= 0 and m >= 1")
        if self.h > self.alpha / 36 and not self.allow_large_h:
            raise InvalidParams(
                f"h={self.h} exceeds alpha/36={self.alpha / 36:.3f}; "
                "pass allow_large_h=True to override")
        if self.walk_len is None:
            self.walk_len = math.ceil(self.m * math.log(self.n))
        if self.walk_len < 1:
            raise InvalidParams("walk_len must be >= 1")
        if self.forward_cap is None:
            self.forward_cap = 2 * self.h * self.ln_ceil
        if self.forward_cap < 1:
            raise InvalidParams("forward_cap must be >= 1")

    @property
    def ln_ceil(self) -> int:
        return math.ceil(math.log(self.n))

    @property
    def tau(self) -> int:
        return self.m * self.ln_ceil

    @property
    def spawn_per_node(self) -> int:
        return self.alpha * self.ln_ceil


@dataclass(frozen=True)
class WalkToken:
    walk_id: int
    origin: int
    origin_round: int
    steps_taken: int
    current_node: int


@dataclass(frozen=True)
class SampleRecord:
    receiver: int
    origin: int
    origin_round: int
    arrival_round: int


@dataclass
class StepStats:
    round: int
    destroyed: int
    forwarded: int
    harvested: int
    queued_tokens: int
    queued_slots: int
    fwd_counts: np.ndarray   # int32[n]: tokens forwarded by each slot


@njit(cache=True)
def _step_kernel(cur, origin, oround, steps, removed, adj, d, cap, T, rand,
                 out_cur, out_origin, out_oround, out_steps,
                 h_slot, h_origin, h_oround, fwd_count, queued_flag):
    M = cur.size
    nq = 0
    back = M
    nh = 0
    destroyed = 0
    for i in range(M):
        v = cur[i]
        if removed[v] != 0:
            destroyed += 1
            continue
        if fwd_count[v] < cap:
            fwd_count[v] += 1
            w = adj[v, int(rand[i]) % d]
            ns = steps[i] + 1
            if ns >= T:
                h_slot[nh] = w
                h_origin[nh] = origin[i]
                h_oround[nh] = oround[i]
                nh += 1
            else:
                back -= 1
                out_cur[back] = w
                out_origin[back] = origin[i]
                out_oround[back] = oround[i]
                out_steps[back] = ns
        else:
            queued_flag[v] = 1
            out_cur[nq] = v
            out_origin[nq] = origin[i]
            out_oround[nq] = oround[i]
            out_steps[nq] = steps[i]
            nq += 1
    return nq, back, nh, destroyed


def _round_rng(protocol_seed: int, r: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([_PROTOCOL_DOMAIN, protocol_seed, r]))


class WalkEngine:
    """Vectorized token store for one schedule run.

    Token order in the backing arrays is queue seniority: within any node,
    earlier entries have waited at least as long, which realizes per-node
    FIFO under the forwarding cap.
    """

    def __init__(self, schedule: DynamicNetworkSchedule, cfg: WalkConfig,
                 protocol_seed: int = 0, track_walk_ids: bool = False):
        self.schedule = schedule
        self.cfg = cfg
        self.protocol_seed = protocol_seed
        self.track_walk_ids = track_walk_ids
        n = schedule.n
        self.cur = np.empty(0, dtype=np.int32)
        self.origin = np.empty(0, dtype=np.int32)
        self.oround = np.empty(0, dtype=np.int32)
        self.steps = np.empty(0, dtype=np.int16)
        self.wid = np.empty(0, dtype=np.int64)
        self._next_wid = 0
        self.spawned_total = 0
        self.destroyed_total = 0
        self.harvested_total = 0
        # current round's harvest (completion) pool
        self._h_recv = np.empty(0, dtype=np.int32)   # receiver ids
        self._h_origin = np.empty(0, dtype=np.int32)
        self._h_oround = np.empty(0, dtype=np.int32)
        self._h_round = -1
        self._h_taken = np.empty(0, dtype=bool)
        self._n = n

    @property
    def in_flight(self) -> int:
        return self.cur.size

    def check_conservation(self) -> None:
        assert self.spawned_total == (self.in_flight + self.harvested_total
                                      + self.destroyed_total), \
            (self.spawned_total, self.in_flight, self.harvested_total,
             self.destroyed_total)

    # -- spawning ---------------------------------------------------------

    def spawn_walks(self, node_id: int, r: int, count: int = None) -> int:
        """Spawn ``count`` (default alpha*ceil(ln n)) tokens at ``node_id``
        in round r. Returns the number spawned."""
        if not self.schedule.is_present(node_id, r):
            raise UnknownNode(f"node {node_id} not present in round {r}")
        count = self.cfg.spawn_per_node if count is None else int(count)
        if count == 0:
            return 0
        slot = int(self.schedule.id_to_slot[node_id])
        self._append(np.full(count, slot, np.int32),
                     np.full(count, node_id, np.int32),
                     np.full(count, r, np.int32),
                     np.zeros(count, np.int16))
        return count

    def spawn_all(self, r: int, count: int = None) -> int:
        """Every present node spawns ``count`` tokens (default from config)."""
        count = self.cfg.spawn_per_node if count is None else int(count)
        if count == 0:
            return 0
        snap, _ = advance(self.schedule, r)
        n = snap.n
        slots = np.repeat(np.arange(n, dtype=np.int32), count)
        origins = np.repeat(snap.ids.astype(np.int32), count)
        self._append(slots, origins,
                     np.full(n * count, r, np.int32),
                     np.zeros(n * count, np.int16))
        return n * count

    def _append(self, cur, origin, oround, steps):
        k = cur.size
        self.cur = np.concatenate([self.cur, cur])
        self.origin = np.concatenate([self.origin, origin])
        self.oround = np.concatenate([self.oround, oround])
        self.steps = np.concatenate([self.steps, steps])
        if self.track_walk_ids:
            self.wid = np.concatenate(
                [self.wid, np.arange(self._next_wid, self._next_wid + k, dtype=np.int64)])
        self._next_wid += k
        self.spawned_total += k

    # -- stepping ---------------------------------------------------------

    def step_round(self, r: int) -> StepStats:
        """Run one engine round: destroy tokens on removed nodes, forward up
        to the cap per node (FIFO excess waits), harvest completions."""
        snap, event = advance(self.schedule, r)
        n, d = snap.n, snap.d
        removed = np.zeros(n, dtype=np.uint8)
        if not self.schedule.preserving and event.count:
            removed[event.slots] = 1
        M = self.cur.size
        rand = _round_rng(self.protocol_seed, r).integers(
            0, 2**32, size=M, dtype=np.uint32)
        out_cur = np.empty(M, dtype=np.int32)
        out_origin = np.empty(M, dtype=np.int32)
        out_oround = np.empty(M, dtype=np.int32)
        out_steps = np.empty(M, dtype=np.int16)
        hmax = int(np.count_nonzero(self.steps == self.cfg.walk_len - 1))
        h_slot = np.empty(hmax, dtype=np.int32)
        h_origin = np.empty(hmax, dtype=np.int32)
        h_oround = np.empty(hmax, dtype=np.int32)
        fwd_count = np.zeros(n, dtype=np.int64)
        queued_flag = np.zeros(n, dtype=np.uint8)
        nq, back, nh, destroyed = _step_kernel(
            self.cur, self.origin, self.oround, self.steps, removed,
            snap.adj, d, self.cfg.forward_cap, self.cfg.walk_len, rand,
            out_cur, out_origin, out_oround, out_steps,
            h_slot, h_origin, h_oround, fwd_count, queued_flag)
        if self.track_walk_ids:
            # Re-derive the permutation cheaply is not possible; walk-id
            # tracking rides along through a second pass at small scale.
            self._step_wid(removed, fwd_count, rand, nq, back, nh)
        self.cur = np.concatenate([out_cur[:nq], out_cur[back:][::-1]])
        self.origin = np.concatenate([out_origin[:nq], out_origin[back:][::-1]])
        self.oround = np.concatenate([out_oround[:nq], out_oround[back:][::-1]])
        self.steps = np.concatenate([out_steps[:nq], out_steps[back:][::-1]])
        self.destroyed_total += destroyed
        self.harvested_total += nh
        forwarded = int(fwd_count.sum())
        self._h_recv = snap.ids[h_slot[:nh]].astype(np.int32)
        self._h_origin = h_origin[:nh].copy()
        self._h_oround = h_oround[:nh].copy()
        self._h_round = r
        self._h_taken = np.zeros(nh, dtype=bool)
        assert fwd_count.max(initial=0) <= self.cfg.forward_cap, \
            "forwarding cap exceeded"
        return StepStats(round=r, destroyed=destroyed, forwarded=forwarded,
                         harvested=nh, queued_tokens=nq,
                         queued_slots=int(queued_flag.sum()),
                         fwd_counts=fwd_count)

    def _step_wid(self, removed, fwd_count_after, rand, nq, back, nh):
        """Replicate the kernel's routing for walk ids (small-scale only)."""
        M = self.cur.size
        out = np.empty(M, dtype=np.int64)
        cap = self.cfg.forward_cap
        T = self.cfg.walk_len
        fc = np.zeros(self._n, dtype=np.int64)
        i_q, i_b = 0, M
        for i in range(M):
            v = self.cur[i]
            if removed[v]:
                continue
            if fc[v] < cap:
                fc[v] += 1
                if self.steps[i] + 1 >= T:
                    continue
                i_b -= 1
                out[i_b] = self.wid[i]
            else:
                out[i_q] = self.wid[i]
                i_q += 1
        self.wid = np.concatenate([out[:i_q], out[i_b:][::-1]])

    # -- harvesting -------------------------------------------------------

    def harvest_arrays(self, r: int):
        """All completions of round r as (receiver_ids, origins, origin_rounds)."""
        if r != self._h_round:
            z = np.empty(0, dtype=np.int32)
            return z, z, z
        return self._h_recv, self._h_origin, self._h_oround

    def harvest_samples(self, node_id: int, r: int) -> list:
        """Return and clear node_id's completed tokens of round r as
        SampleRecords."""
        if r != self._h_round:
            return []
        mask = (self._h_recv == node_id) & ~self._h_taken
        idx = np.nonzero(mask)[0]
        self._h_taken[idx] = True
        return [SampleRecord(receiver=int(node_id),
                             origin=int(self._h_origin[i]),
                             origin_round=int(self._h_oround[i]),
                             arrival_round=r)
                for i in idx]

    def tokens(self) -> list:
        """Materialize in-flight tokens as WalkToken values (small scale)."""
        out = []
        for i in range(self.cur.size):
            wid = int(self.wid[i]) if self.track_walk_ids else -1
            out.append(WalkToken(walk_id=wid, origin=int(self.origin[i]),
                                 origin_round=int(self.oround[i]),
                                 steps_taken=int(self.steps[i]),
                                 current_node=int(self.cur[i])))
        return out


# -- walk-preserving network ----------------------------------------------

def build_preserving_network(schedule: DynamicNetworkSchedule) -> DynamicNetworkSchedule:
    """The analysis twin: identical topology sequence, but each removed
    node's walk state is relocated to the unique node added in its slot the
    same round, so no walk ever dies."""
    return replace(schedule, preserving=True)


# -- exact brute-force oracle ----------------------------------------------

@dataclass
class DistributionVector:
    """Exact walk-position distribution at some round: probability per
    present node plus the accumulated kill mass."""

    ids: np.ndarray
    probs: np.ndarray
    kill_mass: float

    def __post_init__(self):
        total = float(self.probs.sum()) + self.kill_mass
        assert abs(total - 1.0) <= 1e-12, f"mass leak: {total}"
        assert self.probs.min(initial=0.0) >= -1e-15

    def prob_of(self, node_id: int) -> float:
        hits = np.nonzero(self.ids == node_id)[0]
        return float(self.probs[hits[0]]) if hits.size else 0.0

    def as_dict(self) -> dict:
        return {int(i): float(p) for i, p in zip(self.ids, self.probs)}


_ORACLE_MAX_N = 4096


def exact_walk_distribution(schedule: DynamicNetworkSchedule, s: int,
                            t0: int, t: int) -> DistributionVector:
    """Distribution of a walk started at node s in round t0, after stepping
    once per round through round t, with kill accounting for churn."""
    if schedule.n > _ORACLE_MAX_N:
        raise TooLarge(f"oracle limited to n <= {_ORACLE_MAX_N}")
    if t < t0:
        raise InvalidParams("t must be >= t0")
    if not schedule.is_present(s, t0):
        raise UnknownNode(f"node {s} not in V^{t0}")
    snap0, _ = advance(schedule, t0)
    n, d = snap0.n, snap0.d
    p = np.zeros(n, dtype=np.float64)
    p[int(schedule.id_to_slot[s])] = 1.0
    kill = 0.0
    for r in range(t0 + 1, t + 1):
        snap, event = advance(schedule, r)
        if not schedule.preserving and event.count:
            kill += float(p[event.slots].sum())
            p[event.slots] = 0.0
        p = p[snap.adj].sum(axis=1) / d
    snap_t, _ = advance(schedule, t)
    return DistributionVector(ids=snap_t.ids.copy(), probs=p, kill_mass=kill)


def reversed_window_schedule(schedule: DynamicNetworkSchedule, t0: int,
                             t: int) -> DynamicNetworkSchedule:
    """Time-reversed window [t0, t] as a standalone schedule.

    A walk run forward on this schedule from a node d computes, for every s,
    the probability that a forward walk s -> d over [t0, t] followed exactly
    this window (transition operators are symmetric, so the reversed product
    is the transpose). Round j >= 1 steps with the original round t+1-j
    graph; removed/added swap roles."""
    T = t - t0
    snaps = [replace(schedule.snapshots[t], round=0)]
    events = [ChurnEvent(0, np.empty(0, np.int32), np.empty(0, np.int32),
                         np.empty(0, np.int32))]
    for j in range(1, T + 1):
        orig = t + 1 - j
        snaps.append(replace(schedule.snapshots[orig], round=j))
        if j == 1:
            events.append(ChurnEvent(1, np.empty(0, np.int32),
                                     np.empty(0, np.int32), np.empty(0, np.int32)))
        else:
            ev = schedule.events[t + 2 - j]
            events.append(ChurnEvent(j, removed=ev.added.copy(),
                                     added=ev.removed.copy(),
                                     slots=ev.slots.copy()))
    next_id = schedule.next_id
    join = np.zeros(next_id, dtype=np.int32)
    leave = np.full(next_id, T + 1, dtype=np.int32)
    present0 = np.zeros(next_id, dtype=bool)
    present0[snaps[0].ids] = True
    join[~present0] = np.iinfo(np.int32).max  # not present until added
    for ev in events[1:]:
        for rid in ev.removed:
            leave[rid] = ev.round
        for aid in ev.added:
            join[aid] = ev.round
    return DynamicNetworkSchedule(
        n=schedule.n, d=schedule.d, horizon=T + 1, lambda_max=schedule.lambda_max,
        k=schedule.k, rate_scale=schedule.rate_scale, strategy=schedule.strategy,
        seed=schedule.seed, snapshots=snaps, events=events,
        join_round=join, leave_round=leave,
        id_to_slot=schedule.id_to_slot.copy(), preserving=schedule.preserving)


def conditional_origin_reversed(schedule: DynamicNetworkSchedule, dest: int,
                                t0: int, t: int):
    """Conditional origin distribution of a walk that terminated at ``dest``
    in round t, computed by running the oracle forward on the time-reversed
    window. The transposed operator product ends with the round-(t0+1) kill
    projection, which a kill-then-step round cannot express, so it is applied
    here as the final boundary step before normalizing.

    Returns (ids, conditional_probs) over the round-t0 snapshot."""
    rs = reversed_window_schedule(schedule, t0, t)
    dv = exact_walk_distribution(rs, dest, 0, t - t0)
    p = dv.probs.copy()
    if not schedule.preserving and t > t0:
        ev = schedule.events[t0 + 1]
        if ev.count:
            p[ev.slots] = 0.0
    total = p.sum()
    if total <= 0:
        raise InvalidParams(f"no surviving origin mass for destination {dest}")
    snap0, _ = advance(schedule, t0)
    return snap0.ids.copy(), p / total


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())
