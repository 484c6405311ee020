"""Landmark-set construction via fanout-2 sample trees.

Committee members grow binary trees level-by-level (one level per round):
each tree node picks two fresh, not-yet-used sample origins as children and
forwards the committee ids with the invitation. Every node that joins
becomes a landmark for the item for exactly 2*tau rounds. Depth is fixed up
front by a closed formula so the tree count lands between sqrt(n) and a
polylog-degraded sublinear cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InvalidParams

STORAGE = "storage"
SEARCH = "search"


def tree_depth(n: int, k: float) -> int:
    """Target tree depth: ceil of (log2 n - 2(log2 ln n + ln 2)) over
    2 log2(2 (1 - 1/ln^((k-1)/2) n)(1 - 1/ln^(k-1) n)(1 - 1/n^3))."""
    if n < 16:
        raise InvalidParams(f"n must be at least 16, got {n}")
    ln_n = math.log(n)
    numer = math.log2(n) - 2.0 * (math.log2(ln_n) + math.log(2.0))
    shrink = (2.0
              * (1.0 - ln_n ** (-(k - 1.0) / 2.0))
              * (1.0 - ln_n ** (-(k - 1.0)))
              * (1.0 - n ** -3.0))
    if shrink <= 1.0:
        raise DomainError(
            f"depth formula denominator <= 0 for n={n}, k={k}")
    denom = 2.0 * math.log2(shrink)
    return math.ceil(numer / denom)


def tree_depth_or_default(n: int, k: float) -> int:
    """Build depth with a small-n fallback.

    The closed formula is undefined when the expected per-level growth factor
    drops below 1 (desk-scale n); fall back to the depth matching the size
    cap's exponent, (1/2 + delta) log2 n with delta = k - 1."""
    try:
        return tree_depth(n, k)
    except DomainError:
        return max(1, math.ceil((0.5 + (k - 1.0)) * math.log2(n)))


def set_size_cap(h: float, n: int, mu: int) -> int:
    """Hard upper bound on one build: ceil(h ln n) roots, full binary trees."""
    return math.ceil(h * math.log(n)) * (2 ** (mu + 1) - 1)


@dataclass(frozen=True)
class LandmarkRecord:
    item_id: bytes
    committee_ids: tuple
    created_round: int
    expires_round: int
    kind: str


class RecordStore:
    """Per-node landmark records with expiry, keyed by (item_id, kind, owner).

    Search landmarks for concurrent retrievals of the same item must not be
    shared, so search records are additionally keyed by the owning task.
    """

    def __init__(self):
        self._by_key = {}      # key -> {holder_id: LandmarkRecord}
        self._cache = {}       # key -> sorted holder id array

    @staticmethod
    def key(item_id: bytes, kind: str, owner: str = "") -> tuple:
        return (item_id, kind, owner if kind == SEARCH else "")

    def add(self, key: tuple, holder: int, record: LandmarkRecord) -> None:
        self._by_key.setdefault(key, {})[holder] = record
        self._cache.pop(key, None)

    def has(self, key: tuple, holder: int, r: int) -> bool:
        rec = self._by_key.get(key, {}).get(holder)
        return rec is not None and r < rec.expires_round

    def record_of(self, key: tuple, holder: int, r: int):
        rec = self._by_key.get(key, {}).get(holder)
        if rec is not None and r < rec.expires_round:
            return rec
        return None

    def holders(self, key: tuple, r: int) -> np.ndarray:
        """Ids currently holding a live (unexpired) record under key."""
        table = self._by_key.get(key)
        if not table:
            return np.empty(0, dtype=np.int64)
        arr = self._cache.get(key)
        if arr is None or arr.shape[0] != len(table):
            arr = np.fromiter(table.keys(), dtype=np.int64, count=len(table))
            arr.sort()
            self._cache[key] = arr
        exp = np.fromiter((table[int(i)].expires_round for i in arr),
                          dtype=np.int64, count=arr.size)
        return arr[exp > r]

    def drop_holders(self, removed_ids) -> None:
        removed = set(int(i) for i in removed_ids)
        for key, table in self._by_key.items():
            stale = removed.intersection(table.keys())
            if stale:
                for h in stale:
                    del table[h]
                self._cache.pop(key, None)

    def purge_expired(self, r: int) -> None:
        for key in list(self._by_key):
            table = self._by_key[key]
            dead = [h for h, rec in table.items() if r >= rec.expires_round]
            if dead:
                for h in dead:
                    del table[h]
                self._cache.pop(key, None)
            if not table:
                del self._by_key[key]
                self._cache.pop(key, None)

    def drop_key(self, key: tuple) -> None:
        self._by_key.pop(key, None)
        self._cache.pop(key, None)


class LandmarkBuild:
    """One level-synchronous tree-growing pass for one landmark generation."""

    def __init__(self, sim, build_id: str, key: tuple, item_id: bytes,
                 kind: str, committee_ids: list, start_round: int,
                 target_depth: int = None):
        self.sim = sim
        self.build_id = build_id
        self.key = key
        self.item_id = item_id
        self.kind = kind
        self.committee_ids = tuple(committee_ids)
        self.start_round = start_round
        self.target_depth = (tree_depth_or_default(sim.cfg.n, sim.cfg.k)
                             if target_depth is None else target_depth)
        self.depth = 0
        self.used = np.zeros(sim.schedule.next_id, dtype=bool)
        self.frontier = np.empty(0, dtype=np.int64)
        self.invitations_sent = 0
        self.invitations_lost = 0
        self.joined = 0
        self.done = False
        self.size_cap = set_size_cap(sim.cfg.h, sim.cfg.n, self.target_depth)
        live = [m for m in committee_ids if sim.is_present(m, start_round)]
        ttl = 2 * sim.tau
        for m in live:
            self._add_landmark(m, start_round, ttl)
        self.roots = len(live)
        self.frontier = np.array(live, dtype=np.int64)
        self._next_frontier = []

    def _add_landmark(self, node: int, r: int, ttl: int) -> None:
        rec = LandmarkRecord(item_id=self.item_id,
                             committee_ids=self.committee_ids,
                             created_round=r, expires_round=r + ttl,
                             kind=self.kind)
        self.sim.records.add(self.key, int(node), rec)
        self.used[node] = True
        self.joined += 1
        assert self.joined <= self.size_cap, "landmark set exceeded hard cap"

    def handle_invite(self, msg, r: int) -> None:
        """Invitation delivery: decline if already in this build, else the
        node becomes a landmark and part of the next frontier."""
        if self.done:
            return
        node = msg.dest
        if self.used[node]:
            return
        self._add_landmark(node, r, 2 * self.sim.tau)
        self._next_frontier.append(node)

    def on_round(self, r: int) -> None:
        """Advance one tree level: adopt this round's joiners as the
        frontier, then have each frontier node invite up to two fresh unused
        sample origins."""
        if self.done:
            return
        sim = self.sim
        if r > self.start_round:
            self.frontier = np.array(self._next_frontier, dtype=np.int64)
            self._next_frontier = []
        if self.depth >= self.target_depth or self.frontier.size == 0:
            self._finish(r)
            return
        recv, orig = sim.harvest_pairs(r)
        if recv.size:
            mask = np.isin(recv, self.frontier)
            r_ids = recv[mask].astype(np.int64)
            o_ids = orig[mask].astype(np.int64)
            if r_ids.size:
                pair = r_ids * np.int64(2**32) + o_ids
                _, first = np.unique(pair, return_index=True)
                first.sort()
                r_ids, o_ids = r_ids[first], o_ids[first]
                keep = ~self.used[o_ids]
                r_ids, o_ids = r_ids[keep], o_ids[keep]
                if r_ids.size:
                    order = np.argsort(r_ids, kind="stable")
                    r_ids, o_ids = r_ids[order], o_ids[order]
                    starts = np.r_[0, np.nonzero(np.diff(r_ids))[0] + 1]
                    lens = np.diff(np.r_[starts, r_ids.size])
                    rank = np.arange(r_ids.size) - np.repeat(starts, lens)
                    pick = rank < 2
                    units = len(self.committee_ids) + 3
                    for p, c in zip(r_ids[pick], o_ids[pick]):
                        sim.send(sender=int(p), dest=int(c), kind="lm-invite",
                                 task_id=self.build_id,
                                 payload={"build": self.build_id},
                                 units=units)
                        self.invitations_sent += 1
        self.depth += 1

    def _finish(self, r: int) -> None:
        if self.done:
            return
        self.done = True
        self.invitations_lost = self.invitations_sent - (self.joined - self.roots)
        self.sim.emit_event(r, "landmark-build", build=self.build_id,
                            lm_kind=self.kind, size=self.joined,
                            depth=self.depth,
                            invitations=self.invitations_sent)
