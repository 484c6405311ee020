"""Persistent storage and retrieval of data items.

Storing hands an item to a freshly elected committee (every member keeps a
replica, or one erasure piece each) which maintains itself forever and
rebuilds a storage-landmark set every tau rounds. Retrieval elects a
short-lived search committee whose landmark set inquires, for every walk
sample it receives, whether the sample's origin is a storage landmark; a hit
returns the storage committee ids, the item is fetched from a live member
and reported straight back to the requester.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import erasure
from .committee import (CommitteeTask, ERASURE, REPLICATE, committee_size,
                        select_distinct_origins)
from .errors import InsufficientSamples, UnknownNode
from .landmarks import SEARCH, STORAGE, LandmarkBuild, RecordStore


@dataclass
class DataItem:
    item_id: bytes
    payload: bytes
    origin: int
    stored_round: int

    @classmethod
    def make(cls, payload: bytes, origin: int, stored_round: int) -> "DataItem":
        return cls(item_id=erasure.item_hash(payload), payload=payload,
                   origin=origin, stored_round=stored_round)


@dataclass
class SearchResult:
    item_id: bytes
    requester: int
    success: bool
    holder: int = None
    rounds_elapsed: int = -1
    messages_used: int = 0
    reason: str = ""


class StoreTask:
    """Algorithm: elect a storage committee seeded from the storer's fresh
    samples, replicate the item (or disperse pieces) onto it, and keep a
    storage-landmark generation alive by rebuilding every tau rounds."""

    def __init__(self, sim, task_id: str, u: int, item: DataItem, r: int):
        self.sim = sim
        self.task_id = task_id
        self.item = item
        need = committee_size(sim.cfg.h, sim.cfg.n)
        origins = sim.samples_at(u, r)
        invitees = select_distinct_origins(origins, need)
        if len(invitees) < need:
            raise InsufficientSamples(
                f"storer {u} has {len(invitees)} distinct origins, needs {need}")
        if sim.cfg.mode == ERASURE:
            params = erasure.CodeParams.for_committee(sim.cfg.h, sim.cfg.n)
            pieces = erasure.disperse(item.payload, params)
            cargo_list = [pieces[i % params.L] for i in range(len(invitees))]
            mode = ERASURE
            payload = None
        else:
            cargo_list = [item.payload] * len(invitees)
            mode = REPLICATE
            payload = item.payload
        self.committee_task = CommitteeTask(
            sim, task_id=task_id, members=[], created_round=r,
            mode=mode, payload=payload, item_id=item.item_id)
        self.committee_task.begin_formation(u, invitees, r, cargo_list)
        self.builds = []
        self._build_seq = 0
        self.record_key = RecordStore.key(item.item_id, STORAGE)

    @property
    def status(self):
        return self.committee_task.status

    def handle_msg(self, msg, r: int):
        self.committee_task.handle_msg(msg, r)

    def handle_build_msg(self, msg, r: int):
        for b in self.builds:
            if b.build_id == msg.task_id:
                b.handle_invite(msg, r)
                return

    def on_round(self, r: int):
        ct = self.committee_task
        ct.on_round(r)
        if ct.status != "live":
            return
        created = ct.committee.created_round
        if created is not None and r >= created and (r - created) % self.sim.tau == 0:
            self._build_seq += 1
            bid = f"{self.task_id}/b{self._build_seq}"
            self.builds.append(LandmarkBuild(
                self.sim, build_id=bid, key=self.record_key,
                item_id=self.item.item_id, kind=STORAGE,
                committee_ids=ct.committee.members, start_round=r))
        for b in self.builds:
            b.on_round(r)
        self.builds = [b for b in self.builds if not b.done]


class RetrieveTask:
    """Search committee + search landmarks + the inquiry/fetch/report chain."""

    def __init__(self, sim, task_id: str, u: int, item_id: bytes, r1: int):
        self.sim = sim
        self.task_id = task_id
        self.requester = u
        self.item_id = item_id
        self.r1 = r1
        self.result = None
        self.messages_used = 0
        self.status = "live"
        self.builds = []
        self._build_seq = 0
        self.committee_task = None
        self.record_key = RecordStore.key(item_id, SEARCH, owner=task_id)
        self.storage_key = RecordStore.key(item_id, STORAGE)
        self._pending_inquiries = {}    # deliver_round -> (w_arr, target_arr)
        self._pending_replies = {}      # deliver_round -> list[(target, w, ids)]
        self._fetching = False
        self._reported = False
        self.dissolve_round = r1 + sim.cfg.search_lifetime

        # Local hit: the requester already holds a replica.
        local = sim.replica_of(u, item_id)
        if local is not None:
            self._success(r1, holder=u)
            return
        piece = sim.piece_of(u, item_id)
        if piece is not None:
            # Committee member in erasure mode: fetch the missing pieces
            # directly from the clique it already knows.
            ids = sim.committee_ids_of(u, item_id)
            self._request_pieces(u, ids, r1)
            return
        origins = sim.samples_at(u, r1)
        need = committee_size(sim.cfg.h, sim.cfg.n)
        invitees = select_distinct_origins(origins, need)
        if len(invitees) < need:
            self._fail(r1, "insufficient-samples")
            return
        self.committee_task = CommitteeTask(
            sim, task_id=task_id, members=[], created_round=r1,
            mode=REPLICATE, payload=None, item_id=item_id,
            dissolve_round=self.dissolve_round)
        self.committee_task.begin_formation(u, invitees, r1, None)

    # -- terminal states ----------------------------------------------------

    def _success(self, r: int, holder: int):
        if self.result is not None:
            return
        self.result = SearchResult(item_id=self.item_id, requester=self.requester,
                                   success=True, holder=holder,
                                   rounds_elapsed=r - self.r1,
                                   messages_used=self.messages_used)
        self.status = "done"
        self.sim.emit_event(r, "retrieval", task=self.task_id, success=True,
                            rounds=r - self.r1)

    def _fail(self, r: int, reason: str):
        if self.result is not None:
            return
        self.result = SearchResult(item_id=self.item_id, requester=self.requester,
                                   success=False, rounds_elapsed=r - self.r1,
                                   messages_used=self.messages_used, reason=reason)
        self.status = "done"
        self.sim.emit_event(r, "retrieval", task=self.task_id, success=False,
                            rounds=r - self.r1, reason=reason)

    # -- message handling -----------------------------------------------------

    def handle_msg(self, msg, r: int):
        if self.status != "live":
            return
        kind = msg.kind
        if kind in ("com-count", "com-invite"):
            if self.committee_task is not None:
                self.committee_task.handle_msg(msg, r)
        elif kind == "fetch-rep":
            payload = msg.payload["data"]
            if erasure.item_hash(payload) != self.item_id:
                return
            self._report(msg.dest, msg.sender, payload, r)
        elif kind == "sr-report":
            if msg.dest != self.requester:
                return
            self._success(r, holder=msg.payload["holder"])
        elif kind == "ids-report":
            if msg.dest != self.requester or self._reported:
                return
            self._request_pieces(self.requester, msg.payload["ids"], r)
        elif kind == "piece-rep":
            self._collect_piece(msg, r)

    def handle_build_msg(self, msg, r: int):
        for b in self.builds:
            if b.build_id == msg.task_id:
                b.handle_invite(msg, r)
                return

    # -- fetch / report chains -----------------------------------------------

    def _report(self, w: int, holder: int, payload: bytes, r: int):
        """Landmark w got the item from a storage member; report it to u."""
        if self._reported:
            return
        self._reported = True
        units = 2 + committee_units(payload)
        self.sim.send(sender=w, dest=self.requester, kind="sr-report",
                      task_id=self.task_id,
                      payload={"holder": holder, "data": payload}, units=units)
        self.messages_used += 1

    def _request_pieces(self, u: int, ids, r: int):
        self._awaiting_pieces = {}
        for m in ids:
            self.sim.send(sender=u, dest=int(m), kind="piece-req",
                          task_id=self.task_id,
                          payload={"item": self.item_id}, units=2)
            self.messages_used += 1

    def _collect_piece(self, msg, r: int):
        piece = msg.payload["piece"]
        store = getattr(self, "_awaiting_pieces", None)
        if store is None:
            return
        store[piece.index] = piece
        params = piece.params
        if len(store) >= params.K:
            try:
                payload = erasure.reconstruct(list(store.values()))
            except Exception:
                return
            self._success(r, holder=msg.sender)

    # -- per-round ------------------------------------------------------------

    def on_round(self, r: int):
        if self.status != "live":
            return
        sim = self.sim
        if r >= self.dissolve_round:
            self._fail(r, "not-found")
            return
        if not sim.is_present(self.requester, r) and self.result is None:
            # keep searching; the report will simply drop if u stays gone
            pass
        ct = self.committee_task
        if ct is None:
            return
        ct.on_round(r)
        if ct.status == "live":
            created = ct.committee.created_round
            if created is not None and r >= created and (r - created) % sim.tau == 0:
                self._build_seq += 1
                bid = f"{self.task_id}/b{self._build_seq}"
                self.builds.append(LandmarkBuild(
                    sim, build_id=bid, key=self.record_key,
                    item_id=self.item_id, kind=SEARCH,
                    committee_ids=ct.committee.members, start_round=r))
        for b in self.builds:
            b.on_round(r)
        self.builds = [b for b in self.builds if not b.done]
        self._deliver_replies(r)
        self._deliver_inquiries(r)
        self._emit_inquiries(r)

    def _emit_inquiries(self, r: int):
        """Every live search landmark asks the origin of every sample it
        received this round whether it knows the item."""
        sim = self.sim
        W = sim.records.holders(self.record_key, r)
        if W.size == 0:
            return
        recv, orig = sim.harvest_pairs(r)
        if recv.size == 0:
            return
        mask = np.isin(recv, W)
        w_arr = recv[mask].astype(np.int64)
        t_arr = orig[mask].astype(np.int64)
        if w_arr.size == 0:
            return
        sim.account_bulk(w_arr, units_each=2, r=r)
        sim.count_messages(int(w_arr.size))
        self.messages_used += int(w_arr.size)
        self._pending_inquiries.setdefault(r + 1, []).append((w_arr, t_arr))

    def _deliver_inquiries(self, r: int):
        """Inquiries sent last round reach targets still present; targets
        holding a live storage record answer with the committee ids."""
        sim = self.sim
        batches = self._pending_inquiries.pop(r, [])
        replies = []
        for w_arr, t_arr in batches:
            alive = sim.present_mask(t_arr, r)
            sim.count_dropped(int((~alive).sum()))
            w_arr, t_arr = w_arr[alive], t_arr[alive]
            if t_arr.size == 0:
                continue
            holders = sim.records.holders(self.storage_key, r)
            if holders.size == 0:
                continue
            hit = np.isin(t_arr, holders)
            for w, t in zip(w_arr[hit], t_arr[hit]):
                rec = sim.records.record_of(self.storage_key, int(t), r)
                if rec is None:
                    continue
                replies.append((int(t), int(w), rec.committee_ids))
        if replies:
            for t, w, ids in replies:
                sim.account_bulk(np.array([t]), units_each=2 + len(ids), r=r)
                sim.count_messages(1)
                self.messages_used += 1
            self._pending_replies.setdefault(r + 1, []).extend(replies)

    def _deliver_replies(self, r: int):
        """A storage-landmark hit reaches the search landmark; fetch the item
        from a live storage-committee member."""
        sim = self.sim
        replies = self._pending_replies.pop(r, [])
        if self._fetching or self.result is not None:
            return
        for t, w, ids in replies:
            if not sim.is_present(w, r):
                sim.count_dropped(1)
                continue
            self._fetching = True
            if sim.cfg.mode == ERASURE:
                # Report the clique straight to the requester, who gathers
                # K pieces and reconstructs locally.
                sim.send(sender=w, dest=self.requester, kind="ids-report",
                         task_id=self.task_id, payload={"ids": list(ids)},
                         units=2 + len(ids))
                self.messages_used += 1
            else:
                for m in ids:
                    sim.send(sender=w, dest=int(m), kind="fetch-req",
                             task_id=self.task_id,
                             payload={"item": self.item_id, "w": w}, units=2)
                    self.messages_used += 1
            break


def committee_units(payload: bytes) -> int:
    return -(-len(payload) * 8 // 32)


def is_available(sim, item_id: bytes, r: int, threshold: float = None):
    """The item counts as available when enough nodes that stay present
    through [r, r+tau] hold a live storage-landmark record for it.

    Returns (available, hit_rate) where hit_rate estimates the probability
    that a random window-survivor is a landmark."""
    if threshold is None:
        threshold = sim.cfg.availability_threshold
    key = RecordStore.key(item_id, STORAGE)
    holders = sim.records.holders(key, r)
    hi = min(r + sim.tau, sim.schedule.horizon - 1)
    window = sim.schedule.present_throughout(r, hi)
    live = np.intersect1d(holders, window, assume_unique=False)
    count = int(live.size)
    need = threshold * math.sqrt(sim.cfg.n)
    denom = max(1, window.size)
    return count >= need, count / denom
