"""Shared test helpers: hand-scripted schedules with exact removal timing,
and a minimal fake simulator for driving protocol state machines directly."""

import numpy as np
import pytest

from churnstore import netgen
from churnstore.landmarks import RecordStore


def make_scripted_schedule(n, d, horizon, removals_by_round=None, seed=11,
                           lambda_max=0.9):
    """A schedule with a fixed expander topology and removals applied at the
    scripted rounds (values are slot indices)."""
    removals_by_round = removals_by_round or {}
    g0 = netgen.build_regular_expander(n, d, lambda_max, seed=seed)
    sched = netgen.DynamicNetworkSchedule(
        n=n, d=d, horizon=horizon, lambda_max=lambda_max, k=2.0,
        rate_scale=0.0, strategy="scripted", seed=seed)
    ids = np.arange(n, dtype=np.int32)
    join = list(range(n))
    join_round = [0] * n
    leave_round = [horizon] * n
    id_to_slot = list(range(n))
    next_id = n
    sched.snapshots.append(netgen.GraphSnapshot(0, d, ids.copy(), g0.adj.copy(),
                                                g0.lambda_bound))
    sched.events.append(netgen.ChurnEvent(0, np.empty(0, np.int32),
                                          np.empty(0, np.int32),
                                          np.empty(0, np.int32)))
    for r in range(1, horizon):
        slots = np.array(sorted(set(removals_by_round.get(r, []))), dtype=np.int32)
        removed = ids[slots].copy()
        added = np.arange(next_id, next_id + slots.size, dtype=np.int32)
        for rid in removed:
            leave_round[rid] = r
        for aid, slot in zip(added, slots):
            join_round.append(r)
            leave_round.append(horizon)
            id_to_slot.append(int(slot))
        next_id += slots.size
        ids[slots] = added
        sched.snapshots.append(netgen.GraphSnapshot(r, d, ids.copy(),
                                                    g0.adj.copy(),
                                                    g0.lambda_bound))
        sched.events.append(netgen.ChurnEvent(r, removed, added, slots))
    sched.join_round = np.array(join_round, dtype=np.int32)
    sched.leave_round = np.array(leave_round, dtype=np.int32)
    sched.id_to_slot = np.array(id_to_slot, dtype=np.int32)
    return sched


class FakeSim:
    """Duck-typed stand-in for Simulation: scripted samples, full presence
    control, and a hand-cranked message pump for protocol unit tests."""

    def __init__(self, n=64, h=2, alpha=72, m=3, epsilon=0.5, k=2.0):
        from churnstore.harness import SimulationConfig

        class _Cfg(SimulationConfig):
            pass

        self.cfg = SimulationConfig(n=n, h=h, alpha=alpha, m=m, epsilon=epsilon,
                                    k=k, protocol_seed=1, adversary_seed=2)
        self.tau = self.cfg.tau
        self.records = RecordStore()
        self.replicas = {}
        self.pieces = {}
        self.events = []
        self.outbox = []
        self.gone = set()
        self.joined_at = {}
        self.samples = {}              # (node, round) -> list of origins
        self._pairs_by_round = {}      # round -> (recv, orig) arrays

        class _Sched:
            next_id = 10_000
            horizon = 10_000
        self.schedule = _Sched()

    # presence control
    def is_present(self, node, r):
        return node not in self.gone and self.joined_at.get(node, 0) <= r

    def present_mask(self, ids, r):
        return np.array([self.is_present(int(i), r) for i in ids], dtype=bool)

    def present_throughout(self, node, lo, hi):
        return self.is_present(node, hi) and self.joined_at.get(node, 0) <= lo

    # samples control
    def feed_samples(self, node, r, origins):
        self.samples[(node, r)] = list(origins)
        recv, orig = self._pairs_by_round.get(r, (np.empty(0, np.int64),
                                                  np.empty(0, np.int64)))
        recv = np.concatenate([recv, np.full(len(origins), node, np.int64)])
        orig = np.concatenate([orig, np.asarray(origins, np.int64)])
        self._pairs_by_round[r] = (recv, orig)

    def samples_at(self, node, r):
        return list(self.samples.get((node, r), []))

    def harvest_pairs(self, r):
        return self._pairs_by_round.get(r, (np.empty(0, np.int64),
                                            np.empty(0, np.int64)))

    # messaging
    def send(self, sender, dest, kind, task_id, payload, units):
        from churnstore.harness import Msg
        self.outbox.append(Msg(dest=dest, sender=sender, kind=kind,
                               task_id=task_id, payload=payload, units=units,
                               sent_round=-1))

    def pump(self, r, handlers):
        """Deliver queued messages to present destinations via handlers
        keyed by kind prefix; returns dropped count."""
        msgs, self.outbox = self.outbox, []
        dropped = 0
        for msg in msgs:
            if not self.is_present(msg.dest, r):
                dropped += 1
                continue
            for prefix, fn in handlers.items():
                if msg.kind.startswith(prefix):
                    fn(msg, r)
                    break
        return dropped

    def account_bulk(self, senders, units_each, r):
        pass

    def count_messages(self, k):
        pass

    def count_dropped(self, k):
        pass

    def emit_event(self, r, kind, **kv):
        self.events.append({"round": r, "kind": kind, **kv})

    def register_cargo(self, node, task, cargo):
        if cargo is None or task.item_id is None:
            return
        if isinstance(cargo, (bytes, bytearray)):
            self.replicas.setdefault(node, {})[task.item_id] = bytes(cargo)
        else:
            self.pieces.setdefault(node, {})[task.item_id] = cargo

    def unregister_cargo(self, node, task):
        if task.item_id is None:
            return
        self.replicas.get(node, {}).pop(task.item_id, None)
        self.pieces.get(node, {}).pop(task.item_id, None)

    def replica_of(self, node, item_id):
        return self.replicas.get(node, {}).get(item_id)

    def piece_of(self, node, item_id):
        return self.pieces.get(node, {}).get(item_id)


@pytest.fixture
def scripted_schedule():
    return make_scripted_schedule
