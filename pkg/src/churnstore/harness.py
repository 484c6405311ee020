"""Round loop, id-addressed message layer, metrics, and simulation services.

Each round runs the model's fixed order: (1) the adversary's churn and edge
changes take effect and state held by removed nodes vanishes, (2) nodes see
their current neighbors, (3) messages sent last round are delivered to ids
still present and silently dropped otherwise, (4) protocol computation:
walk stepping/spawning/harvest, committee phases, landmark tree levels,
store/retrieve logic, and outgoing messages are enqueued for the next round.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import netgen
from .committee import CommitteeTask, committee_size, select_distinct_origins
from .datastore import DataItem, RetrieveTask, StoreTask, is_available
from .errors import BudgetExceeded, InsufficientSamples, InvalidParams, UnknownNode
from .walks import WalkConfig, WalkEngine

TOKEN_UNITS = 4     # 32-bit-equivalent fields per forwarded token


@dataclass
class SimulationConfig:
    n: int = 1024
    d: int = 8
    lambda_max: float = 0.0      # 0 -> 2*sqrt(d-1)/d + margin (degree floor)
    k: float = 2.0
    rate_scale: float = 0.0
    strategy: str = "uniform-random"
    horizon: int = 200
    alpha: int = 72
    h: int = 2
    m: int = 3
    epsilon: float = 0.5
    mode: str = "replicate"
    scenario: str = "store-retrieve"
    trials: int = 1
    protocol_seed: int = 1
    adversary_seed: int = 2
    out: str = ""
    # walk engine knobs
    walk_len: int = 0            # 0 -> 2*tau (walks travel two mixing windows)
    forward_cap: int = 0         # 0 -> 2 * spawn_per_node * walk_len
    spawn: bool = True
    allow_large_h: bool = False
    # adversary knobs
    rewire_fraction: float = 0.05
    rate_override: int = -1      # -1 -> use rate_scale formula
    # datastore knobs
    n_items: int = 5
    payload_bytes: int = 64
    availability_threshold: float = 1.0
    search_lifetime: int = 0     # 0 -> 4*tau
    store_start: int = 0         # 0 -> 2*tau + 1
    store_spacing: int = 0       # 0 -> tau
    retrieve_delay: int = 0      # 0 -> 2*tau after store
    # budget
    budget_cap_units: float = 0.0   # 0 -> 1e4 * ln(n)^2
    budget_enforce: bool = True

    def __post_init__(self):
        if self.protocol_seed == self.adversary_seed:
            raise InvalidParams("protocol_seed and adversary_seed must differ")
        if self.mode not in ("replicate", "erasure"):
            raise InvalidParams(f"unknown mode {self.mode!r}")
        if self.h > self.alpha / 36 and not self.allow_large_h:
            raise InvalidParams(
                f"h={self.h} exceeds alpha/36={self.alpha / 36:.3f}; "
                "set allow_large_h to override")

    @property
    def ln_ceil(self) -> int:
        return math.ceil(math.log(self.n))

    @property
    def tau(self) -> int:
        return self.m * self.ln_ceil

    def resolved(self) -> "SimulationConfig":
        """Fill 0/\"\" placeholders with their derived defaults."""
        cfg = replace(self)
        tau = cfg.tau
        if cfg.lambda_max == 0:
            cfg.lambda_max = min(0.99, 2.0 * math.sqrt(cfg.d - 1) / cfg.d + 0.1)
        if cfg.walk_len == 0:
            cfg.walk_len = 2 * tau
        if cfg.forward_cap == 0:
            cfg.forward_cap = 2 * cfg.alpha * cfg.ln_ceil * cfg.walk_len \
                if cfg.spawn else 2 * cfg.h * cfg.ln_ceil
        if cfg.search_lifetime == 0:
            cfg.search_lifetime = 4 * tau
        if cfg.store_start == 0:
            cfg.store_start = 2 * tau + 1
        if cfg.store_spacing == 0:
            cfg.store_spacing = tau
        if cfg.retrieve_delay == 0:
            cfg.retrieve_delay = 2 * tau
        if cfg.budget_cap_units == 0:
            cfg.budget_cap_units = 1e4 * math.log(cfg.n) ** 2
        return cfg


def parse_config_file(path: str) -> dict:
    """Flat key=value pairs; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidParams(f"bad config line: {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key] = val
    return out


_FIELD_TYPES = {f.name: f.type for f in fields(SimulationConfig)}


def config_from_sources(file_values: dict = None, overrides: dict = None) -> SimulationConfig:
    """Build a config from file values with CLI overrides winning."""
    merged = {}
    for src in (file_values or {}), (overrides or {}):
        for key, val in src.items():
            if val is None:
                continue
            if key not in _FIELD_TYPES:
                raise InvalidParams(f"unknown config key {key!r}")
            ftype = _FIELD_TYPES[key]
            if ftype in ("int", int):
                merged[key] = int(val)
            elif ftype in ("float", float):
                merged[key] = float(val)
            elif ftype in ("bool", bool):
                merged[key] = val if isinstance(val, bool) else \
                    str(val).lower() in ("1", "true", "yes")
            else:
                merged[key] = str(val)
    return SimulationConfig(**merged)


@dataclass
class Msg:
    dest: int
    sender: int
    kind: str
    task_id: str
    payload: dict
    units: int
    sent_round: int


class Mailbox:
    def __init__(self):
        self.outbox = []

    def send(self, msg: Msg) -> None:
        self.outbox.append(msg)

    def tick(self, r: int, present) -> tuple:
        """Deliver last round's sends to ids still present; drop the rest."""
        delivered, dropped = [], 0
        for msg in self.outbox:
            if present(msg.dest, r):
                delivered.append(msg)
            else:
                dropped += 1
        self.outbox = []
        return delivered, dropped


METRIC_COLUMNS = [
    "round", "spawned", "forwarded", "destroyed", "harvested", "in_flight",
    "queued_tokens", "queued_slots", "messages_sent", "messages_dropped",
    "max_units", "p99_units", "live_committees", "storage_records",
]


class Metrics:
    def __init__(self):
        self.rows = []
        self.events = []

    def add_row(self, **kv):
        self.rows.append([kv.get(c, 0) for c in METRIC_COLUMNS])

    def add_event(self, r: int, kind: str, **kv):
        self.events.append({"round": r, "kind": kind, **kv})

    def csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(METRIC_COLUMNS) + "\n")
        for row in self.rows:
            buf.write(",".join(_fmt(v) for v in row) + "\n")
        return buf.getvalue()

    def csv_hash(self) -> str:
        return hashlib.sha256(self.csv_text().encode()).hexdigest()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


class Simulation:
    """One deterministic trial: schedule + walk engine + protocol tasks."""

    def __init__(self, cfg: SimulationConfig, schedule=None):
        self.cfg = cfg = cfg.resolved()
        if schedule is None:
            schedule = netgen.commit_churn_schedule(
                cfg.n, cfg.d, cfg.lambda_max, cfg.horizon, cfg.k,
                cfg.rate_scale, cfg.strategy, cfg.adversary_seed,
                rate_override=None if cfg.rate_override < 0 else cfg.rate_override,
                rewire_fraction=cfg.rewire_fraction)
        self.schedule = schedule
        self.tau = cfg.tau
        wcfg = WalkConfig(n=cfg.n, alpha=cfg.alpha, h=cfg.h, m=cfg.m,
                          walk_len=cfg.walk_len, forward_cap=cfg.forward_cap,
                          allow_large_h=cfg.allow_large_h)
        self.wcfg = wcfg
        self.engine = WalkEngine(schedule, wcfg, protocol_seed=cfg.protocol_seed)
        from .landmarks import RecordStore
        self.records = RecordStore()
        self.replicas = {}
        self.pieces = {}
        self._clique_ids = {}
        self.tasks = {}
        self.results = []
        self.mailbox = Mailbox()
        self.metrics = Metrics()
        self.round = -1
        self._task_seq = 0
        self._units = np.zeros(schedule.next_id)
        self._h_sorted = None
        self._msg_sent = 0
        self._msg_dropped = 0
        self._actions = {}
        self._item_rng = np.random.default_rng(
            np.random.SeedSequence([0x17EA, cfg.protocol_seed]))

    def at_round(self, r: int, fn) -> None:
        """Register a protocol action (store/retrieve/...) to run inside
        round r's computation phase, when that round's samples exist."""
        self._actions.setdefault(r, []).append(fn)

    # -- services used by protocol tasks -----------------------------------

    def is_present(self, node_id: int, r: int) -> bool:
        return self.schedule.is_present(int(node_id), r)

    def present_mask(self, ids: np.ndarray, r: int) -> np.ndarray:
        sched = self.schedule
        ids = np.asarray(ids, dtype=np.int64)
        ok = (ids >= 0) & (ids < sched.next_id)
        out = np.zeros(ids.size, dtype=bool)
        out[ok] = (sched.join_round[ids[ok]] <= r) & (r < sched.leave_round[ids[ok]])
        return out

    def present_throughout(self, node_id: int, lo: int, hi: int) -> bool:
        sched = self.schedule
        node_id = int(node_id)
        if node_id < 0 or node_id >= sched.next_id:
            return False
        return bool(sched.join_round[node_id] <= lo and sched.leave_round[node_id] > hi)

    def send(self, sender: int, dest: int, kind: str, task_id: str,
             payload: dict, units: int) -> None:
        self._units[sender] += units
        self._msg_sent += 1
        self.mailbox.send(Msg(dest=int(dest), sender=int(sender), kind=kind,
                              task_id=task_id, payload=payload, units=units,
                              sent_round=self.round))

    def account_bulk(self, senders: np.ndarray, units_each: int, r: int) -> None:
        np.add.at(self._units, senders, units_each)

    def count_messages(self, k: int) -> None:
        self._msg_sent += k

    def count_dropped(self, k: int) -> None:
        self._msg_dropped += k

    def emit_event(self, r: int, kind: str, **kv) -> None:
        self.metrics.add_event(r, kind, **kv)

    def samples_at(self, node_id: int, r: int) -> list:
        """Origins of walks that completed at node_id this round, in arrival
        order (the node's freshest samples)."""
        if self._h_sorted is None or self._h_sorted[0] != r:
            recv, orig, _ = self.engine.harvest_arrays(r)
            order = np.argsort(recv, kind="stable")
            self._h_sorted = (r, recv[order], orig[order])
        _, srecv, sorig = self._h_sorted
        lo = np.searchsorted(srecv, node_id, side="left")
        hi = np.searchsorted(srecv, node_id, side="right")
        return sorig[lo:hi].tolist()

    def harvest_pairs(self, r: int):
        recv, orig, _ = self.engine.harvest_arrays(r)
        return recv, orig

    def register_cargo(self, node: int, task, cargo) -> None:
        if cargo is None or task.item_id is None:
            return
        if isinstance(cargo, (bytes, bytearray)):
            self.replicas.setdefault(node, {})[task.item_id] = bytes(cargo)
        else:
            self.pieces.setdefault(node, {})[task.item_id] = cargo
        self._clique_ids.setdefault(node, {})[task.item_id] = \
            tuple(task.committee.members)

    def unregister_cargo(self, node: int, task) -> None:
        if task.item_id is None:
            return
        self.replicas.get(node, {}).pop(task.item_id, None)
        self.pieces.get(node, {}).pop(task.item_id, None)
        self._clique_ids.get(node, {}).pop(task.item_id, None)

    def replica_of(self, node: int, item_id: bytes):
        return self.replicas.get(node, {}).get(item_id)

    def piece_of(self, node: int, item_id: bytes):
        return self.pieces.get(node, {}).get(item_id)

    def committee_ids_of(self, node: int, item_id: bytes):
        return self._clique_ids.get(node, {}).get(item_id, ())

    # -- operations ---------------------------------------------------------

    def _new_task_id(self, prefix: str) -> str:
        self._task_seq += 1
        return f"{prefix}{self._task_seq}"

    def store(self, u: int, payload: bytes, r: int) -> StoreTask:
        if not self.is_present(u, r):
            raise UnknownNode(f"storer {u} not present in round {r}")
        item = DataItem.make(payload, origin=u, stored_round=r)
        task = StoreTask(self, self._new_task_id("st"), u, item, r)
        self.tasks[task.task_id] = task
        return task

    def retrieve(self, u: int, item_id: bytes, r: int) -> RetrieveTask:
        if not self.is_present(u, r):
            raise UnknownNode(f"requester {u} not present in round {r}")
        task = RetrieveTask(self, self._new_task_id("ret"), u, item_id, r)
        self.tasks[task.task_id] = task
        return task

    def create_plain_committee(self, u: int, r: int) -> CommitteeTask:
        need = committee_size(self.cfg.h, self.cfg.n)
        invitees = select_distinct_origins(self.samples_at(u, r), need)
        if len(invitees) < need:
            raise InsufficientSamples(
                f"node {u} has {len(invitees)} distinct origins, needs {need}")
        task = CommitteeTask(self, self._new_task_id("com"), members=[],
                             created_round=r)
        task.begin_formation(u, invitees, r, None)
        self.tasks[task.task_id] = task
        return task

    def is_available(self, item_id: bytes, r: int, threshold: float = None):
        return is_available(self, item_id, r, threshold)

    def random_payload(self) -> bytes:
        return self._item_rng.bytes(self.cfg.payload_bytes)

    # -- the round loop -------------------------------------------------------

    def run_round(self, r: int) -> None:
        snap, event = netgen.advance(self.schedule, r)
        self.round = r
        self._h_sorted = None
        # (1) adversary changes: state held by removed nodes vanishes
        if event.count:
            self.records.drop_holders(event.removed)
            for rid in event.removed:
                rid = int(rid)
                self.replicas.pop(rid, None)
                self.pieces.pop(rid, None)
                self._clique_ids.pop(rid, None)
        # (2) neighbor awareness is positional: snap.adj is current
        # (3) message delivery with churn-drop semantics
        delivered, dropped = self.mailbox.tick(r, self.schedule.is_present)
        self._msg_dropped += dropped
        # (4) computation
        self._units = np.zeros(self.schedule.next_id)
        stats = self.engine.step_round(r)
        spawned = 0
        if self.cfg.spawn and self.cfg.alpha > 0:
            spawned = self.engine.spawn_all(r)
        np.add.at(self._units, snap.ids.astype(np.int64),
                  stats.fwd_counts * TOKEN_UNITS)
        for msg in delivered:
            self._route(msg, r)
        for fn in self._actions.pop(r, []):
            fn(self, r)
        for task in list(self.tasks.values()):
            task.on_round(r)
        for task_id in [t for t, task in self.tasks.items()
                        if getattr(task, "status", "live") in
                        ("done", "dead", "dissolved")]:
            task = self.tasks.pop(task_id)
            result = getattr(task, "result", None)
            if result is not None:
                self.results.append(result)
        self.records.purge_expired(r)
        self._finish_metrics(r, snap, stats, spawned)

    def _route(self, msg: Msg, r: int) -> None:
        kind = msg.kind
        if kind == "fetch-req":
            data = self.replica_of(msg.dest, msg.payload["item"])
            if data is not None:
                units = 2 + (-(-len(data) * 8 // 32))
                self.send(sender=msg.dest, dest=msg.payload["w"],
                          kind="fetch-rep", task_id=msg.task_id,
                          payload={"data": data}, units=units)
                task = self.tasks.get(msg.task_id)
                if task is not None:
                    task.messages_used += 1
            return
        if kind == "piece-req":
            piece = self.piece_of(msg.dest, msg.payload["item"])
            if piece is not None:
                units = 2 + (-(-(len(piece.data)) * 8 // 32))
                self.send(sender=msg.dest, dest=msg.sender, kind="piece-rep",
                          task_id=msg.task_id, payload={"piece": piece},
                          units=units)
                task = self.tasks.get(msg.task_id)
                if task is not None:
                    task.messages_used += 1
            return
        if kind == "lm-invite":
            owner = msg.task_id.split("/b", 1)[0]
            task = self.tasks.get(owner)
            if task is not None and hasattr(task, "handle_build_msg"):
                task.handle_build_msg(msg, r)
            return
        task = self.tasks.get(msg.task_id)
        if task is not None:
            task.handle_msg(msg, r)

    def _finish_metrics(self, r, snap, stats, spawned) -> None:
        present_units = self._units[snap.ids.astype(np.int64)]
        max_units = float(present_units.max(initial=0.0))
        p99 = float(np.percentile(present_units, 99)) if present_units.size else 0.0
        if self.cfg.budget_enforce and max_units > self.cfg.budget_cap_units:
            raise BudgetExceeded(
                f"round {r}: node sent {max_units} units, cap "
                f"{self.cfg.budget_cap_units}")
        live_committees = 0
        for t in self.tasks.values():
            ct = getattr(t, "committee_task", None)
            if ct is None and isinstance(t, CommitteeTask):
                ct = t
            if ct is not None and ct.status == "live":
                live_committees += 1
        storage_records = sum(
            len(tbl) for key, tbl in self.records._by_key.items()
            if key[1] == "storage")
        self.metrics.add_row(
            round=r, spawned=spawned, forwarded=stats.forwarded,
            destroyed=stats.destroyed, harvested=stats.harvested,
            in_flight=self.engine.in_flight,
            queued_tokens=stats.queued_tokens, queued_slots=stats.queued_slots,
            messages_sent=self._msg_sent, messages_dropped=self._msg_dropped,
            max_units=max_units, p99_units=p99,
            live_committees=live_committees, storage_records=storage_records)
        self._msg_sent = 0
        self._msg_dropped = 0
        self.engine.check_conservation()

    def run(self, rounds: int = None) -> None:
        end = self.schedule.horizon if rounds is None else \
            min(self.schedule.horizon, self.round + 1 + rounds)
        for r in range(self.round + 1, end):
            self.run_round(r)

    def manifest(self) -> dict:
        from . import __version__
        cfg = {f.name: getattr(self.cfg, f.name) for f in fields(SimulationConfig)}
        return {"config": cfg, "schedule_hash": self.schedule.schedule_hash(),
                "version": __version__}

    def write_outputs(self, out_dir: str, tag: str = "run") -> None:
        import os
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"{tag}_metrics.csv"), "w") as fh:
            fh.write(self.metrics.csv_text())
        with open(os.path.join(out_dir, f"{tag}_events.json"), "w") as fh:
            json.dump(self.metrics.events, fh, indent=0, default=str)
        with open(os.path.join(out_dir, f"{tag}_manifest.json"), "w") as fh:
            json.dump(self.manifest(), fh, indent=2, default=str)
