"""Committee creation and perpetual maintenance.

A committee is a clique-of-ids of target size h*ceil(ln n) entrusted with a
task. Every 2*tau rounds it re-forms itself: members record one round of
incoming walk samples, exchange counts, the member with the most samples
invites the origins of its freshest walks as the next epoch's members, and
task state is handed over with the invitations. If the chosen leader was
churned out, the top-ranked surviving members build candidate committees in
parallel and adopt the candidate of the smallest-id surviving initiator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import erasure
from .errors import InsufficientSamples

REPLICATE = "replicate"
ERASURE = "erasure"


@dataclass
class Committee:
    members: list                 # node ids, invitation order
    epoch: int
    created_round: int
    task_tag: str
    leader_of_epoch: int = None


@dataclass
class CommitteeHealth:
    round: int
    live_members: int
    core_proxy_members: int
    good: bool


def committee_size(h: int, n: int) -> int:
    return h * math.ceil(math.log(n))


def select_distinct_origins(origins, need: int, exclude=()) -> list:
    """First `need` distinct origins in arrival order."""
    seen = set(exclude)
    out = []
    for o in origins:
        o = int(o)
        if o not in seen:
            seen.add(o)
            out.append(o)
            if len(out) == need:
                break
    return out


def create_committee(u: int, r: int, samples, task_tag: str, h: int, n: int) -> Committee:
    """Choose h*ceil(ln n) distinct origins from u's freshest samples as the
    invited member set. Sample liveness at invitation delivery is the
    simulator's business; the returned committee lists the invitees."""
    need = committee_size(h, n)
    ordered = sorted(samples, key=lambda s: (-s.arrival_round,))
    chosen = select_distinct_origins([s.origin for s in ordered], need)
    if len(chosen) < need:
        raise InsufficientSamples(
            f"node {u} has {len(chosen)} distinct fresh origins, needs {need}")
    return Committee(members=chosen, epoch=0, created_round=r, task_tag=task_tag)


class CommitteeTask:
    """Round-driven committee state machine within the simulator.

    ``cargo`` maps member id -> task payload (a replica blob in replicate
    mode, a Piece in erasure mode); it travels with invitations so each new
    epoch owns the same task state.
    """

    def __init__(self, sim, task_id: str, members: list, created_round: int,
                 mode: str = REPLICATE, cargo: dict = None,
                 dissolve_round: int = None, payload: bytes = None,
                 item_id: bytes = None):
        self.sim = sim
        self.task_id = task_id
        self.mode = mode
        self.committee = Committee(members=list(members), epoch=0,
                                   created_round=created_round, task_tag=task_id)
        self.cargo = dict(cargo or {})
        self.payload = payload          # replicate mode: the replica blob
        self.item_id = item_id
        self.status = "live"
        self.death_reason = None
        self.dissolve_round = dissolve_round
        self.health_records = []
        self.first_bad_epoch = None
        self.epochs_observed = 0
        self.lifetime_epochs = None     # first not-good epoch index; None = censored
        # maintenance scratch
        self._phase_counts = {}         # sender -> count (delivered at R+2)
        self._phase_origins = {}        # member -> list of origins received at R
        self._phase_pieces = {}         # sender -> Piece (erasure piggyback)
        self._fallback = None           # list of (initiator, invited) candidates
        self._pending_invites = {}      # candidate id -> list of (invitee, cargo)
        self._forming_round = None
        self._forming_candidate = None

    def begin_formation(self, initiator: int, invitees: list, r: int,
                        cargo_list) -> None:
        """Creation: the initiator invites its chosen sample origins, sending
        the full invite list (clique knowledge) and any task cargo; the
        committee goes live next round with whoever survived delivery."""
        self.status = "forming"
        self._forming_round = r
        self._forming_candidate = initiator
        for idx, invitee in enumerate(invitees):
            cargo = None if cargo_list is None else cargo_list[idx]
            payload = {"candidate": initiator, "members": list(invitees),
                       "cargo": cargo}
            units = len(invitees) + 2 + cargo_units(cargo)
            self.sim.send(sender=initiator, dest=invitee, kind="com-invite",
                          task_id=self.task_id, payload=payload, units=units)

    # -- round arithmetic --------------------------------------------------

    def _maintenance_base(self, r: int):
        """The gamma >= 1 maintenance window containing r, if any."""
        two_tau = 2 * self.sim.tau
        off = r - self.committee.created_round
        if off < two_tau:
            return None, None
        gamma, phase = divmod(off, two_tau)
        return (gamma, phase) if phase <= 3 else (None, None)

    # -- message handling ----------------------------------------------------

    def handle_msg(self, msg, r: int):
        if self.status not in ("live", "forming"):
            return
        kind = msg.kind
        if kind == "com-count":
            self._phase_counts[msg.sender] = msg.payload["count"]
            piece = msg.payload.get("piece")
            if piece is not None:
                self._phase_pieces[msg.sender] = piece
        elif kind == "com-invite":
            cand = msg.payload["candidate"]
            self._pending_invites.setdefault(cand, []).append(
                (msg.dest, msg.payload.get("cargo")))

    # -- per-round protocol --------------------------------------------------

    def on_round(self, r: int):
        if self.status == "forming":
            if r == self._forming_round + 1:
                self._adopt_formation(r)
            return
        if self.status != "live":
            return
        if self.dissolve_round is not None and r >= self.dissolve_round:
            self.status = "dissolved"
            return
        gamma, phase = self._maintenance_base(r)
        if gamma is None:
            return
        sim = self.sim
        members = self.committee.members
        if phase == 0:
            self._phase_counts = {}
            self._phase_origins = {}
            self._phase_pieces = {}
            self._fallback = None
            self._pending_invites = {}
            live = [m for m in members if sim.is_present(m, r)]
            self._record_health(r, live)
            if not live:
                self._die(r, "committee-dead")
                return
            for m in live:
                self._phase_origins[m] = sim.samples_at(m, r)
        elif phase == 1:
            live = [m for m in members if sim.is_present(m, r)]
            for m in live:
                if m not in self._phase_origins:
                    continue        # joined after phase A; nothing to report
                payload = {"count": len(self._phase_origins[m])}
                if self.mode == ERASURE and m in self.cargo:
                    payload["piece"] = self.cargo[m]
                for dest in members:
                    sim.send(sender=m, dest=dest, kind="com-count",
                             task_id=self.task_id, payload=payload,
                             units=2 + (erasure_piece_units(payload.get("piece"))))
        elif phase == 2:
            self._phase_c(r)
        elif phase == 3:
            self._phase_d(r)

    def _adopt_formation(self, r: int) -> None:
        sim = self.sim
        arrivals = self._pending_invites.get(self._forming_candidate, [])
        joined = [(node, cargo) for node, cargo in arrivals
                  if sim.is_present(node, r)]
        self._pending_invites = {}
        if not joined:
            self.status = "dead"
            self.death_reason = "formation-failed"
            self.lifetime_epochs = 0
            sim.emit_event(r, "committee-dead", task=self.task_id,
                           reason="formation-failed", epoch=0)
            return
        self.status = "live"
        self.committee = Committee(members=[node for node, _ in joined],
                                   epoch=0, created_round=r,
                                   task_tag=self.task_id,
                                   leader_of_epoch=self._forming_candidate)
        self.cargo = {}
        for node, cargo in joined:
            if cargo is not None:
                self.cargo[node] = cargo
                sim.register_cargo(node, self, cargo)
        sim.emit_event(r, "committee-epoch", task=self.task_id, epoch=0,
                       members=len(joined))

    def _record_health(self, r: int, live: list) -> None:
        sim = self.sim
        two_tau = 2 * sim.tau
        lo = max(0, r - two_tau)
        proxy = sum(1 for m in self.committee.members
                    if sim.present_throughout(m, lo, r))
        need = math.ceil((1.0 - sim.cfg.epsilon) * committee_size(sim.cfg.h, sim.cfg.n))
        good = proxy >= need
        rec = CommitteeHealth(round=r, live_members=len(live),
                              core_proxy_members=proxy, good=good)
        self.health_records.append(rec)
        self.epochs_observed += 1
        if not good and self.first_bad_epoch is None:
            self.first_bad_epoch = self.epochs_observed
            self.lifetime_epochs = self.epochs_observed
        sim.emit_event(r, "committee-health", task=self.task_id,
                       epoch=self.committee.epoch, live=len(live),
                       core_proxy=proxy, good=good)

    def _phase_c(self, r: int):
        sim = self.sim
        if not self._phase_counts:
            self._die(r, "committee-dead")
            return
        ranked = sorted(self._phase_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        leader = ranked[0][0]
        need = committee_size(sim.cfg.h, sim.cfg.n)
        if sim.is_present(leader, r):
            self.committee.leader_of_epoch = leader
            self._invite_from(leader, r, need, candidate=leader)
            self._fallback = None
        else:
            q = min(sim.cfg.ln_ceil, len(ranked))
            initiators = [m for m, _ in ranked if sim.is_present(m, r)][:q]
            if not initiators:
                self._die(r, "committee-dead")
                return
            self._fallback = initiators
            for init in initiators:
                self._invite_from(init, r, need, candidate=init)

    def _invite_from(self, leader: int, r: int, need: int, candidate: int):
        sim = self.sim
        origins = self._phase_origins.get(leader, [])
        chosen = select_distinct_origins(origins, need)
        new_cargo = self._handover_cargo(leader, chosen, r)
        for idx, invitee in enumerate(chosen):
            payload = {"candidate": candidate, "members": list(chosen),
                       "cargo": None if new_cargo is None else new_cargo[idx]}
            units = len(chosen) + 2 + cargo_units(payload["cargo"])
            sim.send(sender=leader, dest=invitee, kind="com-invite",
                     task_id=self.task_id, payload=payload, units=units)

    def _handover_cargo(self, leader: int, chosen: list, r: int):
        """Task state for each new member, by invitation index."""
        sim = self.sim
        if self.mode == REPLICATE:
            if self.payload is None:
                return None
            return [self.payload] * len(chosen)
        pieces = list(self._phase_pieces.values())
        if not pieces:
            return None
        params = pieces[0].params
        try:
            blob = erasure.reconstruct(pieces)
        except Exception:
            sim.emit_event(r, "reconstruction-impossible", task=self.task_id,
                           live_pieces=len({p.index for p in pieces}),
                           needed=params.K)
            self._die(r, "reconstruction-impossible")
            return None
        fresh = erasure.disperse(blob, params)
        return [fresh[i % params.L] for i in range(len(chosen))]

    def _phase_d(self, r: int):
        sim = self.sim
        if self.status != "live":
            return
        if self._fallback is not None:
            survivors = [i for i in self._fallback if sim.is_present(i, r)]
            if not survivors:
                self._die(r, "committee-dead")
                return
            winner = min(survivors)
            for cand, invitees in self._pending_invites.items():
                if cand == winner or not sim.is_present(cand, r):
                    continue
                for invitee, _ in invitees:
                    sim.send(sender=cand, dest=invitee, kind="com-dissolve",
                             task_id=self.task_id, payload={}, units=1)
        else:
            winner = self.committee.leader_of_epoch
        arrivals = self._pending_invites.get(winner, [])
        joined = [(node, cargo) for node, cargo in arrivals if sim.is_present(node, r)]
        if not joined:
            self._die(r, "committee-dead")
            return
        old_members = self.committee.members
        self.committee = Committee(
            members=[node for node, _ in joined],
            epoch=self.committee.epoch + 1,
            created_round=self.committee.created_round,
            task_tag=self.task_id,
            leader_of_epoch=winner)
        new_cargo = {}
        for node, cargo in joined:
            if cargo is not None:
                new_cargo[node] = cargo
                sim.register_cargo(node, self, cargo)
        for node in old_members:
            if node not in new_cargo:
                sim.unregister_cargo(node, self)
        self.cargo = new_cargo
        sim.emit_event(r, "committee-epoch", task=self.task_id,
                       epoch=self.committee.epoch, members=len(joined))

    def _die(self, r: int, reason: str):
        self.status = "dead"
        self.death_reason = reason
        if self.lifetime_epochs is None:
            self.lifetime_epochs = self.epochs_observed
            if self.first_bad_epoch is None:
                self.first_bad_epoch = self.epochs_observed
        for node in self.committee.members:
            self.sim.unregister_cargo(node, self)
        self.sim.emit_event(r, "committee-dead", task=self.task_id,
                            reason=reason, epoch=self.committee.epoch)

    # -- queries -------------------------------------------------------------

    def live_members(self, r: int) -> list:
        return [m for m in self.committee.members if self.sim.is_present(m, r)]

    def measure_health(self, r: int) -> CommitteeHealth:
        live = self.live_members(r)
        sim = self.sim
        lo = max(0, r - 2 * sim.tau)
        proxy = sum(1 for m in self.committee.members
                    if sim.present_throughout(m, lo, r))
        need = math.ceil((1.0 - sim.cfg.epsilon) * committee_size(sim.cfg.h, sim.cfg.n))
        return CommitteeHealth(round=r, live_members=len(live),
                               core_proxy_members=proxy, good=proxy >= need)


def cargo_units(cargo) -> int:
    if cargo is None:
        return 0
    if isinstance(cargo, (bytes, bytearray)):
        return -(-len(cargo) * 8 // 32)
    return erasure_piece_units(cargo)


def erasure_piece_units(piece) -> int:
    if piece is None:
        return 0
    return -(-(len(piece.data) + erasure.HEADER_LEN) * 8 // 32)
