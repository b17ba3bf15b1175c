"""Round-based discrete-event engine tying clustering, IDS, ledgers and control together.

Each round runs its phases in a fixed order::

    mobility -> generate -> cluster-forward -> ids-check -> ledger-commit
             -> controller-route (messages committed last round)
             -> cloud-flush -> energy -> churn

so a message committed in round r is routed in round r + 1 and messages
committed in the final round are reported as in flight.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Optional, Sequence

import numpy as np

from . import control as ctl
from . import ids
from . import ledger as lg
from .cluster import Cluster, form_clusters, handle_churn, assign_vehicles
from .core import (ConfigError, DelayModel, ScenarioConfig, Vehicle, build_rsus, build_vehicles,
                   derive_seed, stream, validate_config)

# phase order inside a round; also the tie-break order of the event log
EVENT_KINDS = ("generate", "cluster-forward", "ids-check", "ledger-commit", "controller-route",
               "cloud-flush", "energy", "deplete", "churn", "exchange")

# field names of SimEvent.data per kind, used for the JSON-lines export
EVENT_FIELDS = {
    "generate": ("sender", "cluster", "bytes", "malicious"),
    "cluster-forward": ("head", "verify"),
    "ids-check": ("score", "verdict"),
    "ledger-commit": ("height", "tx_count", "gas_used"),
    "controller-route": ("controller", "action", "outcome", "reason", "delay", "t_n_effective", "bytes"),
    "cloud-flush": ("height", "anchors"),
    "energy": ("drained",),
    "deplete": (),
    "churn": ("departed", "joined", "head", "dissolved"),
    "exchange": ("data", "forward", "control", "ledger", "vote", "delivery"),
}

BENIGN_RADIUS = 2.0  # benign flows are Gaussian draws kept within 2 sigma
DEST_CLASS = "cloud"
RULE_PRIORITY = 10


class SimEvent(NamedTuple):
    round: int
    kind: str
    subject: int
    data: tuple

    def as_dict(self) -> dict:
        out = {"round": self.round, "kind": self.kind, "subject": self.subject}
        out.update(zip(EVENT_FIELDS[self.kind], self.data))
        return out


@dataclass
class Message:
    id: int
    sender: int
    cluster_id: int
    round: int
    size: int
    malicious: bool
    signed: lg.SignedMessage
    status: str = "generated"
    delay: Optional[float] = None
    t_n_effective: Optional[float] = None


@dataclass
class Counters:
    sent: int = 0
    delivered: int = 0
    blocked: int = 0
    dropped: int = 0
    in_flight: int = 0
    exchanged: int = 0
    delivered_bits: int = 0
    generated_bits: int = 0
    malicious_sent: int = 0
    malicious_blocked: int = 0
    malicious_delivered: int = 0


@dataclass
class RunReport:
    config: ScenarioConfig
    rounds: int
    counters: Counters
    delays: list[float]
    t_n_samples: list[float]
    energy_drains: list[float]
    first_depletion_round: Optional[int]
    cluster_size_samples: list[int]
    cluster_rows: list[tuple[int, int, int, int, int]]
    events: list[SimEvent]
    cluster_ledgers: dict[int, lg.Ledger]
    cloud: lg.Ledger
    store: lg.ContentStore
    quarantine: lg.ContentStore
    vehicles: list[Vehicle]
    clusters: dict[int, Cluster]
    control: ctl.ControlPlane
    depletion_rounds: dict[int, int] = field(default_factory=dict)

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicles)

    def energy_consumed(self) -> float:
        return math.fsum(self.energy_drains)

    def conservation_holds(self) -> bool:
        c = self.counters
        return c.sent == c.delivered + c.blocked + c.dropped + c.in_flight

    def write_events(self, path: str | Path) -> None:
        """JSON lines, one event per line, fields per ``EVENT_FIELDS``."""
        with open(path, "w") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev.as_dict(), sort_keys=True) + "\n")


def path_delay(delays: DelayModel, t_n_effective: Optional[float] = None) -> float:
    """Member to head, ledger commit, controller, NFV and infrastructure legs."""
    t_n = delays.t_n if t_n_effective is None else t_n_effective
    return delays.t_c + delays.t_b + delays.t_s + t_n + delays.t_v


def end_to_end_delay(message: Message) -> float:
    if message.status != "delivered" or message.delay is None:
        raise ValueError(f"message {message.id} was not delivered ({message.status})")
    return message.delay


# -- mobility ---------------------------------------------------------------

def advance(v: Vehicle, accel: float, area: tuple[float, float], dt: float = 1.0) -> None:
    """Integrate one step with speed clamped to [0, max_speed]; reflect off the area edges."""
    v.speed = min(max(v.speed + accel * dt, 0.0), v.max_speed)
    x = v.position[0] + v.speed * math.cos(v.heading) * dt
    y = v.position[1] + v.speed * math.sin(v.heading) * dt
    heading = v.heading
    w, h = area
    if x < 0.0:
        x, heading = -x, math.pi - heading
    elif x > w:
        x, heading = 2 * w - x, math.pi - heading
    if y < 0.0:
        y, heading = -y, -heading
    elif y > h:
        y, heading = 2 * h - y, -heading
    v.position = (min(max(x, 0.0), w), min(max(y, 0.0), h))
    v.heading = heading % (2 * math.pi)


def step_mobility(vehicles: Sequence[Vehicle], area: tuple[float, float], rng: np.random.Generator) -> None:
    """Draw one acceleration per vehicle in [-max_decel, max_accel] and move live vehicles."""
    u = rng.random(len(vehicles))
    for v, ui in zip(vehicles, u):
        if v.depleted:
            continue
        advance(v, -v.max_decel + float(ui) * (v.max_accel + v.max_decel), area)


# -- IDS training -----------------------------------------------------------

def synthetic_training_set(cfg: ScenarioConfig) -> np.ndarray:
    ic = cfg.ids_config
    rng = stream(cfg.seed, "ids-train")
    n_bad = int(round(ic.training_samples * ic.training_contamination))
    return np.vstack([
        ids.synthetic_inliers(rng, ic.training_samples - n_bad, ic.n_features),
        ids.synthetic_outliers(rng, n_bad, ic.n_features),
    ])


def train_default_forest(cfg: ScenarioConfig) -> ids.IsolationForest:
    return ids.fit(synthetic_training_set(cfg), cfg.ids_config, seed=derive_seed(cfg.seed, "ids-forest"))


# -- the engine -------------------------------------------------------------

class Simulation:
    def __init__(self, cfg: ScenarioConfig, forest: Optional[ids.IsolationForest] = None,
                 record_events: bool = True):
        problems = validate_config(cfg)
        if problems:
            raise ConfigError("; ".join(problems))
        self.cfg = cfg
        self.forest = forest if forest is not None else train_default_forest(cfg)
        if self.forest.dimensionality != cfg.ids_config.n_features:
            raise ValueError(f"IDS model expects {self.forest.dimensionality} features, "
                             f"scenario generates {cfg.ids_config.n_features}")
        self.record_events = record_events

        self.vehicles = build_vehicles(cfg)
        for v in self.vehicles:
            v.key_pair = lg.generate_keypair(cfg.seed, "vehicle", v.id)
        self.by_id = {v.id: v for v in self.vehicles}
        self.rsus = build_rsus(cfg)
        self.rsu_by_id = {r.id: r for r in self.rsus}
        self.ledgers = {r.id: lg.Ledger("cluster", cfg.gas_model, owner=r.id) for r in self.rsus}
        self.cloud = lg.Ledger("cloud", cfg.gas_model)
        self.anchored = {r.id: -1 for r in self.rsus}
        self.control = ctl.ControlPlane(cfg.n_controllers)
        self.store = lg.ContentStore()
        self.quarantine = lg.ContentStore()
        self.clusters: dict[int, Cluster] = {}
        self.attest_cache: dict[bytes, Optional[str]] = {}

        self.rng_mobility = stream(cfg.seed, "mobility")
        self.rng_traffic = stream(cfg.seed, "traffic")
        self.rng_features = stream(cfg.seed, "features")
        self.rng_payload = stream(cfg.seed, "payload")

        self.counters = Counters()
        self.events: list[SimEvent] = []
        self.delays: list[float] = []
        self.t_n_samples: list[float] = []
        self.energy_drains: list[float] = []
        self.depletion_rounds: dict[int, int] = {}
        self.cluster_size_samples: list[int] = []
        self.cluster_rows: list[tuple[int, int, int, int, int]] = []
        self.pending: list[Message] = []
        self.next_msg_id = 0
        self.exchange = self._zero_exchange()

    @staticmethod
    def _zero_exchange() -> dict[str, int]:
        return {k: 0 for k in EVENT_FIELDS["exchange"]}

    def _log(self, round_: int, kind: str, subject: int, *data: Any) -> None:
        if self.record_events:
            self.events.append(SimEvent(round_, kind, subject, data))

    # -- clustering ---------------------------------------------------------

    def _install(self, c: Cluster, round_: int) -> None:
        self.clusters[c.id] = c
        for vid in c.members:
            self.by_id[vid].cluster_id = c.id
        self.rsu_by_id[c.rsu_id].cluster_ids.add(c.id)
        controller = self.control.controller_for(c.id)
        controller.register_flow(ctl.FlowRule((c.id, DEST_CLASS), ctl.FORWARD_TO_CLOUD, RULE_PRIORITY, round_))

    def _dissolve(self, cid: int, round_: int) -> None:
        del self.clusters[cid]
        self.rsu_by_id[cid].cluster_ids.discard(cid)
        self.control.controller_for(cid).register_flow(
            ctl.FlowRule((cid, DEST_CLASS), ctl.DROP, RULE_PRIORITY, round_))

    def _count_election(self, c: Cluster) -> None:
        self.exchange["vote"] += len(c.vote_record)
        self.exchange["control"] += 1  # registration notice to the controller

    def _initial_clusters(self, round_: int) -> None:
        clustering = form_clusters(self.vehicles, self.rsus, self.cfg, self.ledgers, round_)
        for c in clustering.clusters:
            self._install(c, round_)
            self._count_election(c)
            self._log(round_, "churn", c.id, (), tuple(sorted(c.members)), c.head, False)

    def _recluster(self, round_: int, departures_only: set[int]) -> None:
        """Full membership refresh, or only removal of ``departures_only`` when it is non-empty."""
        if departures_only:
            target = {cid: set(c.members) - departures_only for cid, c in self.clusters.items()}
        else:
            assignment = assign_vehicles(self.vehicles, self.rsus)
            target: dict[int, set[int]] = {}
            for vid, rid in assignment.items():
                if rid is not None:
                    target.setdefault(rid, set()).add(vid)
        departing = {vid for cid, c in self.clusters.items() for vid in c.members - target.get(cid, set())}
        clustered = {vid for c in self.clusters.values() for vid in c.members} - departing
        for vid in departing:
            self.by_id[vid].cluster_id = None

        for cid in sorted(set(self.clusters) | set(target)):
            old = self.clusters.get(cid)
            new_members = target.get(cid, set())
            if old is None:
                sub = form_clusters([self.by_id[v] for v in sorted(new_members)], [self.rsu_by_id[cid]],
                                    self.cfg, self.ledgers, round_)
                for c in sub.clusters:
                    self._install(c, round_)
                    self._count_election(c)
                    self._log(round_, "churn", cid, (), tuple(sorted(c.members)), c.head, False)
                clustered |= new_members
                continue
            departed = old.members - new_members
            joined = new_members - old.members
            if not departed and not joined:
                continue
            updated = handle_churn(old, departed, joined, self.by_id, self.rsu_by_id[cid], self.cfg,
                                   self.ledgers[cid], round_, clustered)
            clustered |= joined
            if updated is None:
                self._dissolve(cid, round_)
                self._log(round_, "churn", cid, tuple(sorted(departed)), (), -1, True)
                continue
            if updated.head != old.head:
                self._count_election(updated)
            self._install(updated, round_)
            self._log(round_, "churn", cid, tuple(sorted(departed)), tuple(sorted(joined)),
                      updated.head, False)

    # -- message path -------------------------------------------------------

    def _generate(self, round_: int) -> list[Message]:
        cfg = self.cfg
        lo, hi = cfg.packet_size_range
        senders = [v for v in self.vehicles
                   if not v.depleted and v.cluster_id is not None and v.cluster_id in self.clusters]
        msgs = []
        for v in senders:
            for _ in range(cfg.messages_per_vehicle):
                size = int(self.rng_traffic.integers(lo, hi + 1))
                malicious = bool(self.rng_traffic.random() < cfg.malicious_fraction)
                payload = self.rng_payload.bytes(size)
                sm = lg.sign_message(payload, v.id, v.cluster_id, round_, v.key_pair, self.store)
                m = Message(self.next_msg_id, v.id, v.cluster_id, round_, size, malicious, sm)
                self.next_msg_id += 1
                msgs.append(m)
                self.counters.sent += 1
                self.counters.generated_bits += 8 * size
                self.counters.malicious_sent += malicious
                self._log(round_, "generate", m.id, v.id, v.cluster_id, size, malicious)
        return msgs

    def _features(self, msgs: Sequence[Message]) -> np.ndarray:
        d = self.cfg.ids_config.n_features
        n_bad = sum(m.malicious for m in msgs)
        good = ids.synthetic_inliers(self.rng_features, len(msgs) - n_bad, d, radius=BENIGN_RADIUS)
        bad = ids.synthetic_outliers(self.rng_features, n_bad, d)
        out = np.empty((len(msgs), d))
        gi = bi = 0
        for i, m in enumerate(msgs):
            if m.malicious:
                out[i] = bad[bi]
                bi += 1
            else:
                out[i] = good[gi]
                gi += 1
        return out

    def _drop(self, m: Message) -> None:
        m.status = "dropped"
        self.counters.dropped += 1

    def _forward_and_filter(self, round_: int, msgs: list[Message], drain: dict[int, float]) -> list[Message]:
        em = self.cfg.energy_model
        passed = []
        for m in msgs:
            head = self.clusters[m.cluster_id].head
            if m.sender != head:
                self.exchange["data"] += 1
                drain[m.sender] += em.tx_cost_per_byte * m.size
                drain[head] += em.rx_cost_per_byte * m.size
            check = lg.verify_message(m.signed, self.by_id[m.sender].key_pair.public, self.store)
            self._log(round_, "cluster-forward", m.id, head, check.reason or "accepted")
            if not check.accepted:
                self._drop(m)
                continue
            passed.append(m)
        if not passed:
            return []
        scores = self.forest.score_samples(self._features(passed))
        forwarded = []
        for m, s in zip(passed, scores):
            verdict = ids.MALICIOUS if s >= self.forest.threshold else ids.BENIGN
            self._log(round_, "ids-check", m.id, float(s), verdict)
            if verdict == ids.MALICIOUS:
                m.status = "blocked"
                self.counters.blocked += 1
                self.counters.malicious_blocked += m.malicious
                self.quarantine.put(self.store.pop(m.signed.content_id))
            else:
                forwarded.append(m)
        return forwarded

    def _commit(self, round_: int, msgs: list[Message]) -> None:
        by_cluster: dict[int, list[Message]] = {}
        for m in msgs:
            by_cluster.setdefault(m.cluster_id, []).append(m)
        for cid in sorted(by_cluster):
            batch = by_cluster[cid]
            cluster = self.clusters[cid]
            digests = [m.signed.payload_digest for m in batch]
            txs = [lg.digest_tx(m.signed.payload_digest, m.sender, cid, round_) for m in batch]
            txs.append(lg.attestation_tx(cluster.key_pair, cid, round_, digests))
            led = lg.append_block(self.ledgers[cid], txs, round_)
            self.exchange["forward"] += len(batch)
            self.exchange["ledger"] += 1
            self._log(round_, "ledger-commit", cid, led.height, led.tip.tx_count, led.tip.gas_used)
            for m in batch:
                m.status = "in-flight"

    def _route(self, round_: int) -> None:
        cfg = self.cfg
        pending, self.pending = self.pending, []
        loads = [0] * len(self.control.controllers)
        owners = []
        for m in pending:
            c = self.control.controller_for(m.cluster_id)
            owners.append(c)
            loads[c.id] += 1
        for c in self.control.controllers:
            c.load_history.append(loads[c.id])
            c.allocation = ctl.allocate_resources(c.load_history, cfg.nfv_policy, cfg.delay_model.t_n)
        for m, c in zip(pending, owners):
            action = c.lookup((m.cluster_id, DEST_CLASS))
            t_n = c.allocation.t_n_effective
            if action == ctl.DROP:
                self._drop(m)
                self._log(round_, "controller-route", m.id, c.id, action, "dropped", "flow-drop",
                          None, t_n, m.size)
                continue
            check = ctl.two_step_verify(m.signed, self.ledgers[m.cluster_id], self.store, self.attest_cache)
            if not check.accepted:
                self._drop(m)
                self._log(round_, "controller-route", m.id, c.id, action, "dropped",
                          f"step{check.step}:{check.reason}", None, t_n, m.size)
                continue
            m.status = "delivered"
            m.delay = path_delay(cfg.delay_model, t_n)
            m.t_n_effective = t_n
            self.delays.append(m.delay)
            self.t_n_samples.append(t_n)
            self.counters.delivered += 1
            self.counters.delivered_bits += 8 * m.size
            self.counters.malicious_delivered += m.malicious
            self.exchange["delivery"] += 1
            self._log(round_, "controller-route", m.id, c.id, action, "delivered", None,
                      m.delay, t_n, m.size)

    def _flush_cloud(self, round_: int) -> None:
        txs = []
        for cid in sorted(self.ledgers):
            led = self.ledgers[cid]
            for b in led.blocks[self.anchored[cid] + 1:]:
                txs.append(lg.anchor_tx(cid, b.index, b.hash))
            self.anchored[cid] = led.height
        if txs:
            lg.append_block(self.cloud, txs, round_)
            self.exchange["ledger"] += 1
            self._log(round_, "cloud-flush", 0, self.cloud.height, len(txs))

    def _energy(self, round_: int, drain: dict[int, float]) -> list[int]:
        em = self.cfg.energy_model
        for c in self.clusters.values():
            drain[c.head] += em.ch_overhead_per_round
        newly = []
        for v in self.vehicles:
            if v.depleted:
                continue
            want = drain[v.id] + em.idle_cost_per_round
            taken = min(want, v.energy)
            v.energy -= taken
            self.energy_drains.append(taken)
            self._log(round_, "energy", v.id, taken)
            if v.energy <= 0.0:
                v.energy = 0.0
                newly.append(v.id)
                self.depletion_rounds[v.id] = round_
                self._log(round_, "deplete", v.id)
        return newly

    def _sample(self, round_: int) -> None:
        for cid in sorted(self.clusters):
            c = self.clusters[cid]
            self.cluster_size_samples.append(c.size)
            self.cluster_rows.append((round_, cid, c.rsu_id, c.head, c.size))

    # -- main loop ----------------------------------------------------------

    def step(self, round_: int) -> None:
        cfg = self.cfg
        self.exchange = self._zero_exchange()
        if round_ == 0:
            self._initial_clusters(round_)
        else:
            step_mobility(self.vehicles, cfg.area, self.rng_mobility)

        drain = {v.id: 0.0 for v in self.vehicles}
        msgs = self._generate(round_)
        forwarded = self._forward_and_filter(round_, msgs, drain)
        self._commit(round_, forwarded)
        self._route(round_)
        self.pending = forwarded
        if (round_ + 1) % cfg.cloud_flush_interval == 0:
            self._flush_cloud(round_)
        depleted = self._energy(round_, drain)

        heads_lost = any(c.head in depleted for c in self.clusters.values())
        due = (round_ + 1) % cfg.recluster_interval == 0
        if due or heads_lost:
            self._recluster(round_, set())
        elif depleted:
            self._recluster(round_, set(depleted))
        if (round_ + 1) % cfg.window_rounds == 0:
            self._sample(round_)

        self._account(round_)

    def _account(self, round_: int) -> None:
        total = sum(self.exchange.values())
        self.counters.exchanged += total
        if total:
            self._log(round_, "exchange", round_, *self.exchange.values())

    def run(self) -> RunReport:
        rounds = self.cfg.rounds
        for r in range(rounds):
            self.step(r)
        if rounds:
            # anchor whatever the last periodic flush missed
            self.exchange = self._zero_exchange()
            self._flush_cloud(rounds - 1)
            self._account(rounds - 1)
        self.counters.in_flight = len(self.pending)
        first = min(self.depletion_rounds.values()) if self.depletion_rounds else None
        return RunReport(
            config=self.cfg,
            rounds=rounds,
            counters=self.counters,
            delays=self.delays,
            t_n_samples=self.t_n_samples,
            energy_drains=self.energy_drains,
            first_depletion_round=first,
            cluster_size_samples=self.cluster_size_samples,
            cluster_rows=self.cluster_rows,
            events=self.events,
            cluster_ledgers=self.ledgers,
            cloud=self.cloud,
            store=self.store,
            quarantine=self.quarantine,
            vehicles=self.vehicles,
            clusters=self.clusters,
            control=self.control,
            depletion_rounds=dict(self.depletion_rounds),
        )


def run(cfg: ScenarioConfig, forest: Optional[ids.IsolationForest] = None,
        record_events: bool = True) -> RunReport:
    return Simulation(cfg, forest, record_events).run()
