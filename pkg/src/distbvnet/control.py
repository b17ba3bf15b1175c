"""SDN controllers (flow table, routing, two-step verification) and NFV scaling."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import ledger as lg

FORWARD_TO_CLOUD = "forward-to-cloud"
FORWARD_TO_CLUSTER = "forward-to-cluster"
DROP = "drop"
ACTIONS = (FORWARD_TO_CLOUD, FORWARD_TO_CLUSTER, DROP)


@dataclass(frozen=True)
class FlowRule:
    match: tuple[int, str]  # (cluster_id, destination class)
    action: str
    priority: int = 0
    installed_round: int = 0

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")


DEFAULT_RULE = FlowRule(match=(-1, "*"), action=DROP, priority=-(2**63))


class Controller:
    """One SDN controller; rules are keyed by exact match and priority."""

    def __init__(self, controller_id: int = 0):
        self.id = controller_id
        self._rules: dict[tuple[int, str], dict[int, FlowRule]] = {}
        self.load_history: deque[int] = deque(maxlen=64)
        self.allocation: Optional[VnfAllocation] = None

    def register_flow(self, rule: FlowRule) -> "Controller":
        # same (match, priority) replaces the earlier rule
        self._rules.setdefault(rule.match, {})[rule.priority] = rule
        return self

    def remove_flows(self, match: tuple[int, str]) -> None:
        self._rules.pop(match, None)

    @property
    def rule_count(self) -> int:
        """Installed rules, including the default drop rule."""
        return 1 + sum(len(v) for v in self._rules.values())

    def rules(self) -> list[FlowRule]:
        out = [DEFAULT_RULE]
        for by_prio in self._rules.values():
            out.extend(by_prio.values())
        return out

    def lookup_rule(self, match: tuple[int, str]) -> FlowRule:
        by_prio = self._rules.get(match)
        if not by_prio:
            return DEFAULT_RULE
        return by_prio[max(by_prio)]

    def lookup(self, match: tuple[int, str]) -> str:
        return self.lookup_rule(match).action


def register_flow(controller: Controller, rule: FlowRule) -> Controller:
    return controller.register_flow(rule)


class ControlPlane:
    """Several controllers sharing clusters round-robin in order of first registration."""

    def __init__(self, n_controllers: int = 2):
        if n_controllers < 1:
            raise ValueError("need at least one controller")
        self.controllers = [Controller(i) for i in range(n_controllers)]
        self._assignment: dict[int, int] = {}

    def controller_for(self, cluster_id: int) -> Controller:
        idx = self._assignment.get(cluster_id)
        if idx is None:
            idx = len(self._assignment) % len(self.controllers)
            self._assignment[cluster_id] = idx
        return self.controllers[idx]

    @property
    def assignment(self) -> dict[int, int]:
        return dict(self._assignment)


# -- two-step verification --------------------------------------------------

def _check_attestation(block: lg.Block, ledger: lg.Ledger) -> Optional[str]:
    digests = []
    attest = None
    for raw in block.transactions:
        tx = lg.decode_tx(raw)
        if tx["kind"] == lg.MESSAGE_DIGEST:
            digests.append(bytes.fromhex(tx["digest"]))
        elif tx["kind"] == lg.VERIFICATION_RECORD and tx.get("scope") == "batch":
            attest = tx
    if attest is None:
        return "no-cluster-signature"
    root = lg.batch_root(digests)
    if root.hex() != attest["batch_root"]:
        return "batch-root-mismatch"
    key = bytes.fromhex(attest["public_key"])
    if not ledger.is_registered(attest["cluster"], key):
        return "unregistered-cluster-key"
    signed = lg.attestation_signing_bytes(root, attest["cluster"], attest["round"])
    if not lg.verify_signature(key, bytes.fromhex(attest["signature"]), signed):
        return "bad-cluster-signature"
    return None


def two_step_verify(sm: lg.SignedMessage, ledger: lg.Ledger, store: lg.ContentStore,
                    cache: Optional[dict] = None) -> lg.Verification:
    """Ledger check (step 1), then payload re-hash from the content store (step 2).

    ``cache`` maps block hashes to their attestation outcome so a block
    signature is checked once however many of its messages are routed.
    """
    found = ledger.find_digest(sm.payload_digest)
    if found is None:
        return lg.Verification(False, "not-on-chain", 1)
    block, tx = found
    if (tx["sender"], tx["cluster"], tx["round"]) != (sm.sender, sm.cluster_id, sm.round):
        return lg.Verification(False, "record-mismatch", 1)
    if cache is not None and block.hash in cache:
        problem = cache[block.hash]
    else:
        problem = _check_attestation(block, ledger)
        if cache is not None:
            cache[block.hash] = problem
    if problem:
        return lg.Verification(False, problem, 1)

    if sm.content_id != sm.payload_digest:
        return lg.Verification(False, "content-mismatch", 2)
    payload = store.get(sm.content_id)
    if payload is None:
        return lg.Verification(False, "missing-content", 2)
    if lg.sha256(payload) != sm.payload_digest:
        return lg.Verification(False, "content-mismatch", 2)
    return lg.ACCEPTED


# -- NFV --------------------------------------------------------------------

@dataclass(frozen=True)
class NfvPolicy:
    window: int = 5
    target_utilization: float = 0.8
    unit_capacity: int = 10  # messages per round per capacity unit
    max_capacity: int = 2
    realloc: bool = True
    static_capacity: int = 1


@dataclass(frozen=True)
class VnfAllocation:
    capacity_units: int
    load: float
    t_n_effective: float


def nfv_delay(base_t_n: float, load: float, capacity_units: int, unit_capacity: int) -> float:
    return base_t_n * max(1.0, load / (capacity_units * unit_capacity))


def allocate_resources(load_history: Sequence[float], policy: NfvPolicy = NfvPolicy(),
                       base_t_n: float = 0.1, current_load: Optional[float] = None) -> VnfAllocation:
    """Size VNF capacity from the mean load of the recent window.

    ``current_load`` is the load the allocation must serve; it defaults to the
    latest entry of ``load_history``.
    """
    if not load_history:
        raise ValueError("load_history must be non-empty")
    recent = list(load_history)[-policy.window:]
    mean = sum(recent) / len(recent)
    if policy.realloc:
        # rounding guards against 12.500000000000002-style ceil errors
        units = math.ceil(round(mean / (policy.target_utilization * policy.unit_capacity), 9))
        units = min(max(units, 1), policy.max_capacity)
    else:
        units = policy.static_capacity
    load = load_history[-1] if current_load is None else current_load
    return VnfAllocation(units, float(load), nfv_delay(base_t_n, load, units, policy.unit_capacity))


def decision_record(round_: int, message_id: int, action: str, outcome: str,
                    t_s: float, t_n_effective: float) -> str:
    return json.dumps({"round": round_, "message": message_id, "action": action, "verify": outcome,
                       "t_s": t_s, "t_n_effective": t_n_effective}, sort_keys=True)
