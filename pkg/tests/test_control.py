import hashlib
import random

import pytest
from hypothesis import given, strategies as st

from distbvnet import control as ctl
from distbvnet import ledger as lg
from distbvnet.control import DROP, FORWARD_TO_CLOUD, FORWARD_TO_CLUSTER, Controller, FlowRule, NfvPolicy


def test_single_rule_lookup():
    c = Controller().register_flow(FlowRule((1, "cloud"), FORWARD_TO_CLOUD))
    assert c.lookup((1, "cloud")) == FORWARD_TO_CLOUD


def test_same_priority_replaces():
    c = Controller()
    c.register_flow(FlowRule((1, "cloud"), FORWARD_TO_CLOUD, 5))
    c.register_flow(FlowRule((1, "cloud"), DROP, 5))
    assert c.lookup((1, "cloud")) == DROP
    assert c.rule_count == 2


def test_unmatched_falls_to_default_drop():
    assert Controller().lookup((9, "cloud")) == DROP


def test_hundred_random_rules_match_linear_scan():
    rng = random.Random(0)
    c = Controller()
    installed = []
    for _ in range(100):
        rule = FlowRule((rng.randrange(10), rng.choice(["cloud", "cluster"])),
                        rng.choice(ctl.ACTIONS), rng.randrange(5))
        c.register_flow(rule)
        installed.append(rule)
    for cid in range(12):
        for dest in ("cloud", "cluster", "other"):
            match = (cid, dest)
            # highest priority wins; a later install wins a priority tie
            hits = [(r.priority, i) for i, r in enumerate(installed) if r.match == match]
            expected = installed[max(hits)[1]].action if hits else DROP
            assert c.lookup(match) == expected


def test_unknown_action_rejected():
    with pytest.raises(ValueError):
        FlowRule((0, "cloud"), "teleport")


def test_control_plane_round_robin():
    cp = ctl.ControlPlane(2)
    assert [cp.controller_for(c).id for c in (7, 3, 9, 7)] == [0, 1, 0, 0]


def _committed(payload=b"payload", sender=4, cid=0, round_=1):
    store = lg.ContentStore()
    led = lg.Ledger("cluster")
    ck = lg.generate_keypair(1, "cluster", cid)
    lg.append_block(led, [lg.registration_tx(cid, cid, sender, ck.public, 0)])
    vk = lg.generate_keypair(1, "vehicle", sender)
    sm = lg.sign_message(payload, sender, cid, round_, vk, store)
    lg.append_block(led, [lg.digest_tx(sm.payload_digest, sender, cid, round_),
                          lg.attestation_tx(ck, cid, round_, [sm.payload_digest])])
    return sm, led, store


def test_verify_accepts_intact():
    sm, led, store = _committed()
    assert ctl.two_step_verify(sm, led, store) == lg.ACCEPTED


def test_verify_not_on_chain():
    sm, led, store = _committed()
    other = lg.sign_message(b"other", 4, 0, 1, lg.generate_keypair(1, "vehicle", 4), store)
    assert ctl.two_step_verify(other, led, store) == (False, "not-on-chain", 1)


def test_verify_tampered_store():
    sm, led, store = _committed()
    store.blobs[sm.content_id] = b"payloaD"
    assert ctl.two_step_verify(sm, led, store) == (False, "content-mismatch", 2)


def test_verify_missing_content():
    sm, led, store = _committed()
    store.pop(sm.content_id)
    assert ctl.two_step_verify(sm, led, store) == (False, "missing-content", 2)


def test_verify_record_mismatch():
    sm, led, store = _committed()
    forged = lg.SignedMessage(sm.payload_digest, sm.content_id, 99, sm.cluster_id, sm.round, sm.signature)
    assert ctl.two_step_verify(forged, led, store) == (False, "record-mismatch", 1)


def test_verify_unregistered_cluster_key():
    store = lg.ContentStore()
    led = lg.Ledger("cluster")
    rogue = lg.generate_keypair(1, "rogue")
    sm = lg.sign_message(b"p", 1, 0, 0, lg.generate_keypair(1, "vehicle", 1), store)
    lg.append_block(led, [lg.digest_tx(sm.payload_digest, 1, 0, 0), lg.attestation_tx(rogue, 0, 0, [sm.payload_digest])])
    assert ctl.two_step_verify(sm, led, store) == (False, "unregistered-cluster-key", 1)


def test_verify_without_attestation():
    store = lg.ContentStore()
    led = lg.Ledger("cluster")
    sm = lg.sign_message(b"p", 1, 0, 0, lg.generate_keypair(1, "vehicle", 1), store)
    lg.append_block(led, [lg.digest_tx(sm.payload_digest, 1, 0, 0)])
    assert ctl.two_step_verify(sm, led, store) == (False, "no-cluster-signature", 1)


@given(st.binary(min_size=1, max_size=40), st.binary(min_size=1, max_size=40))
def test_mismatched_payload_never_accepted(original, replacement):
    sm, led, store = _committed(original)
    store.blobs[sm.content_id] = replacement
    v = ctl.two_step_verify(sm, led, store, cache={})
    assert v.accepted == (hashlib.sha256(replacement).digest() == sm.payload_digest)


def test_zero_load_floor():
    a = ctl.allocate_resources([0], NfvPolicy(), base_t_n=0.1)
    assert a.capacity_units == 1 and a.t_n_effective == 0.1


def test_hundred_messages_need_13_units():
    a = ctl.allocate_resources([100], NfvPolicy(max_capacity=64), base_t_n=0.1)
    assert a.capacity_units == 13
    assert a.t_n_effective == 0.1


def test_capacity_capped_and_delay_scales():
    a = ctl.allocate_resources([100], NfvPolicy(max_capacity=2), base_t_n=0.1)
    assert a.capacity_units == 2
    assert a.t_n_effective == pytest.approx(0.1 * 100 / 20)


def test_static_policy():
    a = ctl.allocate_resources([100, 100], NfvPolicy(realloc=False, static_capacity=3), base_t_n=0.2)
    assert a.capacity_units == 3


@given(st.lists(st.integers(0, 500), min_size=1, max_size=20), st.integers(1, 50))
def test_allocation_bounds(history, max_cap):
    policy = NfvPolicy(max_capacity=max_cap)
    a = ctl.allocate_resources(history, policy, base_t_n=0.1)
    assert 1 <= a.capacity_units <= max_cap
    assert a.t_n_effective >= 0.1


def test_allocation_requires_history():
    with pytest.raises(ValueError):
        ctl.allocate_resources([], NfvPolicy())


def test_decision_record_is_json():
    import json
    rec = json.loads(ctl.decision_record(3, 17, FORWARD_TO_CLOUD, "accepted", 0.05, 0.1))
    assert rec == {"round": 3, "message": 17, "action": FORWARD_TO_CLOUD, "verify": "accepted",
                   "t_s": 0.05, "t_n_effective": 0.1}
    assert FORWARD_TO_CLUSTER in ctl.ACTIONS
