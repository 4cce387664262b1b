from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, strategies as st

from jamalert import identity, protocol, wire
from jamalert.geometry import NeighborEntry, Rect
from jamalert.protocol import (
    CongestionAlert,
    ExitSignal,
    Reason,
    RidStateS1,
    RidStateS2,
    Routestate,
    RsuUnit,
    VehicleProtocol,
    VehicleType,
    VeStateS1,
    VeStateS2,
    decode_message,
    encode_message,
)
from tests.conftest import make_vehicle_identity


SAMPLE_MESSAGES = [
    RidStateS1("R1", "mrsu:R1", (NeighborEntry("R0", 1, 348.0, 12.0, 1),)),
    RidStateS1("R1", "mrsu:R1", ()),
    RidStateS2("R2", "mrsu:R2", Rect(0.0, -7.0, 400.0, 7.0)),
    VeStateS1("R1", 1, 123.5, 2.25, Routestate.ONROAD, VehicleType.NORMAL),
    VeStateS2("R2", (10.0, -3.5), 0.0, Routestate.PARKING, VehicleType.EMERGENCY_ACTIVE),
    ExitSignal("R1", b"\x01" * 32),
    CongestionAlert("mrsu:R1", "R1", 1, 207.5, 6, False, 3, ((1.0, 2.0),)),
]


@pytest.mark.parametrize("msg", SAMPLE_MESSAGES, ids=lambda m: type(m).__name__)
def test_message_round_trip(msg):
    assert decode_message(encode_message(msg)) == msg


def test_message_encoding_stable():
    for msg in SAMPLE_MESSAGES:
        assert encode_message(msg) == encode_message(msg)


def test_unknown_message_type_rejected():
    with pytest.raises(wire.MalformedBytes):
        decode_message(b"\xfe\x00\x00")


def test_truncated_message_rejected():
    data = encode_message(SAMPLE_MESSAGES[0])
    with pytest.raises(wire.MalformedBytes):
        decode_message(data[:-3])


def test_trailing_garbage_rejected():
    data = encode_message(SAMPLE_MESSAGES[3])
    with pytest.raises(wire.MalformedBytes):
        decode_message(data + b"\x00")


@given(
    st.text(max_size=30),
    st.integers(min_value=0, max_value=9),
    st.floats(allow_nan=False, allow_infinity=False),
    st.floats(min_value=0.0, max_value=100.0),
)
def test_ve_state_s1_round_trip(rid, lid, dist, speed):
    msg = VeStateS1(rid, lid, dist, speed, Routestate.ONROAD, VehicleType.PUBLIC_TRANSPORT)
    assert decode_message(encode_message(msg)) == msg


# --- fixtures for protocol machines --------------------------------------------


def make_infra(ca, clock, unit_id="rsu:R1:a"):
    hsm = identity.Hsm(clock, random.Random(777))
    cred = ca.register(unit_id, hsm)
    return hsm, cred


def make_proto(ca, anchors, clock, vid="v1", variant="s1", vtype=VehicleType.NORMAL):
    hsm, cred, pool = make_vehicle_identity(ca, clock, vid=vid, n_pseudonyms=6)
    return VehicleProtocol(vid, hsm, anchors, pool, variant=variant, vtype=vtype)


def rid_broadcast(infra, clock, msg):
    hsm, cred = infra
    return hsm.sign(cred.key_ref, encode_message(msg))


S1_MSG = RidStateS1("R1", "mrsu:R1", (NeighborEntry("R0", 1, 348.0, 12.0, 1),))


def test_fresh_spawn_accepts_with_spawn_lane(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock)
    infra = make_infra(ca, clock)
    proto.spawn_lid = 2
    out = proto.handle_rid_state(rid_broadcast(infra, clock, S1_MSG), clock.t)
    assert out.accepted
    assert proto.routestate is Routestate.ONROAD
    assert proto.rid == "R1"
    assert proto.mrsu_addr == "mrsu:R1"
    assert proto.lid_estimate == 2
    assert proto.dist == 0.0
    assert proto.active is not None


def test_broadcast_ignored_while_onroad(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock)
    infra = make_infra(ca, clock)
    assert proto.handle_rid_state(rid_broadcast(infra, clock, S1_MSG), clock.t).accepted
    out = proto.handle_rid_state(rid_broadcast(infra, clock, S1_MSG), clock.t)
    assert not out.accepted
    assert out.reason is Reason.INCONSISTENT


def test_acceptance_rotates_pseudonyms(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock)
    infra = make_infra(ca, clock)
    used = []
    for leg in range(3):
        clock.advance(1.0)  # distinct timestamps, distinct broadcast bytes
        out = proto.handle_rid_state(rid_broadcast(infra, clock, S1_MSG), clock.t)
        assert out.accepted, out.reason
        used.append(proto.active.certificate.subject_key)
        proto.update_motion(10.0, 0.0, 0.5)
        proto.exit_segment()
        # Give the post-exit path a chord matching the table row for (R0, 1):
        # exits land the vehicle back on the feeder, heading east.
        proto.path.origin_ref = ("R0", 1)
        proto.update_motion(10.0, 0.0, 0.5)
    assert len(set(used)) == 3


def test_arrival_classification_sets_lane(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock)
    infra = make_infra(ca, clock)
    proto.path.origin_ref = ("R0", 1)
    proto.update_motion(10.0, 0.0, 0.5)  # heading 0 chord, matches to_lid 1
    out = proto.handle_rid_state(rid_broadcast(infra, clock, S1_MSG), clock.t)
    assert out.accepted
    assert proto.lid_estimate == 1


def test_arrival_with_unknown_feeder_rejected(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock)
    infra = make_infra(ca, clock)
    proto.path.origin_ref = ("RZ", 4)
    proto.update_motion(10.0, 0.0, 0.5)
    out = proto.handle_rid_state(rid_broadcast(infra, clock, S1_MSG), clock.t)
    assert not out.accepted
    assert out.reason is Reason.INCONSISTENT


def test_arrival_without_motion_rejected(ca, anchors, clock):
    """A broadcast that lands before any post-exit movement stays unanswered."""
    proto = make_proto(ca, anchors, clock)
    infra = make_infra(ca, clock)
    proto.path.origin_ref = ("R0", 1)
    out = proto.handle_rid_state(rid_broadcast(infra, clock, S1_MSG), clock.t)
    assert not out.accepted
    assert proto.routestate is Routestate.IDLE
    # After one step of motion the same message goes through.
    proto.update_motion(10.0, 0.0, 0.5)
    clock.advance(1.0)
    assert proto.handle_rid_state(rid_broadcast(infra, clock, S1_MSG), clock.t).accepted


def test_arrival_angle_miss_rejected_and_counted(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock)
    infra = make_infra(ca, clock)
    proto.path.origin_ref = ("R0", 1)
    # Drive north: no interval in the table covers a 90 degree chord.
    proto.path.heading_deg = 90.0
    proto.update_motion(10.0, 0.0, 0.5)
    out = proto.handle_rid_state(rid_broadcast(infra, clock, S1_MSG), clock.t)
    assert not out.accepted
    assert out.reason is Reason.INCONSISTENT
    assert proto.unclassified_arrivals == 1


def test_s2_rect_gate(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock, variant="s2")
    infra = make_infra(ca, clock)
    msg = RidStateS2("R2", "mrsu:R2", Rect(0.0, -7.0, 400.0, 7.0))
    proto.pos = (500.0, 0.0)
    out = proto.handle_rid_state(rid_broadcast(infra, clock, msg), clock.t)
    assert not out.accepted and out.reason is Reason.INCONSISTENT
    proto.pos = (120.0, -3.0)
    assert proto.handle_rid_state(rid_broadcast(infra, clock, msg), clock.t).accepted


def test_s1_vehicle_rejects_s2_broadcast(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock, variant="s1")
    infra = make_infra(ca, clock)
    msg = RidStateS2("R2", "mrsu:R2", Rect(0.0, -7.0, 400.0, 7.0))
    out = proto.handle_rid_state(rid_broadcast(infra, clock, msg), clock.t)
    assert not out.accepted and out.reason is Reason.MALFORMED


def test_duplicate_broadcast_rejected(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock)
    infra = make_infra(ca, clock)
    env = rid_broadcast(infra, clock, S1_MSG)
    assert proto.handle_rid_state(env, clock.t).accepted
    proto.exit_segment()
    proto.path.origin_ref = None  # back to the fresh-spawn behaviour
    out = proto.handle_rid_state(env, clock.t)
    assert not out.accepted
    assert out.reason is Reason.DUPLICATE


def test_stale_broadcast_rejected(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock)
    infra = make_infra(ca, clock)
    env = rid_broadcast(infra, clock, S1_MSG)
    out = proto.handle_rid_state(env, clock.t + 6.0)
    assert not out.accepted
    assert out.reason is Reason.STALE


# --- status cadence -------------------------------------------------------------


def accept(proto, ca, anchors, clock, infra=None):
    infra = infra or make_infra(ca, clock)
    out = proto.handle_rid_state(rid_broadcast(infra, clock, S1_MSG), clock.t)
    assert out.accepted, out.reason
    return infra


def test_status_cadence_five_messages_in_ten_seconds(ca, anchors, clock):
    """Acceptance at t0, then one report each status period: five inside
    (t0, t0 + 10]."""
    proto = make_proto(ca, anchors, clock)
    accept(proto, ca, anchors, clock)
    t0 = clock.t
    sent = []
    for k in range(1, 41):  # poll far more often than the cadence
        clock.t = t0 + 0.25 * k
        got = proto.status_tick(clock.t)
        if got is not None:
            env, dest = got
            assert dest == "mrsu:R1"
            sent.append(clock.t - t0)
    assert sent == [2.0, 4.0, 6.0, 8.0, 10.0]


def test_status_payload_reports_dead_reckoned_state(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock)
    accept(proto, ca, anchors, clock)
    for _ in range(4):
        proto.update_motion(10.0, 0.0, 0.5)
    clock.advance(2.0)
    env, dest = proto.status_tick(clock.t)
    msg = decode_message(env.payload)
    assert isinstance(msg, VeStateS1)
    assert msg.rid == "R1"
    assert msg.dist == pytest.approx(20.0)
    assert msg.speed == pytest.approx(10.0)
    assert msg.state is Routestate.ONROAD


def test_status_distance_clamped_to_segment(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock)
    accept(proto, ca, anchors, clock)
    for _ in range(10):
        proto.update_motion(100.0, 0.0, 0.5, dist_limit=400.0)
    assert proto.dist == 400.0


def test_status_idle_vehicle_sends_nothing(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock)
    clock.advance(10.0)
    assert proto.status_tick(clock.t) is None


def test_status_signed_by_active_pseudonym(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock)
    accept(proto, ca, anchors, clock)
    clock.advance(2.0)
    env, _ = proto.status_tick(clock.t)
    assert env.certificate.subject_key == proto.active.certificate.subject_key
    assert anchors.verify(env, clock.t)


def test_parking_sends_exactly_three(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock)
    accept(proto, ca, anchors, clock)
    proto.park()
    sent = []
    t0 = clock.t
    for k in range(1, 30):
        clock.t = t0 + k
        got = proto.status_tick(clock.t)
        if got:
            sent.append(clock.t)
            msg = decode_message(got[0].payload)
            assert msg.state is Routestate.PARKING
    assert len(sent) == protocol.PARKING_MESSAGE_COUNT
    # Resume revives the normal cadence.
    proto.resume()
    clock.advance(5.0)
    assert proto.status_tick(clock.t) is not None


def test_exit_resets_route_context(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock)
    proto.spawn_lid = 1
    accept(proto, ca, anchors, clock)
    proto.update_motion(10.0, 0.0, 0.5)
    proto.exit_segment()
    assert proto.routestate is Routestate.IDLE
    assert proto.rid is None and proto.mrsu_addr is None
    assert proto.path.origin_ref == ("R1", 1)
    clock.advance(5.0)
    assert proto.status_tick(clock.t) is None


def test_illegal_transitions_assert(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock)
    with pytest.raises(AssertionError):
        proto.park()  # cannot park from IDLE
    accept(proto, ca, anchors, clock)
    proto.park()
    with pytest.raises(AssertionError):
        proto.park()


def test_turn_is_recorded_in_path(ca, anchors, clock):
    proto = make_proto(ca, anchors, clock)
    accept(proto, ca, anchors, clock)
    proto.update_motion(10.0, 0.0, 0.5)
    proto.apply_turn(90.0, 10.0)
    assert proto.heading_deg == pytest.approx(90.0)
    proto.update_motion(10.0, 0.0, 0.5)
    assert proto.path.heading_deg == pytest.approx(90.0)


# --- roadside unit ----------------------------------------------------------------


def test_rsu_ungated_broadcast_always_fires(ca, anchors, clock):
    hsm, cred = make_infra(ca, clock, unit_id="rsu:R9:a")
    rsu = RsuUnit("rsu:R9:a", "R9", hsm, cred.key_ref, S1_MSG)
    env = rsu.broadcast_tick(5.0)
    assert env is not None
    assert decode_message(env.payload) == S1_MSG


def test_rsu_gated_broadcast_window(ca, anchors, clock):
    hsm, cred = make_infra(ca, clock, unit_id="rsu:R9:b")
    rsu = RsuUnit("rsu:R9:b", "R9", hsm, cred.key_ref, S1_MSG, gated=True, dt_br_s=5.0)
    assert rsu.broadcast_tick(1.0) is None  # nothing detected yet
    rsu.note_arrival(10.0)
    clock.t = 10.0
    assert rsu.broadcast_tick(10.0) is not None
    clock.t = 15.0
    assert rsu.broadcast_tick(15.0) is not None  # inclusive end of window
    assert rsu.broadcast_tick(15.1) is None
    rsu.note_arrival(20.0)
    clock.t = 20.0
    assert rsu.broadcast_tick(20.0) is not None


def test_rsu_exit_signal_names_pseudonym(ca, anchors, clock):
    hsm, cred = make_infra(ca, clock, unit_id="rsu:R9:c")
    rsu = RsuUnit("rsu:R9:c", "R9", hsm, cred.key_ref, S1_MSG)
    key = b"\x42" * 32
    env = rsu.exit_detect(key)
    msg = decode_message(env.payload)
    assert isinstance(msg, ExitSignal)
    assert msg.rid == "R9"
    assert msg.pseudonym_key == key
    assert anchors.verify(env, clock.t)
