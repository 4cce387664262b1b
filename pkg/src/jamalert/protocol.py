"""Message formats and the vehicle / roadside-unit state machines.

Wire layout (see wire.py for primitive encodings; everything big-endian):

    byte 0        message type
    1 = segment broadcast, dead-reckoning variant:
        rid str, mrsu_addr str, arrival table list of
        (from_rid str, from_lid u16, angle_lo f64, angle_hi f64, to_lid u16)
    2 = segment broadcast, positioning variant:
        rid str, mrsu_addr str, extent rect (4 x f64: x_min y_min x_max y_max)
    3 = vehicle status, dead-reckoning variant:
        rid str, lid_estimate u16, dist f64, speed f64, state u8, vtype u8
    4 = vehicle status, positioning variant:
        rid str, pos (2 x f64), speed f64, state u8, vtype u8
    5 = exit signal: rid str, pseudonym public key blob
    6 = congestion alert:
        mrsu_id str, rid str, lane u16 (0 = unresolved), center f64,
        vehicle_count u16, includes_emergency u8, seq u32,
        positions list of (2 x f64)

The sending timestamp is not part of the payload; it lives in the signed
envelope (signature covers payload || timestamp).

State machine: a vehicle is idle, onroad, or parking. Only these transitions
exist: idle -> onroad (broadcast accepted), onroad -> idle (segment exit),
onroad -> parking, parking -> onroad. Anything else is a programming error and
asserts.

Broadcast handling checks consistency against the vehicle's own path record
before any cryptography: a broadcast whose arrival table does not know the
vehicle's origin cannot belong to the segment the vehicle just entered.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

from . import geometry, identity, wire
from .geometry import NeighborEntry, PathRecord, Rect
from .identity import Hsm, Pseudonym, ReplayGuard, SignedEnvelope, TrustAnchors

DEFAULT_DT_VE_S = 2.0
DEFAULT_P_BR_S = 1.0
DEFAULT_DT_BR_S = 5.0
PARKING_MESSAGE_COUNT = 3

Point = Tuple[float, float]


class Routestate(enum.Enum):
    IDLE = 0
    ONROAD = 1
    PARKING = 2


class VehicleType(enum.Enum):
    NORMAL = 0
    EMERGENCY_ACTIVE = 1
    PUBLIC_TRANSPORT = 2


class Reason(enum.Enum):
    """Why a message was ignored or dropped; keys in the failure metrics."""

    INCONSISTENT = "inconsistent"
    MALFORMED = "malformed"
    CERT = "cert"
    SIGNATURE = "signature"
    STALE = "stale"
    DUPLICATE = "duplicate"
    WRONG_ADDRESSEE = "wrong_addressee"
    WRONG_SEGMENT = "wrong_segment"


# --- message dataclasses ----------------------------------------------------

MSG_RID_STATE_S1 = 1
MSG_RID_STATE_S2 = 2
MSG_VE_STATE_S1 = 3
MSG_VE_STATE_S2 = 4
MSG_EXIT_SIGNAL = 5
MSG_ALERT = 6


@dataclass(frozen=True)
class RidStateS1:
    rid: str
    mrsu_addr: str
    entries: Tuple[NeighborEntry, ...]


@dataclass(frozen=True)
class RidStateS2:
    rid: str
    mrsu_addr: str
    rpos: Rect


@dataclass(frozen=True)
class VeStateS1:
    rid: str
    lid_estimate: int
    dist: float
    speed: float
    state: Routestate
    vtype: VehicleType


@dataclass(frozen=True)
class VeStateS2:
    rid: str
    pos: Point
    speed: float
    state: Routestate
    vtype: VehicleType


@dataclass(frozen=True)
class ExitSignal:
    rid: str
    pseudonym_key: bytes


@dataclass(frozen=True)
class CongestionAlert:
    mrsu_id: str
    rid: str
    lane: int  # 0 when the positioning variant leaves resolution to the LBS
    center: float
    vehicle_count: int
    includes_emergency: bool
    seq: int
    positions: Tuple[Point, ...] = ()

    @property
    def alert_id(self) -> str:
        return f"{self.mrsu_id}/{self.seq}"


Message = Union[RidStateS1, RidStateS2, VeStateS1, VeStateS2, ExitSignal, CongestionAlert]


def encode_message(msg: Message) -> bytes:
    w = wire.Writer()
    if isinstance(msg, RidStateS1):
        w.u8(MSG_RID_STATE_S1).text(msg.rid).text(msg.mrsu_addr).u16(len(msg.entries))
        for e in msg.entries:
            w.text(e.from_rid).u16(e.from_lid).f64(e.angle_lo).f64(e.angle_hi).u16(e.to_lid)
    elif isinstance(msg, RidStateS2):
        w.u8(MSG_RID_STATE_S2).text(msg.rid).text(msg.mrsu_addr)
        r = msg.rpos
        w.f64(r.x_min).f64(r.y_min).f64(r.x_max).f64(r.y_max)
    elif isinstance(msg, VeStateS1):
        w.u8(MSG_VE_STATE_S1).text(msg.rid).u16(msg.lid_estimate)
        w.f64(msg.dist).f64(msg.speed).u8(msg.state.value).u8(msg.vtype.value)
    elif isinstance(msg, VeStateS2):
        w.u8(MSG_VE_STATE_S2).text(msg.rid)
        wire.pack_point(w, msg.pos)
        w.f64(msg.speed).u8(msg.state.value).u8(msg.vtype.value)
    elif isinstance(msg, ExitSignal):
        w.u8(MSG_EXIT_SIGNAL).text(msg.rid).blob(msg.pseudonym_key)
    elif isinstance(msg, CongestionAlert):
        w.u8(MSG_ALERT).text(msg.mrsu_id).text(msg.rid).u16(msg.lane).f64(msg.center)
        w.u16(msg.vehicle_count).u8(1 if msg.includes_emergency else 0).u32(msg.seq)
        w.u16(len(msg.positions))
        for p in msg.positions:
            wire.pack_point(w, p)
    else:
        raise TypeError(f"not a wire message: {type(msg)!r}")
    return w.done()


def decode_message(data: bytes) -> Message:
    r = wire.Reader(data)
    kind = r.u8()
    msg: Message
    if kind == MSG_RID_STATE_S1:
        rid, addr = r.text(), r.text()
        entries = tuple(
            NeighborEntry(r.text(), r.u16(), r.f64(), r.f64(), r.u16()) for _ in range(r.u16())
        )
        msg = RidStateS1(rid, addr, entries)
    elif kind == MSG_RID_STATE_S2:
        rid, addr = r.text(), r.text()
        msg = RidStateS2(rid, addr, Rect(r.f64(), r.f64(), r.f64(), r.f64()))
    elif kind == MSG_VE_STATE_S1:
        msg = VeStateS1(
            r.text(), r.u16(), r.f64(), r.f64(), Routestate(r.u8()), VehicleType(r.u8())
        )
    elif kind == MSG_VE_STATE_S2:
        msg = VeStateS2(
            r.text(), wire.unpack_point(r), r.f64(), Routestate(r.u8()), VehicleType(r.u8())
        )
    elif kind == MSG_EXIT_SIGNAL:
        msg = ExitSignal(r.text(), r.blob())
    elif kind == MSG_ALERT:
        mrsu, rid = r.text(), r.text()
        lane, center = r.u16(), r.f64()
        count, emg, seq = r.u16(), r.u8(), r.u32()
        positions = tuple(wire.unpack_point(r) for _ in range(r.u16()))
        msg = CongestionAlert(mrsu, rid, lane, center, count, emg == 1, seq, positions)
    else:
        raise wire.MalformedBytes(f"unknown message type {kind}")
    r.expect_end()
    return msg


# --- vehicle state machine ---------------------------------------------------

_ALLOWED_TRANSITIONS = {
    (Routestate.IDLE, Routestate.ONROAD),
    (Routestate.ONROAD, Routestate.IDLE),
    (Routestate.ONROAD, Routestate.PARKING),
    (Routestate.PARKING, Routestate.ONROAD),
}


@dataclass
class RidStateOutcome:
    accepted: bool
    reason: Optional[Reason] = None


class VehicleProtocol:
    """Protocol half of a vehicle: routestate, pseudonyms, status cadence."""

    def __init__(
        self,
        vid: str,
        hsm: Hsm,
        anchors: TrustAnchors,
        pool: List[Pseudonym],
        variant: str = "s1",
        vtype: VehicleType = VehicleType.NORMAL,
        dt_ve_s: float = DEFAULT_DT_VE_S,
        path_gain: float = 1.0,
    ):
        assert variant in ("s1", "s2")
        self.vid = vid
        self.hsm = hsm
        self.anchors = anchors
        self.pool = pool
        self.variant = variant
        self.vtype = vtype
        self.dt_ve_s = dt_ve_s
        self.routestate = Routestate.IDLE
        self.rid: Optional[str] = None
        self.lid_estimate: int = 0
        self.dist = 0.0
        self.speed = 0.0
        self.pos: Point = (0.0, 0.0)
        self.heading_deg = 0.0
        self.path = PathRecord(origin_ref=None, heading_deg=0.0, gain=path_gain)
        self.mrsu_addr: Optional[str] = None
        self.active: Optional[Pseudonym] = None
        self.last_send: float = float("-inf")
        self.parking_sends = 0
        self.guard = ReplayGuard(anchors.freshness_window_s)
        self.spawn_lid: Optional[int] = None  # lane the vehicle pulled onto, first segment only
        self.unclassified_arrivals = 0
        self._gain = path_gain

    def _set_state(self, new: Routestate) -> None:
        assert (self.routestate, new) in _ALLOWED_TRANSITIONS, (
            f"{self.vid}: illegal transition {self.routestate} -> {new}"
        )
        self.routestate = new

    # -- broadcast handling --

    def _consistent_s1(self, msg: RidStateS1) -> Tuple[bool, int]:
        """Returns (consistent, lid_estimate)."""
        if self.path.origin_ref is None:
            # Fresh spawn: no prior path to classify, the vehicle just pulled on.
            return True, self.spawn_lid if self.spawn_lid is not None else 0
        origin = self.path.origin_ref
        rows = [e for e in msg.entries if (e.from_rid, e.from_lid) == origin]
        if not rows:
            return False, 0
        try:
            lid = geometry.classify_arrival(self.path, rows)
        except geometry.DegeneratePath:
            # No baseline motion since the last exit, so there is no chord to
            # classify. Treat the broadcast as premature; the next one comes
            # within a second and the vehicle will have moved by then.
            return False, 0
        if lid is None:
            # Connectivity matches but the chord angle fits no interval. This
            # happens when a corner unit for a segment the vehicle did NOT
            # enter still reaches it; joining that segment would poison its
            # congestion state, so refuse and count the miss.
            self.unclassified_arrivals += 1
            return False, 0
        return True, lid

    def handle_rid_state(self, envelope: SignedEnvelope, now: float) -> RidStateOutcome:
        """Process one segment broadcast. Consistency comes before crypto."""
        if self.routestate is not Routestate.IDLE:
            return RidStateOutcome(False, Reason.INCONSISTENT)
        try:
            msg = decode_message(envelope.payload)
        except wire.MalformedBytes:
            return RidStateOutcome(False, Reason.MALFORMED)
        if self.variant == "s1":
            if not isinstance(msg, RidStateS1):
                return RidStateOutcome(False, Reason.MALFORMED)
            ok, lid = self._consistent_s1(msg)
            if not ok:
                return RidStateOutcome(False, Reason.INCONSISTENT)
        else:
            if not isinstance(msg, RidStateS2):
                return RidStateOutcome(False, Reason.MALFORMED)
            if not msg.rpos.contains(self.pos):
                return RidStateOutcome(False, Reason.INCONSISTENT)
            lid = 0
        try:
            self.anchors.verify(envelope, now)
        except identity.CertError:
            return RidStateOutcome(False, Reason.CERT)
        except identity.SignatureError:
            return RidStateOutcome(False, Reason.SIGNATURE)
        except identity.StaleTimestamp:
            return RidStateOutcome(False, Reason.STALE)
        if self.guard.seen(envelope, now):
            return RidStateOutcome(False, Reason.DUPLICATE)
        self.guard.remember(envelope, now)

        self._set_state(Routestate.ONROAD)
        self.rid = msg.rid
        self.mrsu_addr = msg.mrsu_addr
        self.lid_estimate = lid
        self.dist = 0.0
        self.path = PathRecord(
            origin_ref=(msg.rid, lid), heading_deg=self.heading_deg, gain=self._gain
        )
        self.active = identity.rotate_pseudonym(self.pool)
        self.last_send = now
        self.parking_sends = 0
        return RidStateOutcome(True)

    # -- status emission --

    def status_tick(self, now: float) -> Optional[Tuple[SignedEnvelope, str]]:
        """Emit the periodic status envelope when the cadence timer fires.

        Returns (envelope, destination address) or None. Parking vehicles send
        at most PARKING_MESSAGE_COUNT times, then go quiet.
        """
        if self.routestate is Routestate.IDLE or self.active is None:
            return None
        if now - self.last_send < self.dt_ve_s:
            return None
        if self.routestate is Routestate.PARKING:
            if self.parking_sends >= PARKING_MESSAGE_COUNT:
                return None
            self.parking_sends += 1
        assert self.rid is not None and self.mrsu_addr is not None
        msg: Message
        if self.variant == "s1":
            msg = VeStateS1(
                self.rid, self.lid_estimate, self.dist, self.speed, self.routestate, self.vtype
            )
        else:
            msg = VeStateS2(self.rid, self.pos, self.speed, self.routestate, self.vtype)
        self.last_send = now
        return self.hsm.sign(self.active.key_ref, encode_message(msg)), self.mrsu_addr

    # -- motion bookkeeping --

    def update_motion(
        self,
        speed: float,
        wheel_angle_deg: float,
        dt: float,
        dist_limit: Optional[float] = None,
    ) -> None:
        """Integrate odometry and the dead-reckoned path for one step."""
        self.speed = speed
        geometry.record_path_step(self.path, wheel_angle_deg, speed, dt)
        self.heading_deg = self.path.heading_deg
        if self.routestate is Routestate.ONROAD:
            self.dist += speed * dt
            if dist_limit is not None:
                self.dist = min(self.dist, dist_limit)

    def apply_turn(self, new_heading_deg: float, speed: float, dt: float = 0.5) -> None:
        """Record an intersection turn as one path step onto the new heading."""
        delta = geometry.signed_angle(new_heading_deg - self.path.heading_deg)
        wheel = delta / (self._gain * dt)
        geometry.record_path_step(self.path, wheel, speed, dt)
        self.heading_deg = self.path.heading_deg

    def exit_segment(self) -> None:
        """Leave the current segment; path restarts from the boundary."""
        assert self.rid is not None
        origin = (self.rid, self.lid_estimate)
        self._set_state(Routestate.IDLE)
        self.path = PathRecord(origin_ref=origin, heading_deg=self.heading_deg, gain=self._gain)
        self.rid = None
        self.mrsu_addr = None

    def park(self) -> None:
        self._set_state(Routestate.PARKING)
        self.parking_sends = 0
        self.last_send = float("-inf")  # first parking notice goes out promptly

    def resume(self) -> None:
        self._set_state(Routestate.ONROAD)


def vehicle_handle_rid_state(
    vehicle: VehicleProtocol, envelope: SignedEnvelope, now: float
) -> RidStateOutcome:
    return vehicle.handle_rid_state(envelope, now)


def vehicle_status_tick(vehicle: VehicleProtocol, now: float):
    return vehicle.status_tick(now)


def vehicle_update_motion(
    vehicle: VehicleProtocol,
    speed: float,
    wheel_angle_deg: float,
    dt: float,
    dist_limit: Optional[float] = None,
) -> None:
    vehicle.update_motion(speed, wheel_angle_deg, dt, dist_limit)


# --- roadside unit ------------------------------------------------------------


class RsuUnit:
    """End-of-segment unit: broadcasts the segment description, signals exits."""

    def __init__(
        self,
        rsu_id: str,
        rid: str,
        hsm: Hsm,
        key_ref: str,
        broadcast_payload: Message,
        gated: bool = False,
        dt_br_s: float = DEFAULT_DT_BR_S,
    ):
        self.rsu_id = rsu_id
        self.rid = rid
        self.hsm = hsm
        self.key_ref = key_ref
        self.payload = encode_message(broadcast_payload)
        self.gated = gated
        self.dt_br_s = dt_br_s
        self.last_detection: Optional[float] = None

    def note_arrival(self, now: float) -> None:
        self.last_detection = now

    def broadcast_tick(self, now: float) -> Optional[SignedEnvelope]:
        """Sign and return the broadcast, unless gating suppresses it."""
        if self.gated:
            if self.last_detection is None or not (
                self.last_detection <= now <= self.last_detection + self.dt_br_s
            ):
                return None
        return self.hsm.sign(self.key_ref, self.payload)

    def exit_detect(self, pseudonym_key: bytes) -> SignedEnvelope:
        """A vehicle just crossed this end: emit the signed exit notice."""
        return self.hsm.sign(self.key_ref, encode_message(ExitSignal(self.rid, pseudonym_key)))


def rsu_broadcast_tick(rsu: RsuUnit, now: float) -> Optional[SignedEnvelope]:
    return rsu.broadcast_tick(now)


def rsu_exit_detect(rsu: RsuUnit, pseudonym_key: bytes) -> SignedEnvelope:
    return rsu.exit_detect(pseudonym_key)
