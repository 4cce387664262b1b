"""Mid-segment unit: status cache and congestion detection.

A record per pseudonym, a bounded ring of samples per record. The detector
asks: is there a lane and a point such that at least n_min distinct pseudonyms
(a) currently estimate that lane, (b) kept every sample of the last window_s
seconds within radius_m of the point, (c) stayed below speed_threshold_mps for
the whole window, and (d) reported at least once inside the window? Candidate
points are the records' latest values; the reported center is the mean of the
qualifying records' latest values.

The positioning variant projects positions onto the segment axis and runs the
same predicate on the projected scalar, carrying the raw positions in the
alert so the base station can resolve the lane.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Sequence, Set, Tuple

from . import identity, wire
from .identity import Hsm, ReplayGuard, SignedEnvelope, TrustAnchors
from .protocol import (
    CongestionAlert,
    ExitSignal,
    Reason,
    Routestate,
    VehicleType,
    VeStateS1,
    VeStateS2,
    decode_message,
    encode_message,
)

RING_SIZE = 256

Point = Tuple[float, float]


@dataclass
class DetectionParams:
    n_min: int = 5
    window_s: float = 60.0
    radius_m: float = 50.0
    speed_threshold_mps: float = 2.8
    holddown_s: float = 30.0


@dataclass
class Sample:
    ts: float
    value: float  # dist, or position projected onto the segment axis
    speed: float
    vtype: VehicleType
    pos: Optional[Point] = None


@dataclass
class VehicleRecord:
    key: bytes
    lane: int
    samples: Deque[Sample] = field(default_factory=lambda: deque(maxlen=RING_SIZE))


@dataclass
class Finding:
    lane: int
    center: float
    members: Tuple[bytes, ...]  # pseudonym keys, sorted
    includes_emergency: bool
    positions: Tuple[Point, ...] = ()


@dataclass
class IngestResult:
    accepted: bool
    reason: Optional[Reason] = None


def _prune(record: VehicleRecord, now: float, window_s: float) -> None:
    cutoff = now - window_s
    while record.samples and record.samples[0].ts < cutoff:
        record.samples.popleft()


def _window_stats(record: VehicleRecord) -> Tuple[float, float, float]:
    lo = min(s.value for s in record.samples)
    hi = max(s.value for s in record.samples)
    fastest = max(s.speed for s in record.samples)
    return lo, hi, fastest


def _check(
    records: Dict[bytes, VehicleRecord],
    params: DetectionParams,
    now: float,
    exclude_lanes: Optional[Set[int]] = None,
) -> Optional[Finding]:
    exclude = exclude_lanes or set()
    live: List[Tuple[VehicleRecord, float, float, float]] = []
    for key in sorted(records):
        rec = records[key]
        _prune(rec, now, params.window_s)
        if not rec.samples:
            continue
        lo, hi, fastest = _window_stats(rec)
        live.append((rec, lo, hi, fastest))
    lanes = sorted({rec.lane for rec, *_ in live if rec.lane not in exclude})
    for lane in lanes:
        group = [item for item in live if item[0].lane == lane]
        if sum(1 for _, _, _, fastest in group if fastest < params.speed_threshold_mps) < params.n_min:
            continue
        candidates = sorted({rec.samples[-1].value for rec, *_ in group})
        for c in candidates:
            members = [
                rec
                for rec, lo, hi, fastest in group
                if fastest < params.speed_threshold_mps
                and lo >= c - params.radius_m
                and hi <= c + params.radius_m
            ]
            if len(members) < params.n_min:
                continue
            members.sort(key=lambda r: r.key)
            center = sum(r.samples[-1].value for r in members) / len(members)
            emergency = any(r.samples[-1].vtype is VehicleType.EMERGENCY_ACTIVE for r in members)
            positions = tuple(
                r.samples[-1].pos for r in members if r.samples[-1].pos is not None
            )
            return Finding(lane, center, tuple(r.key for r in members), emergency, positions)
    return None


def check_anomaly_s1(
    records: Dict[bytes, VehicleRecord],
    params: DetectionParams,
    now: float,
    exclude_lanes: Optional[Set[int]] = None,
) -> Optional[Finding]:
    """Detector for dead-reckoning records (values are travelled distances)."""
    return _check(records, params, now, exclude_lanes)


def check_anomaly_s2(
    records: Dict[bytes, VehicleRecord],
    params: DetectionParams,
    now: float,
    exclude_lanes: Optional[Set[int]] = None,
) -> Optional[Finding]:
    """Detector for positioning records (values are axis projections).

    Identical predicate; lane grouping degenerates to the single unresolved
    lane 0 because these records carry no lane estimate.
    """
    return _check(records, params, now, exclude_lanes)


class MainRsu:
    """The mid-segment unit: ingest, purge, periodic detection, alerts."""

    def __init__(
        self,
        mrsu_id: str,
        rid: str,
        hsm: Hsm,
        key_ref: str,
        anchors: TrustAnchors,
        params: DetectionParams,
        variant: str = "s1",
        axis_origin: Point = (0.0, 0.0),
        axis_unit: Point = (1.0, 0.0),
        exit_signer_keys: Sequence[bytes] = (),
        verify_budget_per_s: Optional[int] = None,
    ):
        self.mrsu_id = mrsu_id
        self.rid = rid
        self.hsm = hsm
        self.key_ref = key_ref
        self.anchors = anchors
        self.params = params
        self.variant = variant
        self.axis_origin = axis_origin
        self.axis_unit = axis_unit
        self.exit_signer_keys = set(exit_signer_keys)
        self.verify_budget_per_s = verify_budget_per_s
        self.records: Dict[bytes, VehicleRecord] = {}
        self.guard = ReplayGuard(anchors.freshness_window_s)
        self.holddown: Dict[int, float] = {}
        self.seq = 0
        self.drops: Dict[str, int] = {}
        self.accepted_count = 0
        self.unknown_exit_signals = 0
        self._budget_used: Dict[int, int] = {}

    # -- budget --

    def budget_available(self, now: float) -> bool:
        if self.verify_budget_per_s is None:
            return True
        return self._budget_used.get(int(now), 0) < self.verify_budget_per_s

    def consume_budget(self, now: float) -> None:
        if self.verify_budget_per_s is None:
            return
        second = int(now)
        self._budget_used[second] = self._budget_used.get(second, 0) + 1
        if len(self._budget_used) > 8:
            self._budget_used = {s: n for s, n in self._budget_used.items() if s >= second - 2}

    # -- ingest --

    def _drop(self, reason: Reason) -> IngestResult:
        self.drops[reason.value] = self.drops.get(reason.value, 0) + 1
        return IngestResult(False, reason)

    def _project(self, pos: Point) -> float:
        dx, dy = pos[0] - self.axis_origin[0], pos[1] - self.axis_origin[1]
        return dx * self.axis_unit[0] + dy * self.axis_unit[1]

    def ingest(self, dest: str, envelope: SignedEnvelope, now: float) -> IngestResult:
        """Validate one status envelope and update the cache."""
        if dest != self.mrsu_id:
            return self._drop(Reason.WRONG_ADDRESSEE)
        self.consume_budget(now)
        try:
            msg = decode_message(envelope.payload)
        except wire.MalformedBytes:
            return self._drop(Reason.MALFORMED)
        if self.variant == "s1":
            if not isinstance(msg, VeStateS1):
                return self._drop(Reason.MALFORMED)
        elif not isinstance(msg, VeStateS2):
            return self._drop(Reason.MALFORMED)
        if msg.rid != self.rid:
            return self._drop(Reason.WRONG_SEGMENT)
        try:
            self.anchors.verify(envelope, now)
        except identity.CertError:
            return self._drop(Reason.CERT)
        except identity.SignatureError:
            return self._drop(Reason.SIGNATURE)
        except identity.StaleTimestamp:
            return self._drop(Reason.STALE)
        if self.guard.seen(envelope, now):
            return self._drop(Reason.DUPLICATE)
        self.guard.remember(envelope, now)

        key = envelope.certificate.subject_key
        if msg.state is Routestate.PARKING:
            # Parked vehicles are no congestion evidence; forget them.
            self.records.pop(key, None)
            self.accepted_count += 1
            return IngestResult(True)
        if isinstance(msg, VeStateS1):
            value, pos, lane = msg.dist, None, msg.lid_estimate
        else:
            value, pos, lane = self._project(msg.pos), msg.pos, 0
        rec = self.records.get(key)
        if rec is None:
            rec = VehicleRecord(key=key, lane=lane)
            self.records[key] = rec
        rec.lane = lane
        rec.samples.append(Sample(envelope.timestamp, value, msg.speed, msg.vtype, pos))
        self.accepted_count += 1
        return IngestResult(True)

    def purge_on_exit(self, envelope: SignedEnvelope, now: float) -> bool:
        """Drop the record named by a verified exit notice.

        Returns True when a record was removed. Unknown pseudonyms are a
        counted no-op; bad signatures raise and leave the cache untouched.
        """
        self.anchors.verify(envelope, now)
        if envelope.certificate.subject_key not in self.exit_signer_keys:
            raise identity.SignatureError("exit notice not signed by a segment end unit")
        msg = decode_message(envelope.payload)
        if not isinstance(msg, ExitSignal) or msg.rid != self.rid:
            raise wire.MalformedBytes("not an exit notice for this segment")
        if msg.pseudonym_key in self.records:
            del self.records[msg.pseudonym_key]
            return True
        self.unknown_exit_signals += 1
        return False

    # -- detection --

    def run_check(self, now: float) -> List[Tuple[CongestionAlert, SignedEnvelope]]:
        """Run the detector across lanes, honoring the per-lane holddown."""
        checker = check_anomaly_s1 if self.variant == "s1" else check_anomaly_s2
        exclude = {
            lane for lane, t in self.holddown.items() if now - t < self.params.holddown_s
        }
        out: List[Tuple[CongestionAlert, SignedEnvelope]] = []
        while True:
            finding = checker(self.records, self.params, now, exclude)
            if finding is None:
                return out
            self.holddown[finding.lane] = now
            exclude.add(finding.lane)
            self.seq += 1
            alert = CongestionAlert(
                mrsu_id=self.mrsu_id,
                rid=self.rid,
                lane=finding.lane,
                center=finding.center,
                vehicle_count=len(finding.members),
                includes_emergency=finding.includes_emergency,
                seq=self.seq,
                positions=finding.positions if self.variant == "s2" else (),
            )
            out.append((alert, self.hsm.sign(self.key_ref, encode_message(alert))))


def mrsu_ingest(mrsu: MainRsu, dest: str, envelope: SignedEnvelope, now: float) -> IngestResult:
    return mrsu.ingest(dest, envelope, now)


def purge_on_exit(mrsu: MainRsu, envelope: SignedEnvelope, now: float) -> bool:
    return mrsu.purge_on_exit(envelope, now)
