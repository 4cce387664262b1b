"""Deterministic event-driven simulation tying all the pieces together.

One World owns the clock, the event heap, and every agent. Events are ordered
by (time, insertion sequence); nothing reads wall time and the only randomness
comes from the seeded generator, so two runs with the same scenario and seed
produce identical histories byte for byte.

Movement uses a simple gap law on half-second ticks: speed is the distance to
the obstacle divided by a one-second headway, clamped to the lane limit. Walls
are red or yellow lights at the stop line and incident blockages anywhere on
the lane. The law never overshoots (the tick is shorter than the headway) and
crawling queues stay safely under the detector's speed threshold.

Radio frames carry an addressee and the medium delivers them only to it, plus
to any adversary tap; range is checked against the transmitter, and a receiver
inside an active jam region hears nothing. Infrastructure links (segment end
units to the mid-segment unit, mid-segment unit to base stations, base station
to base station) are wired and reliable.
"""

from __future__ import annotations

import heapq
import math
import random
from bisect import insort
from typing import Any, Dict, List, Optional, Tuple

from . import adversary as adversary_mod
from . import control, geometry, metrics, protocol, scenario as scenario_mod
from .control import BaseStation, IntersectionController, LightColor, SegmentView
from .detection import MainRsu
from .identity import CertificateAuthority, Hsm, TrustAnchors
from .metrics import EventRow, Recorder
from .protocol import RidStateS1, RidStateS2, Routestate, RsuUnit, VehicleProtocol
from .scenario import Scenario

CAR_LENGTH_M = 5.0
STANDSTILL_M = 2.0
HEADWAY_TAU_S = 1.0
RSU_SETBACK_M = 8.0
ADVANCE_DETECTOR_M = 120.0
QUEUE_SPEED_MPS = 0.5
ENTRY_CLEAR_M = CAR_LENGTH_M + STANDSTILL_M


class LaneRuntime:
    __slots__ = ("rid", "lid", "length", "limit", "order", "blockages", "approach", "exit_iid")

    def __init__(self, rid: str, lid: int, length: float, limit: float, exit_iid: str):
        self.rid = rid
        self.lid = lid
        self.length = length
        self.limit = limit
        self.order: List[str] = []  # vehicle ids, front of the queue first
        self.blockages: List[float] = []
        self.approach = f"{rid}.{lid}"
        self.exit_iid = exit_iid


class VehicleAgent:
    __slots__ = (
        "vid", "spec", "proto", "route", "leg", "pos", "speed", "state",
        "scheduled_spawn", "spawned_at", "exited_at", "status_gen", "pos_xy",
    )

    def __init__(self, spec: scenario_mod.VehicleSpec, spawn_time: float):
        self.vid = spec.vid
        self.spec = spec
        self.proto: Optional[VehicleProtocol] = None
        self.route = list(spec.route)
        self.leg = 0
        self.pos = 0.0
        self.speed = 0.0
        self.state = "pending"  # pending | active | parked | done
        self.scheduled_spawn = spawn_time
        self.spawned_at: Optional[float] = None
        self.exited_at: Optional[float] = None
        self.status_gen = 0
        self.pos_xy: geometry.Point = (0.0, 0.0)

    @property
    def lane_key(self) -> Tuple[str, int]:
        return self.route[self.leg]


class RsuEntry:
    __slots__ = ("unit", "pos", "end")

    def __init__(self, unit: RsuUnit, pos: geometry.Point, end: str):
        self.unit = unit
        self.pos = pos
        self.end = end


def _dist(a: geometry.Point, b: geometry.Point) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


class World:
    """A single simulation run: build from a scenario, then call run()."""

    def __init__(
        self,
        scn: Scenario,
        seed: Optional[int] = None,
        variant: Optional[str] = None,
        controller: Optional[str] = None,
        horizon_s: Optional[float] = None,
    ):
        self.scn = scn
        self.seed = scn.seed if seed is None else seed
        self.variant = variant or scn.variant
        self.horizon = scn.horizon_s if horizon_s is None else horizon_s
        self.clock = 0.0
        self.rng = random.Random(self.seed)
        self.rec = Recorder()
        self._heap: List[Tuple[float, int, str, tuple]] = []
        self._seq = 0
        self.safety_violations = 0
        self.cycle_low = float("inf")
        self.cycle_high = 0.0

        self.network = scenario_mod.build_network(scn)
        self.modes: Dict[str, str] = {
            iid: (controller or scn.mode_of(iid)) for iid in self.network.intersections
        }
        self.protocol_on = any(m == "alert_enabled" for m in self.modes.values())

        tm = scn.timing
        self.tick_s = tm.tick_s
        self.dt_ve = tm.status_period_s
        self.p_br = tm.broadcast_period_s

        self.lanes: Dict[Tuple[str, int], LaneRuntime] = {}
        for rid in sorted(self.network.segments):
            seg = self.network.segments[rid]
            length = self.network.length(rid)
            for lane in seg.lanes:
                self.lanes[(rid, lane.lid)] = LaneRuntime(
                    rid, lane.lid, length, lane.speed_limit_mps,
                    self.network.exit_intersection(rid, lane.lid),
                )
        self.lane_keys = sorted(self.lanes)

        # Spawn jitter is drawn up front, in declaration order, so later
        # event-time key generation cannot disturb the stream.
        self.vehicles: Dict[str, VehicleAgent] = {}
        spawn_times = []
        for spec in scn.vehicles:
            jitter = self.rng.uniform(-spec.jitter_s, spec.jitter_s) if spec.jitter_s else 0.0
            spawn_times.append(max(0.0, spec.time_s + jitter))
        for spec, t in zip(scn.vehicles, spawn_times):
            agent = VehicleAgent(spec, t)
            self.vehicles[spec.vid] = agent
            self.rec.vehicles[spec.vid] = metrics.VehicleLog(
                spec.vid, t, self._freeflow(spec)
            )

        self._build_control()
        if self.protocol_on:
            self._build_infrastructure()
        else:
            self.ca = None
            self.anchors = None
            self.rsus = {}
            self.mrsus = {}
            self.stations = {}
            self.home_station = {}

        self.jams: List[Tuple[geometry.Point, float, float, float]] = []
        self.fake_reports: Dict[str, Any] = {}
        self.adversaries = adversary_mod.build_all(scn.adversaries, self)
        self.taps = [a for a in self.adversaries if a.wants_capture]

        for i, inc in enumerate(scn.incidents):
            self.rec.incidents.append(
                {
                    "rid": inc.rid,
                    "lid": inc.lid,
                    "location_m": inc.location_m,
                    "start_s": inc.start_s,
                    "end_s": inc.start_s + inc.duration_s,
                }
            )
            self.schedule(inc.start_s, "incident_start", i)
            self.schedule(inc.start_s + inc.duration_s, "incident_end", i)

        self.schedule(self.tick_s, "tick")
        self.schedule(tm.sample_period_s, "sample")
        for vid in sorted(self.vehicles):
            agent = self.vehicles[vid]
            self.schedule(agent.scheduled_spawn, "spawn", vid)
            if agent.spec.park_at_s is not None:
                self.schedule(agent.spec.park_at_s, "park", vid)
            if agent.spec.resume_at_s is not None:
                self.schedule(agent.spec.resume_at_s, "resume", vid)
        for iid in sorted(self.controllers):
            self.schedule(self.controllers[iid].next_boundary_after(0.0), "boundary", iid)
        if self.protocol_on:
            for key in sorted(self.rsus):
                self.schedule(self.p_br, "broadcast", key)
            for rid in sorted(self.mrsus):
                self.schedule(tm.check_period_s, "check", rid)
        for adv in self.adversaries:
            adv.setup(self)

    # -- construction -----------------------------------------------------------

    def _freeflow(self, spec: scenario_mod.VehicleSpec) -> float:
        total = 0.0
        for rid, lid in spec.route:
            lane = self.network.segments[rid].lane(lid)
            total += self.network.length(rid) / min(spec.speed_mps, lane.speed_limit_mps)
        return total

    def _build_control(self) -> None:
        scn = self.scn
        self.controllers: Dict[str, IntersectionController] = {}
        self.phase_of_approach: Dict[str, Dict[str, int]] = {}
        self.phase_axes: Dict[str, Dict[int, str]] = {}
        self.detector_rows: Dict[str, List[Tuple[float, str, str]]] = {}
        for iid in sorted(self.network.intersections):
            if iid not in scn.plans:
                continue
            plan = scenario_mod.build_plan(scn, iid)
            conflicts = scenario_mod.build_conflicts(self.network, iid)
            hold = 2.0 * scn.detection.window_s
            ctrl = IntersectionController(
                iid, plan, conflicts, mode=self.modes[iid], alert_hold_s=hold
            )
            self.controllers[iid] = ctrl
            self.detector_rows[iid] = []
            of_approach: Dict[str, int] = {}
            axes: Dict[int, str] = {}
            for pi, phase in enumerate(plan.phases):
                for a in phase.green_for:
                    of_approach[a] = pi
                counts: Dict[str, int] = {}
                for a in phase.green_for:
                    ax = scenario_mod.axis_of(self.network, a.split(".")[0])
                    counts[ax] = counts.get(ax, 0) + 1
                axes[pi] = max(sorted(counts), key=lambda ax: counts[ax])
            self.phase_of_approach[iid] = of_approach
            self.phase_axes[iid] = axes
            if ctrl.mode == "adaptive_baseline":
                ctrl.counts_provider = self._make_saturation_provider(iid)

    def _make_saturation_provider(self, iid: str):
        def provider(now: float) -> Dict[int, float]:
            window = 2.0 * self.controllers[iid].baseline.cycle_s
            rows = [r for r in self.detector_rows[iid] if r[0] >= now - window]
            self.detector_rows[iid] = rows
            sats: Dict[int, float] = {}
            for pi in self.phase_axes[iid]:
                apps = [a for a, p in self.phase_of_approach[iid].items() if p == pi]
                demand = sum(1 for t, a, k in rows if a in apps and k == "advance")
                served = sum(1 for t, a, k in rows if a in apps and k == "stop")
                sats[pi] = demand / max(1, served)
            return sats

        return provider

    def _build_infrastructure(self) -> None:
        scn = self.scn
        clock = lambda: self.clock
        self.ca = CertificateAuthority("ca", self.rng, clock)
        self.anchors = TrustAnchors(
            {"ca": self.ca.public_key_raw()}, freshness_window_s=scn.timing.freshness_s
        )
        if self.variant == "s1":
            tables = scenario_mod.generate_neighbor_tables(scn, self.network)

        self.rsus: Dict[Tuple[str, str], RsuEntry] = {}
        self.mrsus: Dict[str, MainRsu] = {}
        self.mrsu_pos: Dict[str, geometry.Point] = {}
        for rid in sorted(self.network.segments):
            seg = self.network.segments[rid]
            ia = self.network.intersections[seg.a]
            ib = self.network.intersections[seg.b]
            length = self.network.length(rid)
            ux, uy = (ib.x - ia.x) / length, (ib.y - ia.y) / length
            if self.variant == "s1":
                payload: protocol.Message = RidStateS1(rid, seg.mrsu_id, tables[rid])
            else:
                payload = RidStateS2(rid, seg.mrsu_id, self.network.segment_rect(rid))
            exit_keys = []
            for end, base, direction in (("a", (ia.x, ia.y), 1.0), ("b", (ib.x, ib.y), -1.0)):
                rsu_id = f"rsu:{rid}:{end}"
                hsm = Hsm(clock, self.rng)
                cred = self.ca.register(rsu_id, hsm)
                exit_keys.append(cred.certificate.subject_key)
                unit = RsuUnit(
                    rsu_id, rid, hsm, cred.key_ref, payload,
                    gated=rid in scn.gated, dt_br_s=scn.timing.gated_window_s,
                )
                pos = (
                    base[0] + ux * RSU_SETBACK_M * direction,
                    base[1] + uy * RSU_SETBACK_M * direction,
                )
                self.rsus[(rid, end)] = RsuEntry(unit, pos, end)

            hsm = Hsm(clock, self.rng)
            cred = self.ca.register(seg.mrsu_id, hsm)
            self.mrsus[rid] = MainRsu(
                seg.mrsu_id,
                rid,
                hsm,
                cred.key_ref,
                self.anchors,
                scn.detection,
                variant=self.variant,
                axis_origin=(ia.x, ia.y),
                axis_unit=(ux, uy),
                exit_signer_keys=exit_keys,
                verify_budget_per_s=scn.verify_budget_per_s,
            )
            self.mrsu_pos[seg.mrsu_id] = (
                (ia.x + ib.x) / 2.0, (ia.y + ib.y) / 2.0,
            )
        self.mrsu_by_id = {m.mrsu_id: m for m in self.mrsus.values()}

        neighbor_map: Dict[str, List[str]] = {}
        for a, b in scn.lbs_links:
            neighbor_map.setdefault(a, []).append(b)
            neighbor_map.setdefault(b, []).append(a)

        self.stations: Dict[str, BaseStation] = {}
        for iid in sorted(self.controllers):
            views: Dict[str, SegmentView] = {}
            for rid in sorted(self.network.segments):
                seg = self.network.segments[rid]
                if iid not in (seg.a, seg.b):
                    continue
                try:
                    lpos = self.network.lane_strips(rid)
                    rpos = self.network.segment_rect(rid)
                except geometry.MissingLposData:
                    lpos, rpos = None, None
                views[rid] = SegmentView(
                    rid=rid,
                    lanes={l.lid: l.direction for l in seg.lanes},
                    downstream={
                        l.lid: self.network.exit_intersection(rid, l.lid) for l in seg.lanes
                    },
                    axis=scenario_mod.axis_of(self.network, rid),
                    rpos=rpos,
                    lpos=lpos,
                )
            self.stations[iid] = BaseStation(
                lbs_id=f"lbs:{iid}",
                iid=iid,
                controller=self.controllers[iid],
                anchors=self.anchors,
                segments=views,
                phase_of_approach=self.phase_of_approach[iid],
                phase_axes=self.phase_axes[iid],
                neighbors=sorted(neighbor_map.get(iid, [])),
            )

        # Alerts from a segment go to the station at the exit of its lowest lane.
        self.home_station: Dict[str, BaseStation] = {}
        for rid in sorted(self.network.segments):
            seg = self.network.segments[rid]
            lid = min(l.lid for l in seg.lanes)
            iid = self.network.exit_intersection(rid, lid)
            if iid in self.stations:
                self.home_station[rid] = self.stations[iid]

    # -- event plumbing ----------------------------------------------------------

    def schedule(self, t: float, kind: str, *payload: Any) -> None:
        if t > self.horizon + 1e-9:
            return
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, payload))

    def run(self) -> Dict[str, Any]:
        while self._heap:
            t, _, kind, payload = heapq.heappop(self._heap)
            if t > self.horizon + 1e-9:
                break
            self.clock = t
            getattr(self, f"_ev_{kind}")(t, *payload)
        self.clock = self.horizon
        return self._summary()

    # -- kinematics --------------------------------------------------------------

    def _ev_tick(self, now: float) -> None:
        dt = self.tick_s
        crossers: List[VehicleAgent] = []
        for key in self.lane_keys:
            lane = self.lanes[key]
            if not lane.order:
                continue
            ctrl = self.controllers.get(lane.exit_iid)
            color = ctrl.color(lane.approach, now) if ctrl else LightColor.GREEN
            green = color is LightColor.GREEN
            mark = lane.length - ADVANCE_DETECTOR_M
            prev_front: Optional[float] = None
            for idx, vid in enumerate(lane.order):
                veh = self.vehicles[vid]
                pos = veh.pos
                v = min(veh.spec.speed_mps, lane.limit)
                block_wall: Optional[float] = None
                for b in lane.blockages:
                    if b >= pos - 1e-9:
                        block_wall = max(b, pos)
                        break
                wall = block_wall
                if not green:
                    wall = lane.length if wall is None else min(wall, lane.length)
                if wall is not None:
                    v = min(v, max(0.0, (wall - pos) / HEADWAY_TAU_S))
                if prev_front is not None:
                    gap = prev_front - CAR_LENGTH_M - pos
                    v = min(v, max(0.0, (gap - STANDSTILL_M) / HEADWAY_TAU_S))
                new_pos = pos + v * dt
                if pos < mark <= new_pos and ctrl is not None:
                    self.detector_rows[lane.exit_iid].append((now, lane.approach, "advance"))
                if (
                    idx == 0
                    and green
                    and block_wall is None
                    and new_pos >= lane.length - 1e-9
                ):
                    new_pos = lane.length
                    crossers.append(veh)
                    if ctrl is not None:
                        self.detector_rows[lane.exit_iid].append((now, lane.approach, "stop"))
                veh.speed = (new_pos - pos) / dt
                veh.pos = new_pos
                veh.pos_xy = self.network.lane_point(lane.rid, lane.lid, min(new_pos, lane.length))
                if veh.proto is not None:
                    veh.proto.pos = veh.pos_xy
                    veh.proto.update_motion(veh.speed, 0.0, dt, dist_limit=lane.length)
                prev_front = new_pos
        for veh in crossers:
            self._cross(veh, now)
        for iid in sorted(self.controllers):
            self._checked_safety(iid, now)
        self.schedule(now + dt, "tick")

    def _checked_safety(self, iid: str, now: float) -> None:
        ctrl = self.controllers[iid]
        try:
            ctrl.safety_check(now)
        except AssertionError:
            self.safety_violations += 1
            self.rec.log(EventRow(now, "safety_violation", actor=iid))

    def _cross(self, veh: VehicleAgent, now: float) -> None:
        rid, lid = veh.lane_key
        lane = self.lanes[(rid, lid)]
        lane.order.remove(veh.vid)
        proto = veh.proto
        if proto is not None and proto.routestate is Routestate.ONROAD and proto.active:
            seg = self.network.segments[rid]
            end = "b" if seg.lane(lid).direction == "R" else "a"
            exit_rsu = self.rsus[(rid, end)]
            env = exit_rsu.unit.exit_detect(proto.active.certificate.subject_key)
            self.rec.count(self.rec.sent, "exit_signal")
            try:
                if self.mrsus[rid].purge_on_exit(env, now):
                    self.rec.exit_purges += 1
            except Exception as exc:  # infrastructure bug; log, never kill the run
                self.rec.log(EventRow(now, "purge_error", actor=rid, value=str(exc)))
            proto.exit_segment()

        last_leg = veh.leg + 1 >= len(veh.route)
        if last_leg:
            veh.state = "done"
            veh.exited_at = now
            self.rec.vehicles[veh.vid].exited_at = now
            self.rec.log(EventRow(now, "exit", actor=veh.vid, rid=rid, lid=str(lid)))
            return
        veh.leg += 1
        nrid, nlid = veh.lane_key
        nlane = self.lanes[(nrid, nlid)]
        if proto is not None:
            new_heading = self.network.lane_heading(nrid, nlid)
            if abs(geometry.signed_angle(new_heading - proto.heading_deg)) > 1e-6:
                proto.apply_turn(new_heading, veh.speed, dt=self.tick_s)
        veh.pos = 0.0
        veh.pos_xy = self.network.lane_point(nrid, nlid, 0.0)
        if proto is not None:
            proto.pos = veh.pos_xy
        nlane.order.append(veh.vid)
        if self.protocol_on:
            seg = self.network.segments[nrid]
            entry_end = "a" if seg.lane(nlid).direction == "R" else "b"
            self.rsus[(nrid, entry_end)].unit.note_arrival(now)
        self.rec.log(
            EventRow(now, "cross", actor=veh.vid, rid=nrid, lid=str(nlid), subject=rid)
        )

    # -- vehicle lifecycle ---------------------------------------------------------

    def _ev_spawn(self, now: float, vid: str) -> None:
        veh = self.vehicles[vid]
        rid, lid = veh.route[0]
        lane = self.lanes[(rid, lid)]
        for other in lane.order:
            if self.vehicles[other].pos < ENTRY_CLEAR_M:
                self.schedule(now + self.tick_s, "spawn", vid)
                return
        veh.state = "active"
        veh.spawned_at = now
        veh.pos = 0.0
        veh.pos_xy = self.network.lane_point(rid, lid, 0.0)
        lane.order.append(vid)
        if self.protocol_on:
            hsm = Hsm(lambda: self.clock, self.rng)
            cred = self.ca.register(vid, hsm)
            pool = self.ca.issue_pseudonyms(cred, hsm, self.scn.pseudonyms_per_vehicle)
            veh.proto = VehicleProtocol(
                vid,
                hsm,
                self.anchors,
                pool,
                variant=self.variant,
                vtype=scenario_mod.VTYPE_NAMES[veh.spec.vtype],
                dt_ve_s=self.dt_ve,
            )
            veh.proto.heading_deg = self.network.lane_heading(rid, lid)
            veh.proto.path.heading_deg = veh.proto.heading_deg
            veh.proto.spawn_lid = lid
            veh.proto.pos = veh.pos_xy
            seg = self.network.segments[rid]
            entry_end = "a" if seg.lane(lid).direction == "R" else "b"
            self.rsus[(rid, entry_end)].unit.note_arrival(now)
        self.rec.log(EventRow(now, "spawn", actor=vid, rid=rid, lid=str(lid)))

    def _ev_park(self, now: float, vid: str) -> None:
        veh = self.vehicles[vid]
        if veh.state != "active":
            return
        rid, lid = veh.lane_key
        self.lanes[(rid, lid)].order.remove(vid)
        veh.state = "parked"
        if veh.proto is not None and veh.proto.routestate is Routestate.ONROAD:
            veh.proto.park()
        self.rec.log(EventRow(now, "park", actor=vid, rid=rid, lid=str(lid)))

    def _ev_resume(self, now: float, vid: str) -> None:
        veh = self.vehicles[vid]
        if veh.state != "parked":
            return
        rid, lid = veh.lane_key
        lane = self.lanes[(rid, lid)]
        idx = 0
        while idx < len(lane.order) and self.vehicles[lane.order[idx]].pos > veh.pos:
            idx += 1
        lane.order.insert(idx, vid)
        veh.state = "active"
        if veh.proto is not None:
            veh.proto.resume()
        self.rec.log(EventRow(now, "resume", actor=vid, rid=rid, lid=str(lid)))

    def _ev_status(self, now: float, vid: str, gen: int) -> None:
        veh = self.vehicles[vid]
        if veh.state == "done" or gen != veh.status_gen or veh.proto is None:
            return
        proto = veh.proto
        if (
            proto.routestate is Routestate.PARKING
            and proto.parking_sends >= protocol.PARKING_MESSAGE_COUNT
        ):
            return
        fake = self.fake_reports.get(vid)
        out = None
        if (
            fake is not None
            and proto.routestate is Routestate.ONROAD
            and proto.active is not None
            and proto.rid == fake.rid
        ):
            msg = fake.build(proto, now)
            proto.last_send = now
            out = (proto.hsm.sign(proto.active.key_ref, protocol.encode_message(msg)), proto.mrsu_addr)
        else:
            out = proto.status_tick(now)
        if out is not None:
            env, dest = out
            self.rec.count(self.rec.sent, "status")
            self.radio_to_mrsu(veh.pos_xy, env, dest)
        self.schedule(now + self.dt_ve, "status", vid, gen)

    # -- radio -------------------------------------------------------------------

    def _jammed(self, pos: geometry.Point, now: float) -> bool:
        for center, radius, t0, t1 in self.jams:
            if t0 <= now <= t1 and _dist(center, pos) <= radius:
                return True
        return False

    def _ev_broadcast(self, now: float, key: Tuple[str, str]) -> None:
        entry = self.rsus[key]
        env = entry.unit.broadcast_tick(now)
        if env is not None:
            self.rec.count(self.rec.sent, "segment_broadcast")
            rng_m = self.scn.radio.rsu_range_m
            for vid in sorted(self.vehicles):
                veh = self.vehicles[vid]
                if veh.state != "active":
                    continue
                if _dist(veh.pos_xy, entry.pos) > rng_m:
                    continue
                if self._jammed(veh.pos_xy, now):
                    self.rec.jam_suppressed += 1
                    continue
                self.schedule(now, "deliver_broadcast", vid, env)
            for tap in self.taps:
                tap.on_capture(self, env, None, now)
        self.schedule(now + self.p_br, "broadcast", key)

    def _ev_deliver_broadcast(self, now: float, vid: str, env) -> None:
        veh = self.vehicles[vid]
        if veh.state != "active" or veh.proto is None:
            return
        self.rec.count(self.rec.delivered, "segment_broadcast")
        outcome = veh.proto.handle_rid_state(env, now)
        if not outcome.accepted:
            if outcome.reason is not None:
                self.rec.count(self.rec.vehicle_ignored, outcome.reason.value)
            return
        proto = veh.proto
        rid, lid = veh.lane_key
        key_hex = proto.active.certificate.subject_key.hex()
        self.rec.pseudonym_audit.setdefault(vid, []).append((proto.rid or "", key_hex))
        if proto.rid != rid or proto.lid_estimate != lid:
            self.rec.estimate_mismatches += 1
        veh.status_gen += 1
        self.schedule(now + self.dt_ve, "status", vid, veh.status_gen)
        self.rec.log(EventRow(now, "accept", actor=vid, rid=rid, lid=str(proto.lid_estimate)))

    def radio_to_mrsu(self, sender_pos: geometry.Point, env, dest: str, tag: Optional[dict] = None) -> None:
        """One status frame from a vehicle position toward a mid-segment unit."""
        for tap in self.taps:
            tap.on_capture(self, env, dest, self.clock)
        mrsu = self.mrsu_by_id.get(dest)
        if mrsu is None:
            return
        if _dist(sender_pos, self.mrsu_pos[dest]) > self.scn.radio.vehicle_tx_range_m:
            return
        self.schedule(self.clock, "deliver_status", dest, env, tag, 0)

    def inject_status(self, when: float, dest: str, env, tag: dict) -> None:
        """Adversary path: schedule a frame delivery regardless of range."""
        self.schedule(when, "deliver_status", dest, env, tag, 0)

    def _ev_deliver_status(self, now: float, dest: str, env, tag: Optional[dict], attempts: int) -> None:
        mrsu = self.mrsu_by_id.get(dest)
        if mrsu is None:
            return
        if self._jammed(self.mrsu_pos[dest], now):
            self.rec.jam_suppressed += 1
            bucket = self.rec.attack_bucket("jam")
            bucket["suppressed"] = bucket.get("suppressed", 0) + 1
            return
        if not mrsu.budget_available(now):
            if attempts < 3:
                retry = float(int(now) + 1)
                if retry <= self.horizon:
                    self.schedule(retry, "deliver_status", dest, env, tag, attempts + 1)
                    return
            if tag is not None:
                self._attack_outcome(tag, "dropped_budget")
            self.rec.count(self.rec.delivered, "status_dropped_budget")
            return
        res = mrsu.ingest(dest, env, now)
        self.rec.count(self.rec.delivered, "status")
        if tag is not None:
            self._attack_outcome(tag, "accepted" if res.accepted else res.reason.value)

    def _attack_outcome(self, tag: dict, outcome: str) -> None:
        bucket = self.rec.attack_bucket(tag["kind"])
        bucket["injected"] = bucket.get("injected", 0) + 1
        if outcome == "accepted":
            bucket["accepted"] = bucket.get("accepted", 0) + 1
        outcomes = bucket.setdefault("outcomes", {})
        outcomes[outcome] = outcomes.get(outcome, 0) + 1

    # -- detection and control ------------------------------------------------------

    def _ev_check(self, now: float, rid: str) -> None:
        mrsu = self.mrsus[rid]
        for alert, env in mrsu.run_check(now):
            true_alert = self._alert_is_true(alert, now)
            self.rec.alerts.append(
                metrics.AlertLog(
                    now, alert.mrsu_id, alert.rid, alert.lane, alert.center,
                    alert.vehicle_count, alert.includes_emergency, alert.alert_id, true_alert,
                )
            )
            self.rec.count(self.rec.sent, "alert")
            self.rec.log(
                EventRow(
                    now, "alert", actor=alert.mrsu_id, rid=alert.rid,
                    lid=str(alert.lane),
                    value=f"center={alert.center:.1f} n={alert.vehicle_count} true={true_alert}",
                )
            )
            station = self.home_station.get(rid)
            if station is None:
                continue
            cmds, forwards = station.handle_alert(env, now, forwarded=False)
            self._record_commands(station, cmds, now)
            for fwd in forwards:
                for nb in station.neighbors:
                    nb_station = self.stations.get(nb)
                    if nb_station is None:
                        continue
                    ncmds, _ = nb_station.handle_alert(fwd, now, forwarded=True)
                    self._record_commands(nb_station, ncmds, now)
        self.schedule(now + self.scn.timing.check_period_s, "check", rid)

    def _alert_is_true(self, alert, now: float) -> bool:
        window = self.scn.detection.window_s
        for inc in self.rec.incidents:
            if inc["rid"] != alert.rid:
                continue
            if inc["start_s"] <= now and now - window <= inc["end_s"]:
                return True
        return False

    def _record_commands(self, station: BaseStation, cmds, now: float) -> None:
        for cmd in cmds:
            gap = station.controller.next_boundary_after(now) - now
            self.rec.commands.append(
                metrics.CommandLog(
                    now, cmd.iid, cmd.kind, cmd.to_phase, cmd.from_phase,
                    cmd.step_s, cmd.cause_alert_ids, gap,
                )
            )
            self.rec.log(
                EventRow(
                    now, "command", actor=cmd.iid, rid=cmd.rid,
                    subject=cmd.kind, value=f"phase+{cmd.to_phase} step={cmd.step_s}",
                )
            )

    def _ev_boundary(self, now: float, iid: str) -> None:
        ctrl = self.controllers[iid]
        before = len(ctrl.adjustments)
        nxt = ctrl.advance_to_boundary(now)
        for adj in ctrl.adjustments[before:]:
            self.rec.log(
                EventRow(
                    now, "plan_change", actor=iid, subject=adj.kind,
                    value=f"to={adj.to_phase} from={adj.from_phase} step={adj.step_s}",
                )
            )
        cycle = ctrl.plan.cycle_s
        self.cycle_low = min(self.cycle_low, cycle)
        self.cycle_high = max(self.cycle_high, cycle)
        self._checked_safety(iid, now)
        self.schedule(nxt, "boundary", iid)

    # -- incidents, jams, sampling ----------------------------------------------------

    def _ev_incident_start(self, now: float, idx: int) -> None:
        inc = self.scn.incidents[idx]
        insort(self.lanes[(inc.rid, inc.lid)].blockages, inc.location_m)
        self.rec.log(
            EventRow(now, "incident_on", rid=inc.rid, lid=str(inc.lid), value=f"{inc.location_m:.0f}m")
        )

    def _ev_incident_end(self, now: float, idx: int) -> None:
        inc = self.scn.incidents[idx]
        blocks = self.lanes[(inc.rid, inc.lid)].blockages
        if inc.location_m in blocks:
            blocks.remove(inc.location_m)
        self.rec.log(EventRow(now, "incident_off", rid=inc.rid, lid=str(inc.lid)))

    def add_jam(self, center: geometry.Point, radius_m: float, start_s: float, end_s: float) -> None:
        self.jams.append((center, radius_m, start_s, end_s))
        self.rec.log(EventRow(start_s, "jam_on", value=f"r={radius_m:.0f}m until {end_s:.0f}s"))

    def _ev_sample(self, now: float) -> None:
        for key in self.lane_keys:
            lane = self.lanes[key]
            q = sum(1 for vid in lane.order if self.vehicles[vid].speed < QUEUE_SPEED_MPS)
            label = lane.approach
            if q > self.rec.queue_peak.get(label, 0):
                self.rec.queue_peak[label] = q
            if q:
                self.rec.log(EventRow(now, "queue", rid=lane.rid, lid=str(lane.lid), value=str(q)))
        self.schedule(now + self.scn.timing.sample_period_s, "sample")

    def _ev_adv(self, now: float, idx: int, action: str, payload: tuple) -> None:
        self.adversaries[idx].fire(self, now, action, payload)

    # -- summary ----------------------------------------------------------------------

    def _summary(self) -> Dict[str, Any]:
        rec = self.rec
        rec.unclassified_arrivals = sum(
            v.proto.unclassified_arrivals for v in self.vehicles.values() if v.proto is not None
        )
        summary = metrics.summarize(
            rec, horizon_s=self.horizon, detection_window_s=self.scn.detection.window_s
        )
        mrsu_drops: Dict[str, int] = {}
        mrsu_accepted = 0
        unknown_exits = 0
        for rid in sorted(self.mrsus):
            m = self.mrsus[rid]
            for reason, n in m.drops.items():
                mrsu_drops[reason] = mrsu_drops.get(reason, 0) + n
            mrsu_accepted += m.accepted_count
            unknown_exits += m.unknown_exit_signals
        rec.unknown_exit_signals = unknown_exits
        summary["messages"]["mrsu_accepted"] = mrsu_accepted
        summary["messages"]["mrsu_drops"] = dict(sorted(mrsu_drops.items()))
        summary["diagnostics"]["unknown_exit_signals"] = unknown_exits

        station_failures: Dict[str, int] = {}
        infeasible = 0
        for iid in sorted(self.stations):
            for k, n in self.stations[iid].verify_failures.items():
                station_failures[k] = station_failures.get(k, 0) + n
        for iid in sorted(self.controllers):
            infeasible += self.controllers[iid].infeasible_shifts
        summary["control"]["station_verify_failures"] = dict(sorted(station_failures.items()))
        summary["control"]["infeasible_shifts"] = infeasible
        summary["control"]["modes"] = dict(sorted(self.modes.items()))

        checks = sum(c.safety_checks for c in self.controllers.values())
        cycles_seen = self.cycle_high > 0
        steps_ok = all(
            control.GREEN_STEP_MIN_S <= a.step_s <= control.GREEN_STEP_MAX_S
            for c in self.controllers.values()
            for a in c.adjustments
        )
        summary["safety"] = {
            "checks": checks,
            "violations": self.safety_violations,
            "cycle_low_s": None if not cycles_seen else self.cycle_low,
            "cycle_high_s": None if not cycles_seen else self.cycle_high,
            "cycle_bounds_ok": (
                True
                if not cycles_seen
                else (
                    self.cycle_low >= control.CYCLE_MIN_S - 1e-9
                    and self.cycle_high <= control.CYCLE_MAX_S + 1e-9
                )
            ),
            "step_bounds_ok": steps_ok,
        }

        rotations = 0
        reuse = 0
        seen_keys: Dict[str, str] = {}
        for vid in sorted(rec.pseudonym_audit):
            rows = rec.pseudonym_audit[vid]
            rotations += len(rows)
            keys = [k for _, k in rows]
            reuse += len(keys) - len(set(keys))
            for k in keys:
                owner = seen_keys.get(k)
                if owner is not None and owner != vid:
                    reuse += 1
                seen_keys[k] = vid
        summary["identity"] = {"rotations": rotations, "reuse_violations": reuse}

        summary["config"] = {
            "scenario": self.scn.name,
            "seed": self.seed,
            "variant": self.variant,
            "horizon_s": self.horizon,
            "hash": scenario_mod.config_hash(self.scn),
        }
        return summary


def run_scenario(
    scn: Scenario,
    seed: Optional[int] = None,
    variant: Optional[str] = None,
    controller: Optional[str] = None,
    horizon_s: Optional[float] = None,
) -> Tuple[World, Dict[str, Any]]:
    """Build a world, run it to the horizon, return (world, summary)."""
    world = World(scn, seed=seed, variant=variant, controller=controller, horizon_s=horizon_s)
    return world, world.run()
