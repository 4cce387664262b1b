"""Traffic-light plans and the base station that reschedules them.

A plan is an ordered list of phases; each phase holds a set of approaches
(segment.lane arrivals) green for green_s seconds, followed by a fixed yellow.
Cycle length is the sum and must stay inside [CYCLE_MIN_S, CYCLE_MAX_S]; green
adjustments move in steps of 4..7 seconds and no green drops below
MIN_GREEN_S. The conflict relation is the safety whitelist: two conflicting
approaches must never show green (or yellow) together, and every state
evaluation asserts that.

Plan changes apply at phase boundaries only. Ordinary rebalances and the
decay back to baseline apply when the cycle wraps; emergency rebalances
preempt at the next boundary, restarting the plan with the favored phase.

The base station consumes verified congestion alerts. One congested direction
means: grow the green of the phase discharging the jam, shrink another. Alerts
covering both directions of a segment escalate to a diversion: the crossing
axis gets the green instead. Alerts are forwarded to neighbor stations exactly
once (hop limit 1, dedup by alert id).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

from . import identity
from .identity import SignedEnvelope, TrustAnchors
from .protocol import CongestionAlert, decode_message
from . import geometry

CYCLE_MIN_S = 20.0
CYCLE_MAX_S = 240.0
MIN_GREEN_S = 10.0
YELLOW_S = 3.0
GREEN_STEP_MIN_S = 4.0
GREEN_STEP_MAX_S = 7.0
DEFAULT_STEP_S = 5.0
DECAY_STEP_S = 4.0


class PlanError(Exception):
    pass


class NoFeasibleShift(Exception):
    """No donor phase can give up the requested green time."""


class LightColor(enum.Enum):
    GREEN = "green"
    YELLOW = "yellow"
    RED = "red"


@dataclass(frozen=True)
class Phase:
    green_for: Tuple[str, ...]  # approach ids, "rid.lid"
    green_s: float


@dataclass(frozen=True)
class PhasePlan:
    phases: Tuple[Phase, ...]
    yellow_s: float = YELLOW_S

    @property
    def cycle_s(self) -> float:
        return sum(p.green_s + self.yellow_s for p in self.phases)

    def boundaries(self) -> List[float]:
        """Offsets of phase edges within the cycle, cycle end included."""
        out, t = [], 0.0
        for p in self.phases:
            t += p.green_s
            out.append(t)
            t += self.yellow_s
            out.append(t)
        return out


def clamp_cycle(cycle_s: float) -> float:
    return min(max(cycle_s, CYCLE_MIN_S), CYCLE_MAX_S)


def clamp_step(step_s: float) -> float:
    return min(max(step_s, GREEN_STEP_MIN_S), GREEN_STEP_MAX_S)


Conflicts = Set[FrozenSet[str]]


def validate_plan(plan: PhasePlan, conflicts: Conflicts) -> None:
    if not plan.phases:
        raise PlanError("plan has no phases")
    if not CYCLE_MIN_S <= plan.cycle_s <= CYCLE_MAX_S:
        raise PlanError(f"cycle {plan.cycle_s}s outside [{CYCLE_MIN_S}, {CYCLE_MAX_S}]")
    for p in plan.phases:
        if p.green_s < MIN_GREEN_S:
            raise PlanError(f"green {p.green_s}s below minimum {MIN_GREEN_S}s")
        for i, a in enumerate(p.green_for):
            for b in p.green_for[i + 1 :]:
                if frozenset((a, b)) in conflicts:
                    raise PlanError(f"phase shows conflicting approaches {a} / {b}")


def plan_states(plan: PhasePlan, t_in_cycle: float) -> Dict[str, LightColor]:
    """Light per approach at an offset within the cycle. Edges are half-open."""
    states: Dict[str, LightColor] = {}
    for p in plan.phases:
        for a in p.green_for:
            states.setdefault(a, LightColor.RED)
    t = 0.0
    for p in plan.phases:
        if t <= t_in_cycle < t + p.green_s:
            for a in p.green_for:
                states[a] = LightColor.GREEN
            return states
        t += p.green_s
        if t <= t_in_cycle < t + plan.yellow_s:
            for a in p.green_for:
                states[a] = LightColor.YELLOW
            return states
        t += plan.yellow_s
    return states


def fixed_time_tick(plan: PhasePlan, now: float, epoch: float = 0.0) -> Dict[str, LightColor]:
    """Purely periodic evaluation of a plan."""
    return plan_states(plan, (now - epoch) % plan.cycle_s)


def assert_safe(states: Dict[str, LightColor], conflicts: Conflicts) -> None:
    """The monitor check: conflicting approaches never both off red."""
    showing = [a for a, c in states.items() if c is not LightColor.RED]
    for i, a in enumerate(showing):
        for b in showing[i + 1 :]:
            if frozenset((a, b)) in conflicts:
                raise AssertionError(f"conflicting approaches both showing: {a} / {b}")


def rebalance_green(
    plan: PhasePlan, to_phase: int, from_phase: int, step_s: float
) -> PhasePlan:
    """Move step_s of green between phases, conserving the cycle.

    Raises NoFeasibleShift when the donor would fall below the minimum green.
    """
    step = clamp_step(step_s)
    if to_phase == from_phase:
        raise NoFeasibleShift("same phase on both sides")
    donor = plan.phases[from_phase]
    if donor.green_s - step < MIN_GREEN_S:
        raise NoFeasibleShift(f"donor phase {from_phase} at minimum green")
    phases = list(plan.phases)
    phases[from_phase] = replace(donor, green_s=donor.green_s - step)
    phases[to_phase] = replace(phases[to_phase], green_s=phases[to_phase].green_s + step)
    return replace(plan, phases=tuple(phases))


def adaptive_baseline_tick(
    plan: PhasePlan, saturations: Dict[int, float], step_s: float = DEFAULT_STEP_S, gap: float = 0.15
) -> Tuple[PhasePlan, bool]:
    """Demand-responsive baseline: shift green toward the most saturated phase.

    saturations maps phase index -> demand/discharge ratio for the last cycle.
    Returns the (possibly unchanged) plan and whether a shift was applied.
    """
    if len(saturations) < 2:
        return plan, False
    hungriest = max(sorted(saturations), key=lambda i: saturations[i])
    fullest = min(sorted(saturations), key=lambda i: saturations[i])
    if saturations[hungriest] - saturations[fullest] <= gap:
        return plan, False
    try:
        return rebalance_green(plan, hungriest, fullest, clamp_step(step_s)), True
    except NoFeasibleShift:
        return plan, False


@dataclass
class ScheduleCommand:
    iid: str
    to_phase: int
    from_phase: int
    step_s: float
    kind: str  # rebalance | divert | decay | adaptive
    cause_alert_ids: Tuple[str, ...] = ()
    issued_at: float = 0.0
    preempt: bool = False
    rid: str = ""  # segment the command is about, for pending-queue bookkeeping


@dataclass
class Adjustment:
    time: float
    kind: str
    to_phase: int
    from_phase: int
    step_s: float


class IntersectionController:
    """Holds the live plan of one intersection and applies queued commands."""

    def __init__(
        self,
        iid: str,
        plan: PhasePlan,
        conflicts: Conflicts,
        mode: str = "fixed",
        alert_hold_s: float = 120.0,
        epoch: float = 0.0,
    ):
        assert mode in ("fixed", "adaptive_baseline", "alert_enabled")
        validate_plan(plan, conflicts)
        self.iid = iid
        self.mode = mode
        self.baseline = plan
        self.plan = plan
        self.conflicts = conflicts
        self.alert_hold_s = alert_hold_s
        self.epoch = epoch
        self.pending: List[ScheduleCommand] = []
        self.last_alert: float = float("-inf")
        self.adjustments: List[Adjustment] = []
        self.safety_checks = 0
        self.counts_provider: Optional[Callable[[float], Dict[int, float]]] = None
        self.infeasible_shifts = 0

    # -- state evaluation --

    def states(self, now: float) -> Dict[str, LightColor]:
        return plan_states(self.plan, (now - self.epoch) % self.plan.cycle_s)

    def color(self, approach: str, now: float) -> LightColor:
        return self.states(now).get(approach, LightColor.RED)

    def safety_check(self, now: float) -> None:
        self.safety_checks += 1
        assert_safe(self.states(now), self.conflicts)

    def next_boundary_after(self, now: float) -> float:
        t = (now - self.epoch) % self.plan.cycle_s
        for b in self.plan.boundaries():
            if b > t + 1e-9:
                return now + (b - t)
        return now + (self.plan.cycle_s - t)

    # -- commands --

    def queue_command(self, cmd: ScheduleCommand) -> None:
        self.pending.append(cmd)

    def note_alert(self, now: float) -> None:
        self.last_alert = now

    def _apply(self, cmd: ScheduleCommand, now: float) -> bool:
        try:
            new_plan = rebalance_green(self.plan, cmd.to_phase, cmd.from_phase, cmd.step_s)
        except NoFeasibleShift:
            self.infeasible_shifts += 1
            return False
        validate_plan(new_plan, self.conflicts)
        self.plan = new_plan
        self.adjustments.append(
            Adjustment(now, cmd.kind, cmd.to_phase, cmd.from_phase, clamp_step(cmd.step_s))
        )
        return True

    def _decay_toward_baseline(self, now: float) -> None:
        if now - self.last_alert <= self.alert_hold_s:
            return
        over = [
            i
            for i, p in enumerate(self.plan.phases)
            if p.green_s > self.baseline.phases[i].green_s
        ]
        under = [
            i
            for i, p in enumerate(self.plan.phases)
            if p.green_s < self.baseline.phases[i].green_s
        ]
        if not over or not under:
            return
        i, j = over[0], under[0]
        gap = min(
            self.plan.phases[i].green_s - self.baseline.phases[i].green_s,
            self.baseline.phases[j].green_s - self.plan.phases[j].green_s,
        )
        step = min(DECAY_STEP_S, gap)
        if step < DECAY_STEP_S:
            # Snap the final sliver so the plan actually reaches baseline.
            phases = list(self.plan.phases)
            phases[i] = replace(phases[i], green_s=phases[i].green_s - step)
            phases[j] = replace(phases[j], green_s=phases[j].green_s + step)
            self.plan = replace(self.plan, phases=tuple(phases))
            if step > 0:
                self.adjustments.append(Adjustment(now, "decay", j, i, step))
            return
        try:
            self.plan = rebalance_green(self.plan, j, i, step)
            self.adjustments.append(Adjustment(now, "decay", j, i, step))
        except NoFeasibleShift:
            self.infeasible_shifts += 1

    def _adaptive_update(self, now: float) -> None:
        if self.counts_provider is None:
            return
        sats = self.counts_provider(now)
        new_plan, shifted = adaptive_baseline_tick(self.plan, sats)
        if shifted:
            old = self.plan
            self.plan = new_plan
            for i, (p_old, p_new) in enumerate(zip(old.phases, new_plan.phases)):
                if p_new.green_s > p_old.green_s:
                    gained = i
                if p_new.green_s < p_old.green_s:
                    lost = i
            self.adjustments.append(Adjustment(now, "adaptive", gained, lost, DEFAULT_STEP_S))

    def advance_to_boundary(self, now: float) -> float:
        """Handle the boundary that is due at now; returns the next boundary time.

        Preempting commands apply at any boundary and restart the plan on the
        favored phase. Everything else (ordinary rebalances, decay, adaptive
        updates) waits for the cycle wrap.
        """
        t = (now - self.epoch) % self.plan.cycle_s
        at_wrap = t < 1e-6 or self.plan.cycle_s - t < 1e-6
        preempts = [c for c in self.pending if c.preempt]
        normals = [c for c in self.pending if not c.preempt]
        if preempts:
            self.pending = normals
            rotated = False
            for cmd in preempts:
                if self._apply(cmd, now):
                    order = list(range(len(self.plan.phases)))
                    order.remove(cmd.to_phase)
                    order.insert(0, cmd.to_phase)
                    self.plan = replace(
                        self.plan, phases=tuple(self.plan.phases[i] for i in order)
                    )
                    rotated = True
            if rotated:
                self.epoch = now
                at_wrap = False
        if at_wrap:
            self.epoch = now
            self.pending, queue = [], normals
            for cmd in queue:
                self._apply(cmd, now)
            if self.mode == "alert_enabled":
                self._decay_toward_baseline(now)
            elif self.mode == "adaptive_baseline":
                self._adaptive_update(now)
        return self.next_boundary_after(now)


@dataclass
class SegmentView:
    """What a base station knows about one segment for alert handling."""

    rid: str
    lanes: Dict[int, str]  # lid -> direction 'R' | 'L'
    downstream: Dict[int, str]  # lid -> intersection id the lane discharges at
    axis: str  # 'ew' | 'ns'
    rpos: Optional[geometry.Rect] = None
    lpos: Optional[Dict[int, geometry.Rect]] = None


class BaseStation:
    """Per-intersection decision point: verify alerts, reschedule, forward."""

    def __init__(
        self,
        lbs_id: str,
        iid: str,
        controller: IntersectionController,
        anchors: TrustAnchors,
        segments: Dict[str, SegmentView],
        phase_of_approach: Dict[str, int],
        phase_axes: Dict[int, str],
        neighbors: Sequence[str] = (),
        default_step_s: float = DEFAULT_STEP_S,
    ):
        self.lbs_id = lbs_id
        self.iid = iid
        self.controller = controller
        self.anchors = anchors
        self.segments = segments
        self.phase_of_approach = phase_of_approach
        self.phase_axes = phase_axes  # phase index -> dominant axis
        self.neighbors = list(neighbors)
        self.default_step_s = default_step_s
        self.seen_ids: Set[str] = set()
        self.recent: Dict[str, Dict[int, float]] = {}  # rid -> lane -> time
        self.diverted: Set[str] = set()
        self.verify_failures: Dict[str, int] = {}
        self.unresolved_lanes = 0

    def _fail(self, kind: str) -> None:
        self.verify_failures[kind] = self.verify_failures.get(kind, 0) + 1

    def _resolve_lane(self, alert: CongestionAlert, view: SegmentView) -> int:
        if alert.lane != 0 or not alert.positions:
            return alert.lane
        if view.lpos is None or view.rpos is None:
            self.unresolved_lanes += 1
            return min(view.lanes)
        votes: Dict[int, int] = {}
        for pos in alert.positions:
            lid = geometry.lane_from_position(pos, view.rpos, view.lpos)
            if lid is not None:
                votes[lid] = votes.get(lid, 0) + 1
        if not votes:
            self.unresolved_lanes += 1
            return min(view.lanes)
        best = max(votes.values())
        return min(l for l, v in votes.items() if v == best)

    def _crossing_phase(self, rid_axis: str) -> Optional[Tuple[int, int]]:
        """(crossing phase, feeding phase) or None when no crossing axis exists."""
        crossing = [i for i, ax in sorted(self.phase_axes.items()) if ax != rid_axis]
        feeding = [i for i, ax in sorted(self.phase_axes.items()) if ax == rid_axis]
        if not crossing or not feeding:
            return None
        return crossing[0], feeding[0]

    def handle_alert(
        self, envelope: SignedEnvelope, now: float, forwarded: bool = False
    ) -> Tuple[List[ScheduleCommand], List[SignedEnvelope]]:
        """Returns (commands issued here, envelopes to forward to neighbors)."""
        try:
            self.anchors.verify(envelope, now)
        except identity.CertError:
            self._fail("cert")
            return [], []
        except identity.SignatureError:
            self._fail("signature")
            return [], []
        except identity.StaleTimestamp:
            self._fail("stale")
            return [], []
        alert = decode_message(envelope.payload)
        if not isinstance(alert, CongestionAlert):
            self._fail("malformed")
            return [], []
        if alert.alert_id in self.seen_ids:
            return [], []
        self.seen_ids.add(alert.alert_id)
        view = self.segments.get(alert.rid)
        if view is None:
            # Alert about a segment this station does not know; forward only.
            return [], ([] if forwarded else [envelope])
        lane = self._resolve_lane(alert, view)
        self.recent.setdefault(alert.rid, {})[lane] = now

        commands: List[ScheduleCommand] = []
        step = GREEN_STEP_MAX_S if alert.includes_emergency else self.default_step_s
        directions = {
            view.lanes[l]
            for l, t in self.recent[alert.rid].items()
            if l in view.lanes and now - t <= self.controller.alert_hold_s
        }
        if len(directions) == 2:
            # Both directions jammed: favor the crossing axis instead.
            pick = self._crossing_phase(view.axis)
            if pick is not None and alert.rid not in self.diverted:
                self.diverted.add(alert.rid)
                # A divert supersedes any rebalance still waiting for this segment.
                self.controller.pending = [
                    c
                    for c in self.controller.pending
                    if not (c.rid == alert.rid and c.kind == "rebalance")
                ]
                to_phase, from_phase = pick
                commands.append(
                    ScheduleCommand(
                        iid=self.iid,
                        to_phase=to_phase,
                        from_phase=from_phase,
                        step_s=step,
                        kind="divert",
                        cause_alert_ids=(alert.alert_id,),
                        issued_at=now,
                        preempt=alert.includes_emergency,
                        rid=alert.rid,
                    )
                )
        elif view.downstream.get(lane) == self.iid and alert.rid not in self.diverted:
            approach = f"{alert.rid}.{lane}"
            to_phase = self.phase_of_approach.get(approach)
            if to_phase is not None:
                from_phase = next(
                    (
                        i
                        for i in sorted(self.phase_axes)
                        if i != to_phase
                    ),
                    None,
                )
                if from_phase is not None:
                    commands.append(
                        ScheduleCommand(
                            iid=self.iid,
                            to_phase=to_phase,
                            from_phase=from_phase,
                            step_s=step,
                            kind="rebalance",
                            cause_alert_ids=(alert.alert_id,),
                            issued_at=now,
                            preempt=alert.includes_emergency,
                            rid=alert.rid,
                        )
                    )
        if commands and self.controller.mode == "alert_enabled":
            self.controller.note_alert(now)
            for cmd in commands:
                self.controller.queue_command(cmd)
        forwards = [] if forwarded else [envelope]
        return commands, forwards


def lbs_handle_alert(
    lbs: BaseStation, envelope: SignedEnvelope, now: float, forwarded: bool = False
) -> Tuple[List[ScheduleCommand], List[SignedEnvelope]]:
    return lbs.handle_alert(envelope, now, forwarded)


def divert_decision(lbs: BaseStation, rid: str, now: float) -> bool:
    """True when alerts seen at this station cover both directions of rid."""
    view = lbs.segments.get(rid)
    if view is None:
        return False
    directions = {
        view.lanes[l]
        for l, t in lbs.recent.get(rid, {}).items()
        if l in view.lanes and now - t <= lbs.controller.alert_hold_s
    }
    return len(directions) == 2
