"""Run bookkeeping: the event log and the end-of-run summary numbers.

Vehicle delay is measured against the free-flow reference: route length over
the lane speed limits (or the vehicle's own desired speed if lower), with
intersection hops counted as instantaneous. An alert counts as true when an
incident on the same segment was active at some point in the detection window
preceding it; everything else (notably fabricated clusters) counts as false.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

EVENT_FIELDS = ("time", "kind", "actor", "rid", "lid", "subject", "value")


@dataclass
class EventRow:
    time: float
    kind: str
    actor: str = ""
    rid: str = ""
    lid: str = ""
    subject: str = ""
    value: str = ""

    def as_tuple(self) -> Tuple[str, ...]:
        return (
            f"{self.time:.3f}",
            self.kind,
            self.actor,
            self.rid,
            self.lid,
            self.subject,
            self.value,
        )


@dataclass
class VehicleLog:
    vid: str
    scheduled_spawn: float
    freeflow_s: float
    spawned_at: Optional[float] = None
    exited_at: Optional[float] = None


@dataclass
class AlertLog:
    time: float
    mrsu_id: str
    rid: str
    lane: int
    center: float
    count: int
    emergency: bool
    alert_id: str
    true_alert: bool


@dataclass
class CommandLog:
    time: float
    iid: str
    kind: str
    to_phase: int
    from_phase: int
    step_s: float
    cause: Tuple[str, ...]
    boundary_gap_s: float


class Recorder:
    """Accumulates everything the summary and the event log need."""

    def __init__(self) -> None:
        self.events: List[EventRow] = []
        self.sent: Dict[str, int] = {}
        self.delivered: Dict[str, int] = {}
        self.jam_suppressed = 0
        self.vehicle_ignored: Dict[str, int] = {}
        self.vehicles: Dict[str, VehicleLog] = {}
        self.alerts: List[AlertLog] = []
        self.commands: List[CommandLog] = []
        self.incidents: List[Dict[str, Any]] = []
        self.queue_peak: Dict[str, int] = {}
        self.attack: Dict[str, Any] = {}
        self.pseudonym_audit: Dict[str, List[Tuple[str, str]]] = {}
        self.estimate_mismatches = 0
        self.unclassified_arrivals = 0
        self.exit_purges = 0
        self.unknown_exit_signals = 0

    def log(self, row: EventRow) -> None:
        self.events.append(row)

    def count(self, table: Dict[str, int], key: str, n: int = 1) -> None:
        table[key] = table.get(key, 0) + n

    def attack_bucket(self, kind: str) -> Dict[str, Any]:
        return self.attack.setdefault(kind, {})


def _mean(xs: List[float]) -> Optional[float]:
    return sum(xs) / len(xs) if xs else None


def _percentile(xs: List[float], q: float) -> Optional[float]:
    if not xs:
        return None
    ordered = sorted(xs)
    idx = min(len(ordered) - 1, max(0, int(round(q * (len(ordered) - 1)))))
    return ordered[idx]


def vehicle_delays(rec: Recorder, horizon_s: float) -> Dict[str, float]:
    """Per-vehicle delay against free flow; unfinished vehicles get a floor
    estimate counted up to the horizon."""
    out: Dict[str, float] = {}
    for vid, log in rec.vehicles.items():
        start = log.scheduled_spawn
        if log.exited_at is not None:
            out[vid] = (log.exited_at - start) - log.freeflow_s
        else:
            out[vid] = max(0.0, (horizon_s - start) - log.freeflow_s)
    return out


def summarize(rec: Recorder, *, horizon_s: float, detection_window_s: float) -> Dict[str, Any]:
    """Aggregate a Recorder into the summary dictionary."""
    unfinished = sum(1 for log in rec.vehicles.values() if log.exited_at is None)
    delays = list(vehicle_delays(rec, horizon_s).values())

    first_incident = min((i["start_s"] for i in rec.incidents), default=None)
    incident_to_alert = None
    if first_incident is not None:
        for alert in rec.alerts:
            if alert.true_alert and alert.time >= first_incident:
                incident_to_alert = alert.time - first_incident
                break

    alert_to_command = None
    boundary_gap = None
    alert_times = {a.alert_id: a.time for a in rec.alerts}
    for cmd in rec.commands:
        causes = [alert_times[c] for c in cmd.cause if c in alert_times]
        if causes:
            alert_to_command = cmd.time - max(causes)
            boundary_gap = cmd.boundary_gap_s
            break

    adjustments = [
        {
            "time": round(c.time, 3),
            "iid": c.iid,
            "kind": c.kind,
            "step_s": c.step_s,
        }
        for c in rec.commands
    ]

    return {
        "horizon_s": horizon_s,
        "messages": {
            "sent": dict(sorted(rec.sent.items())),
            "delivered": dict(sorted(rec.delivered.items())),
            "jam_suppressed": rec.jam_suppressed,
            "vehicle_ignored": dict(sorted(rec.vehicle_ignored.items())),
        },
        "vehicles": {
            "spawned": len(rec.vehicles),
            "finished": len(rec.vehicles) - unfinished,
            "unfinished": unfinished,
            "mean_delay_s": _round(_mean(delays)),
            "p95_delay_s": _round(_percentile(delays, 0.95)),
        },
        "alerts": {
            "total": len(rec.alerts),
            "true": sum(1 for a in rec.alerts if a.true_alert),
            "false": sum(1 for a in rec.alerts if not a.true_alert),
            "first_time_s": _round(rec.alerts[0].time) if rec.alerts else None,
            "detail": [
                {
                    "time": round(a.time, 3),
                    "rid": a.rid,
                    "lane": a.lane,
                    "center_m": round(a.center, 3),
                    "count": a.count,
                    "emergency": a.emergency,
                    "true": a.true_alert,
                }
                for a in rec.alerts
            ],
        },
        "latencies": {
            "incident_to_alert_s": _round(incident_to_alert),
            "alert_to_command_s": _round(alert_to_command),
            "boundary_gap_at_alert_s": _round(boundary_gap),
        },
        "incidents": rec.incidents,
        "control": {
            "commands": adjustments,
            "detection_window_s": detection_window_s,
        },
        "queues": {"peak_by_lane": dict(sorted(rec.queue_peak.items()))},
        "attacks": {k: rec.attack[k] for k in sorted(rec.attack)},
        "diagnostics": {
            "estimate_mismatches": rec.estimate_mismatches,
            "unclassified_arrivals": rec.unclassified_arrivals,
            "exit_purges": rec.exit_purges,
            "unknown_exit_signals": rec.unknown_exit_signals,
        },
        "pseudonyms": {
            vid: [[rid, key] for rid, key in rows]
            for vid, rows in sorted(rec.pseudonym_audit.items())
        },
    }


def _round(x: Optional[float]) -> Optional[float]:
    return None if x is None else round(x, 6)
