"""Scenario files: schema, validation, and derived network data.

A scenario is a YAML document (version 1) that describes the road network,
signal plans, traffic, incidents, and any adversaries. The loader validates
eagerly and raises ValidationError naming the offending path, so a typo in a
lane id fails at load time rather than three minutes into a run.

Angle tables for the no-positioning variant are generated from the network
embedding: every movement that can physically deliver a vehicle onto a segment
gets an entry whose angle interval brackets the heading of the receiving lane.
Intervals for the same (segment, lane) origin must not overlap; generation
enforces that and refuses ambiguous layouts.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml

from . import geometry
from .detection import DetectionParams
from .control import Phase, PhasePlan
from .geometry import Intersection, Lane, NeighborEntry, RoadNetwork, Segment
from .protocol import VehicleType

SCHEMA_VERSION = 1
DEFAULT_SPEED_MPS = 13.9
DEFAULT_PSEUDONYMS = 16

VTYPE_NAMES = {
    "normal": VehicleType.NORMAL,
    "emergency": VehicleType.EMERGENCY_ACTIVE,
    "transit": VehicleType.PUBLIC_TRANSPORT,
}

ADVERSARY_KINDS = ("replay", "forge", "dos_flood", "jam", "botnet")
MODES = ("fixed", "adaptive_baseline", "alert_enabled")


class ValidationError(Exception):
    """Scenario content failed validation; str() names the offending path."""


@dataclass
class Timing:
    tick_s: float = 0.5
    status_period_s: float = 2.0
    broadcast_period_s: float = 1.0
    gated_window_s: float = 5.0
    freshness_s: float = 5.0
    check_period_s: float = 2.0
    sample_period_s: float = 5.0


@dataclass
class RadioSpec:
    vehicle_tx_range_m: float = 2000.0
    rsu_range_m: float = 7.0


@dataclass
class VehicleSpec:
    vid: str
    time_s: float
    route: List[Tuple[str, int]]
    speed_mps: float = DEFAULT_SPEED_MPS
    vtype: str = "normal"
    park_at_s: Optional[float] = None
    resume_at_s: Optional[float] = None
    jitter_s: float = 0.0


@dataclass
class IncidentSpec:
    rid: str
    lid: int
    location_m: float
    start_s: float
    duration_s: float


@dataclass
class PhaseSpec:
    green_for: List[str]
    green_s: float


@dataclass
class PlanSpec:
    phases: List[PhaseSpec]
    yellow_s: float = 3.0


@dataclass
class Scenario:
    name: str
    variant: str = "s1"
    seed: int = 0
    horizon_s: float = 300.0
    description: str = ""
    mode: str = "alert_enabled"
    modes: Dict[str, str] = field(default_factory=dict)
    timing: Timing = field(default_factory=Timing)
    radio: RadioSpec = field(default_factory=RadioSpec)
    detection: DetectionParams = field(default_factory=DetectionParams)
    verify_budget_per_s: Optional[int] = None
    pseudonyms_per_vehicle: int = DEFAULT_PSEUDONYMS
    neighbor_tolerance_deg: float = geometry.DEFAULT_ANGLE_TOLERANCE_DEG
    intersections: List[Tuple[str, float, float]] = field(default_factory=list)
    segments: List[Dict[str, Any]] = field(default_factory=list)
    gated: List[str] = field(default_factory=list)
    plans: Dict[str, PlanSpec] = field(default_factory=dict)
    lbs_links: List[Tuple[str, str]] = field(default_factory=list)
    vehicles: List[VehicleSpec] = field(default_factory=list)
    incidents: List[IncidentSpec] = field(default_factory=list)
    adversaries: List[Dict[str, Any]] = field(default_factory=list)

    def mode_of(self, iid: str) -> str:
        return self.modes.get(iid, self.mode)


# --- parsing -------------------------------------------------------------------


def _req(d: Dict[str, Any], key: str, where: str) -> Any:
    if key not in d:
        raise ValidationError(f"{where}: missing required key '{key}'")
    return d[key]


def _num(v: Any, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValidationError(f"{where}: expected a number, got {v!r}")
    return float(v)


def _parse_route(raw: Any, where: str) -> List[Tuple[str, int]]:
    if not isinstance(raw, list) or not raw:
        raise ValidationError(f"{where}: route must be a non-empty list of [rid, lid]")
    out = []
    for i, leg in enumerate(raw):
        if not isinstance(leg, (list, tuple)) or len(leg) != 2:
            raise ValidationError(f"{where}[{i}]: each leg is [rid, lid]")
        out.append((str(leg[0]), int(leg[1])))
    return out


def _parse_vehicle(raw: Dict[str, Any], where: str) -> VehicleSpec:
    return VehicleSpec(
        vid=str(_req(raw, "id", where)),
        time_s=_num(_req(raw, "time_s", where), f"{where}.time_s"),
        route=_parse_route(_req(raw, "route", where), f"{where}.route"),
        speed_mps=_num(raw.get("speed_mps", DEFAULT_SPEED_MPS), f"{where}.speed_mps"),
        vtype=str(raw.get("type", "normal")),
        park_at_s=None if raw.get("park_at_s") is None else _num(raw["park_at_s"], where),
        resume_at_s=None if raw.get("resume_at_s") is None else _num(raw["resume_at_s"], where),
        jitter_s=_num(raw.get("jitter_s", 0.0), f"{where}.jitter_s"),
    )


def _expand_flow(raw: Dict[str, Any], where: str) -> List[VehicleSpec]:
    prefix = str(_req(raw, "prefix", where))
    route = _parse_route(_req(raw, "route", where), f"{where}.route")
    start = _num(_req(raw, "start_s", where), f"{where}.start_s")
    headway = _num(_req(raw, "headway_s", where), f"{where}.headway_s")
    count = int(_req(raw, "count", where))
    if headway <= 0 or count <= 0:
        raise ValidationError(f"{where}: headway_s and count must be positive")
    speed = _num(raw.get("speed_mps", DEFAULT_SPEED_MPS), f"{where}.speed_mps")
    vtype = str(raw.get("type", "normal"))
    jitter = _num(raw.get("jitter_s", 0.0), f"{where}.jitter_s")
    return [
        VehicleSpec(
            vid=f"{prefix}{i:03d}",
            time_s=start + i * headway,
            route=route,
            speed_mps=speed,
            vtype=vtype,
            jitter_s=jitter,
        )
        for i in range(count)
    ]


def from_dict(doc: Dict[str, Any]) -> Scenario:
    if not isinstance(doc, dict):
        raise ValidationError("document: expected a mapping at the top level")
    if doc.get("version") != SCHEMA_VERSION:
        raise ValidationError(f"version: expected {SCHEMA_VERSION}, got {doc.get('version')!r}")
    name = str(_req(doc, "name", "document"))
    variant = str(doc.get("variant", "s1"))
    if variant not in ("s1", "s2"):
        raise ValidationError(f"variant: must be 's1' or 's2', got {variant!r}")
    mode = str(doc.get("mode", "alert_enabled"))
    if mode not in MODES:
        raise ValidationError(f"mode: must be one of {MODES}, got {mode!r}")
    modes = {str(k): str(v) for k, v in (doc.get("modes") or {}).items()}
    for iid, m in modes.items():
        if m not in MODES:
            raise ValidationError(f"modes.{iid}: must be one of {MODES}, got {m!r}")

    timing = Timing(**{k: _num(v, f"timing.{k}") for k, v in (doc.get("timing") or {}).items()})
    radio = RadioSpec(**{k: _num(v, f"radio.{k}") for k, v in (doc.get("radio") or {}).items()})
    det_raw = dict(doc.get("detection") or {})
    budget = det_raw.pop("verify_budget_per_s", doc.get("verify_budget_per_s"))
    try:
        detection = DetectionParams(**det_raw)
    except TypeError as exc:
        raise ValidationError(f"detection: {exc}") from None

    net = doc.get("network") or {}
    intersections = []
    for i, raw in enumerate(net.get("intersections") or []):
        where = f"network.intersections[{i}]"
        intersections.append(
            (str(_req(raw, "id", where)), _num(_req(raw, "x", where), where), _num(_req(raw, "y", where), where))
        )
    segments = []
    gated: List[str] = []
    for i, raw in enumerate(net.get("segments") or []):
        where = f"network.segments[{i}]"
        rid = str(_req(raw, "id", where))
        lanes = raw.get("lanes")
        if not isinstance(lanes, list) or not lanes:
            raise ValidationError(f"{where}.lanes: expected a non-empty list")
        for j, lane in enumerate(lanes):
            lw = f"{where}.lanes[{j}]"
            if str(_req(lane, "dir", lw)) not in ("R", "L"):
                raise ValidationError(f"{lw}.dir: must be 'R' or 'L'")
            _req(lane, "lid", lw)
        segments.append(
            {
                "id": rid,
                "from": str(_req(raw, "from", where)),
                "to": str(_req(raw, "to", where)),
                "lanes": [
                    {
                        "lid": int(l["lid"]),
                        "dir": str(l["dir"]),
                        "limit_mps": _num(l.get("limit_mps", DEFAULT_SPEED_MPS), where),
                    }
                    for l in lanes
                ],
            }
        )
        if raw.get("gated_broadcast"):
            gated.append(rid)

    plans: Dict[str, PlanSpec] = {}
    for iid, raw in (doc.get("plans") or {}).items():
        where = f"plans.{iid}"
        phases = []
        for j, ph in enumerate(raw.get("phases") or []):
            pw = f"{where}.phases[{j}]"
            green_for = _req(ph, "green_for", pw)
            if not isinstance(green_for, list) or not green_for:
                raise ValidationError(f"{pw}.green_for: expected a non-empty list")
            phases.append(PhaseSpec([str(a) for a in green_for], _num(_req(ph, "green_s", pw), pw)))
        if not phases:
            raise ValidationError(f"{where}: a plan needs at least one phase")
        plans[str(iid)] = PlanSpec(phases, _num(raw.get("yellow_s", 3.0), f"{where}.yellow_s"))

    vehicles: List[VehicleSpec] = []
    for i, raw in enumerate(doc.get("vehicles") or []):
        vehicles.append(_parse_vehicle(raw, f"vehicles[{i}]"))
    for i, raw in enumerate(doc.get("flows") or []):
        vehicles.extend(_expand_flow(raw, f"flows[{i}]"))
    seen_vids = set()
    for v in vehicles:
        if v.vid in seen_vids:
            raise ValidationError(f"vehicles: duplicate vehicle id {v.vid!r}")
        seen_vids.add(v.vid)
        if v.vtype not in VTYPE_NAMES:
            raise ValidationError(f"vehicles.{v.vid}.type: unknown type {v.vtype!r}")

    incidents = []
    for i, raw in enumerate(doc.get("incidents") or []):
        where = f"incidents[{i}]"
        incidents.append(
            IncidentSpec(
                rid=str(_req(raw, "rid", where)),
                lid=int(_req(raw, "lid", where)),
                location_m=_num(_req(raw, "location_m", where), where),
                start_s=_num(_req(raw, "start_s", where), where),
                duration_s=_num(_req(raw, "duration_s", where), where),
            )
        )

    adversaries = []
    for i, raw in enumerate(doc.get("adversaries") or []):
        where = f"adversaries[{i}]"
        kind = str(_req(raw, "kind", where))
        if kind not in ADVERSARY_KINDS:
            raise ValidationError(f"{where}.kind: unknown kind {kind!r}")
        adversaries.append(dict(raw))

    scn = Scenario(
        name=name,
        variant=variant,
        seed=int(doc.get("seed", 0)),
        horizon_s=_num(doc.get("horizon_s", 300.0), "horizon_s"),
        description=str(doc.get("description", "")),
        mode=mode,
        modes=modes,
        timing=timing,
        radio=radio,
        detection=detection,
        verify_budget_per_s=None if budget is None else int(budget),
        pseudonyms_per_vehicle=int(doc.get("pseudonyms_per_vehicle", DEFAULT_PSEUDONYMS)),
        neighbor_tolerance_deg=_num(
            doc.get("neighbor_tolerance_deg", geometry.DEFAULT_ANGLE_TOLERANCE_DEG),
            "neighbor_tolerance_deg",
        ),
        intersections=intersections,
        segments=segments,
        gated=gated,
        plans=plans,
        lbs_links=[(str(a), str(b)) for a, b in (doc.get("lbs_links") or [])],
        vehicles=vehicles,
        incidents=incidents,
        adversaries=adversaries,
    )
    validate(scn)
    return scn


def load_scenario(path: str | Path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    return from_dict(doc)


# --- derived structures ----------------------------------------------------------


def build_network(scn: Scenario) -> RoadNetwork:
    intersections = [Intersection(iid, x, y) for iid, x, y in scn.intersections]
    segments = []
    for raw in scn.segments:
        lanes = [Lane(l["lid"], l["dir"], l["limit_mps"]) for l in raw["lanes"]]
        segments.append(Segment(raw["id"], raw["from"], raw["to"], lanes))
    return RoadNetwork(intersections, segments)


def axis_of(network: RoadNetwork, rid: str) -> str:
    """Dominant axis of a segment: 'ew' or 'ns'."""
    seg = network.segments[rid]
    ia, ib = network.intersections[seg.a], network.intersections[seg.b]
    return "ew" if abs(ib.x - ia.x) >= abs(ib.y - ia.y) else "ns"


def approaches_at(network: RoadNetwork, iid: str) -> List[str]:
    out = []
    for rid in sorted(network.segments):
        for lane in network.segments[rid].lanes:
            if network.exit_intersection(rid, lane.lid) == iid:
                out.append(f"{rid}.{lane.lid}")
    return out


def build_conflicts(network: RoadNetwork, iid: str) -> frozenset:
    """Approach pairs that must never be green together: crossing axes."""
    pairs = set()
    apps = approaches_at(network, iid)
    for i, a in enumerate(apps):
        for b in apps[i + 1:]:
            if axis_of(network, a.split(".")[0]) != axis_of(network, b.split(".")[0]):
                pairs.add(frozenset((a, b)))
    return frozenset(pairs)


def build_plan(scn: Scenario, iid: str) -> PhasePlan:
    spec = scn.plans[iid]
    return PhasePlan(
        phases=tuple(Phase(tuple(p.green_for), p.green_s) for p in spec.phases),
        yellow_s=spec.yellow_s,
    )


def generate_neighbor_tables(
    scn: Scenario, network: RoadNetwork
) -> Dict[str, Tuple[NeighborEntry, ...]]:
    """Angle tables per segment, derived from the embedding.

    For destination segment T and every lane f of another segment F that
    discharges at an intersection where T has an entering lane, the movement
    gets one entry: the interval brackets the heading of the receiving lane,
    and multi-lane directions collapse onto the lowest lane id so intervals
    from the same origin stay disjoint.
    """
    tol = scn.neighbor_tolerance_deg
    tables: Dict[str, List[NeighborEntry]] = {rid: [] for rid in network.segments}
    for t_rid in sorted(network.segments):
        t_seg = network.segments[t_rid]
        by_heading: Dict[Tuple[str, float], int] = {}
        for lane in t_seg.lanes:
            heading = network.lane_heading(t_rid, lane.lid)
            key = (network.entry_intersection(t_rid, lane.lid), round(heading, 6))
            if key not in by_heading or lane.lid < by_heading[key]:
                by_heading[key] = lane.lid
        for (entry_iid, heading), to_lid in sorted(by_heading.items()):
            for f_rid in sorted(network.segments):
                if f_rid == t_rid:
                    continue  # a segment never lists itself; exits restart the path
                f_seg = network.segments[f_rid]
                for f_lane in f_seg.lanes:
                    if network.exit_intersection(f_rid, f_lane.lid) != entry_iid:
                        continue
                    tables[t_rid].append(
                        NeighborEntry(
                            from_rid=f_rid,
                            from_lid=f_lane.lid,
                            angle_lo=geometry.norm_angle(heading - tol),
                            angle_hi=geometry.norm_angle(heading + tol),
                            to_lid=to_lid,
                        )
                    )
    out: Dict[str, Tuple[NeighborEntry, ...]] = {}
    for rid, entries in tables.items():
        entries.sort(key=lambda e: (e.from_rid, e.from_lid, e.angle_lo))
        _check_disjoint(rid, entries)
        out[rid] = tuple(entries)
    return out


def _check_disjoint(rid: str, entries: Sequence[NeighborEntry]) -> None:
    by_origin: Dict[Tuple[str, int], List[NeighborEntry]] = {}
    for e in entries:
        by_origin.setdefault((e.from_rid, e.from_lid), []).append(e)
    for origin, group in by_origin.items():
        for i, a in enumerate(group):
            for b in group[i + 1:]:
                probes = (a.angle_lo, a.angle_hi, geometry.norm_angle((a.angle_lo + a.angle_hi) / 2))
                if any(b.contains(p) for p in probes):
                    raise ValidationError(
                        f"neighbor table for {rid}: intervals from origin {origin} overlap; "
                        "the embedding is too ambiguous for angle classification"
                    )


# --- whole-scenario validation ----------------------------------------------------


def validate(scn: Scenario) -> None:
    try:
        network = build_network(scn)
    except (ValueError, KeyError) as exc:
        raise ValidationError(f"network: {exc}") from None

    for i, v in enumerate(scn.vehicles):
        for j, (rid, lid) in enumerate(v.route):
            where = f"vehicles[{v.vid}].route[{j}]"
            if rid not in network.segments:
                raise ValidationError(f"{where}: unknown segment {rid!r}")
            try:
                network.segments[rid].lane(lid)
            except KeyError:
                raise ValidationError(f"{where}: segment {rid} has no lane {lid}") from None
            if j > 0:
                prev_rid, prev_lid = v.route[j - 1]
                if network.exit_intersection(prev_rid, prev_lid) != network.entry_intersection(rid, lid):
                    raise ValidationError(
                        f"{where}: leg does not connect; {prev_rid}.{prev_lid} discharges at "
                        f"{network.exit_intersection(prev_rid, prev_lid)} but {rid}.{lid} enters at "
                        f"{network.entry_intersection(rid, lid)}"
                    )

    for i, inc in enumerate(scn.incidents):
        where = f"incidents[{i}]"
        if inc.rid not in network.segments:
            raise ValidationError(f"{where}: unknown segment {inc.rid!r}")
        try:
            network.segments[inc.rid].lane(inc.lid)
        except KeyError:
            raise ValidationError(f"{where}: segment {inc.rid} has no lane {inc.lid}") from None
        if not (0.0 <= inc.location_m <= network.length(inc.rid)):
            raise ValidationError(
                f"{where}.location_m: {inc.location_m} outside [0, {network.length(inc.rid):.1f}]"
            )
        if inc.duration_s <= 0:
            raise ValidationError(f"{where}.duration_s: must be positive")

    # Every approach must be governed by exactly one phase of its intersection.
    for iid in network.intersections:
        apps = approaches_at(network, iid)
        if not apps:
            continue
        if iid not in scn.plans:
            raise ValidationError(f"plans: intersection {iid} has approaches but no plan")
        seen: Dict[str, int] = {}
        for pi, ph in enumerate(scn.plans[iid].phases):
            for a in ph.green_for:
                if a not in apps:
                    raise ValidationError(
                        f"plans.{iid}.phases[{pi}]: {a!r} is not an approach of {iid}"
                    )
                if a in seen:
                    raise ValidationError(f"plans.{iid}: approach {a!r} appears in two phases")
                seen[a] = pi
        missing = [a for a in apps if a not in seen]
        if missing:
            raise ValidationError(f"plans.{iid}: approaches {missing} appear in no phase")

    for iid in scn.plans:
        if iid not in network.intersections:
            raise ValidationError(f"plans: unknown intersection {iid!r}")
    for iid in scn.modes:
        if iid not in network.intersections:
            raise ValidationError(f"modes: unknown intersection {iid!r}")
    for i, (a, b) in enumerate(scn.lbs_links):
        for end in (a, b):
            if end not in network.intersections:
                raise ValidationError(f"lbs_links[{i}]: unknown intersection {end!r}")

    if scn.variant == "s1":
        generate_neighbor_tables(scn, network)


# --- hashing and bundled files -----------------------------------------------------


def config_hash(scn: Scenario) -> str:
    """Stable digest of everything that shapes a run (seed excluded)."""
    doc = asdict(scn)
    doc.pop("seed", None)
    payload = json.dumps(doc, sort_keys=True, default=_json_fallback)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _json_fallback(o: Any) -> Any:
    if isinstance(o, enum.Enum):
        return o.value
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot hash {type(o)!r}")


def bundled_names() -> List[str]:
    from importlib import resources

    root = resources.files("jamalert") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_bundled(name: str) -> Scenario:
    from importlib import resources

    path = resources.files("jamalert") / "scenarios" / f"{name}.yaml"
    if not path.is_file():
        raise ValidationError(f"no bundled scenario named {name!r}; have {bundled_names()}")
    return from_dict(yaml.safe_load(path.read_text(encoding="utf-8")))
