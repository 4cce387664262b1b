"""Road network embedding and on-board path geometry.

Vehicles without positioning hardware keep a dead-reckoned path (wheel angle +
odometry integration). The chord of that path, measured against a fixed
reference horizontal, is what arrival classification and lane-change
classification operate on. Vehicles with positioning hardware instead test
their coordinates against per-segment and per-lane rectangles.

Angles are degrees. The reference horizontal is the global +x axis; headings
grow counter-clockwise and are normalised into [0, 360).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

LANE_WIDTH_M = 3.5
DEFAULT_ANGLE_TOLERANCE_DEG = 12.0

Point = Tuple[float, float]


class DegeneratePath(Exception):
    """Path has no usable chord (fewer than two points, or zero length)."""


class MissingLposData(Exception):
    """Positioning variant asked for lane strips the segment does not carry."""


def norm_angle(deg: float) -> float:
    """Normalise into [0, 360)."""
    a = math.fmod(deg, 360.0)
    if a < 0:
        a += 360.0
    # adding 360 to a tiny negative rounds to 360.0 exactly; fold it back
    return 0.0 if a >= 360.0 else a


def signed_angle(deg: float) -> float:
    """Normalise into (-180, 180]."""
    a = norm_angle(deg)
    return a - 360.0 if a > 180.0 else a


@dataclass
class PathRecord:
    """Dead-reckoned path since the last segment acceptance.

    points are time-ordered offsets from the reset point, expressed in the
    global frame (the initial heading is the vehicle's heading at reset).
    origin_ref names the (rid, lid) the vehicle was last accepted on, so
    arrival classification knows which table rows apply.
    """

    points: List[Point] = field(default_factory=lambda: [(0.0, 0.0)])
    origin_ref: Optional[Tuple[str, int]] = None
    heading_deg: float = 0.0
    gain: float = 1.0  # heading rate per unit wheel angle, 1/s


def record_path_step(path: PathRecord, wheel_angle_deg: float, speed: float, dt: float) -> None:
    """Advance the dead reckoning by one step.

    Heading integrates the wheel angle (heading += gain * wheel * dt), then the
    displacement speed*dt is laid along the updated heading. Prior points are
    never modified.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    path.heading_deg = norm_angle(path.heading_deg + path.gain * wheel_angle_deg * dt)
    x, y = path.points[-1]
    rad = math.radians(path.heading_deg)
    path.points.append((x + speed * dt * math.cos(rad), y + speed * dt * math.sin(rad)))


def path_heading_angle(path: PathRecord) -> float:
    """Angle in [0, 360) of the chord from first to last point.

    Raises DegeneratePath when no chord exists.
    """
    if len(path.points) < 2:
        raise DegeneratePath("need at least two points")
    x0, y0 = path.points[0]
    x1, y1 = path.points[-1]
    dx, dy = x1 - x0, y1 - y0
    if dx == 0.0 and dy == 0.0:
        raise DegeneratePath("zero-length chord")
    return norm_angle(math.degrees(math.atan2(dy, dx)))


@dataclass(frozen=True)
class NeighborEntry:
    """One row of a segment's arrival table.

    A vehicle whose last acceptance was (from_rid, from_lid) and whose path
    chord angle falls inside [angle_lo, angle_hi] is arriving on lane to_lid.
    The interval may wrap through 0.
    """

    from_rid: str
    from_lid: int
    angle_lo: float
    angle_hi: float
    to_lid: int

    def contains(self, angle_deg: float) -> bool:
        a = norm_angle(angle_deg)
        lo, hi = norm_angle(self.angle_lo), norm_angle(self.angle_hi)
        if lo <= hi:
            return lo <= a <= hi
        return a >= lo or a <= hi


def classify_arrival(path: PathRecord, entries: Sequence[NeighborEntry]) -> Optional[int]:
    """Match the path against a segment's arrival table.

    Returns the to_lid of the matching row, or None (unclassified) when the
    origin is unknown to the table or the chord angle fits no interval.
    """
    if path.origin_ref is None:
        return None
    angle = path_heading_angle(path)
    rid, lid = path.origin_ref
    for entry in entries:
        if entry.from_rid == rid and entry.from_lid == lid and entry.contains(angle):
            return entry.to_lid
    return None


class LaneShift(Enum):
    SAME = "same"
    MOVED_LEFT = "moved_left"
    MOVED_RIGHT = "moved_right"


def classify_lane_change(
    path: PathRecord, lane_axis_heading_deg: float, lane_width: float = LANE_WIDTH_M
) -> LaneShift:
    """Classify a within-segment manoeuvre from the path chord.

    A move to the left shows an obtuse chord angle relative to the lane axis
    together with a lateral offset of at least one lane width to the left; the
    mirror case (acute angle, lateral offset to the right) is a move to the
    right. Anything else counts as staying in lane.
    """
    angle = path_heading_angle(path)
    rel = signed_angle(angle - lane_axis_heading_deg)
    x0, y0 = path.points[0]
    x1, y1 = path.points[-1]
    chord = math.hypot(x1 - x0, y1 - y0)
    lateral = chord * math.sin(math.radians(rel))  # left of the axis is positive
    obtuse = 90.0 < abs(rel) < 180.0
    acute = 0.0 < abs(rel) < 90.0
    if lateral >= lane_width and obtuse:
        return LaneShift.MOVED_LEFT
    if lateral <= -lane_width and acute:
        return LaneShift.MOVED_RIGHT
    return LaneShift.SAME


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle, closed on all edges."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def contains(self, p: Point) -> bool:
        return self.x_min <= p[0] <= self.x_max and self.y_min <= p[1] <= self.y_max


def lane_from_position(
    pos: Point, rpos: Rect, lpos: Optional[Dict[int, Rect]]
) -> Optional[int]:
    """Resolve a position to a lane id using the segment's rectangles.

    Returns None when pos is outside the segment extent or inside no strip.
    When strips overlap on a boundary the lowest lane id wins. Raises
    MissingLposData when the segment carries no strips at all.
    """
    if not lpos:
        raise MissingLposData("segment has no lane strips")
    if not rpos.contains(pos):
        return None
    for lid in sorted(lpos):
        if lpos[lid].contains(pos):
            return lid
    return None


# --- network embedding -----------------------------------------------------


@dataclass(frozen=True)
class Intersection:
    iid: str
    x: float
    y: float


@dataclass(frozen=True)
class Lane:
    """Lane of a segment. direction 'R' runs end a -> end b, 'L' the reverse."""

    lid: int
    direction: str  # 'R' | 'L'
    speed_limit_mps: float


@dataclass
class Segment:
    rid: str
    a: str  # intersection id at one end
    b: str  # intersection id at the other end
    lanes: List[Lane]
    mrsu_id: str = ""

    def __post_init__(self) -> None:
        if not self.lanes:
            raise ValueError(f"segment {self.rid} has no lanes")
        seen = set()
        for lane in self.lanes:
            if lane.direction not in ("R", "L"):
                raise ValueError(f"segment {self.rid} lane {lane.lid}: bad direction")
            if lane.lid in seen:
                raise ValueError(f"segment {self.rid}: duplicate lane id {lane.lid}")
            seen.add(lane.lid)
        if not self.mrsu_id:
            self.mrsu_id = f"mrsu:{self.rid}"

    def lane(self, lid: int) -> Lane:
        for lane in self.lanes:
            if lane.lid == lid:
                return lane
        raise KeyError(f"segment {self.rid} has no lane {lid}")


class RoadNetwork:
    """Segments embedded in the plane between point intersections."""

    def __init__(self, intersections: Sequence[Intersection], segments: Sequence[Segment]):
        self.intersections: Dict[str, Intersection] = {i.iid: i for i in intersections}
        self.segments: Dict[str, Segment] = {}
        for seg in segments:
            if seg.a not in self.intersections or seg.b not in self.intersections:
                raise ValueError(f"segment {seg.rid} references unknown intersection")
            if seg.rid in self.segments:
                raise ValueError(f"duplicate segment id {seg.rid}")
            self.segments[seg.rid] = seg

    def _ends(self, seg: Segment) -> Tuple[Point, Point]:
        ia, ib = self.intersections[seg.a], self.intersections[seg.b]
        return (ia.x, ia.y), (ib.x, ib.y)

    def length(self, rid: str) -> float:
        pa, pb = self._ends(self.segments[rid])
        return math.hypot(pb[0] - pa[0], pb[1] - pa[1])

    def axis_heading(self, rid: str) -> float:
        """Heading of the a->b axis."""
        pa, pb = self._ends(self.segments[rid])
        return norm_angle(math.degrees(math.atan2(pb[1] - pa[1], pb[0] - pa[0])))

    def lane_heading(self, rid: str, lid: int) -> float:
        seg = self.segments[rid]
        axis = self.axis_heading(rid)
        return axis if seg.lane(lid).direction == "R" else norm_angle(axis + 180.0)

    def _lane_offset(self, seg: Segment, lid: int) -> float:
        # Perpendicular offset from the a->b axis, left positive. Each travel
        # direction keeps to its side; same-direction lanes stack outward.
        lane = seg.lane(lid)
        same_side = sorted(l.lid for l in seg.lanes if l.direction == lane.direction)
        rank = same_side.index(lid)
        off = LANE_WIDTH_M * (0.5 + rank)
        return off if lane.direction == "L" else -off

    def lane_point(self, rid: str, lid: int, dist: float) -> Point:
        """Global position at dist metres along the lane's travel direction."""
        seg = self.segments[rid]
        pa, pb = self._ends(seg)
        length = self.length(rid)
        ux, uy = (pb[0] - pa[0]) / length, (pb[1] - pa[1]) / length
        off = self._lane_offset(seg, lid)
        # left normal of the a->b axis
        nx, ny = -uy, ux
        if seg.lane(lid).direction == "R":
            sx, sy = pa[0] + nx * off, pa[1] + ny * off
            return (sx + ux * dist, sy + uy * dist)
        sx, sy = pb[0] + nx * off, pb[1] + ny * off
        return (sx - ux * dist, sy - uy * dist)

    def entry_intersection(self, rid: str, lid: int) -> str:
        seg = self.segments[rid]
        return seg.a if seg.lane(lid).direction == "R" else seg.b

    def exit_intersection(self, rid: str, lid: int) -> str:
        seg = self.segments[rid]
        return seg.b if seg.lane(lid).direction == "R" else seg.a

    def segment_rect(self, rid: str, margin: float = LANE_WIDTH_M) -> Rect:
        strips = self.lane_strips(rid)
        return Rect(
            min(s.x_min for s in strips.values()) - margin,
            min(s.y_min for s in strips.values()) - margin,
            max(s.x_max for s in strips.values()) + margin,
            max(s.y_max for s in strips.values()) + margin,
        )

    def lane_strips(self, rid: str) -> Dict[int, Rect]:
        """Per-lane rectangles, derived from the embedding.

        Only defined for (near) axis-aligned segments; other layouts must ship
        explicit rectangles with the scenario.
        """
        seg = self.segments[rid]
        axis = self.axis_heading(rid)
        if min(abs(signed_angle(axis - a)) for a in (0.0, 90.0, 180.0, 270.0)) > 0.5:
            raise MissingLposData(f"segment {rid} is not axis-aligned; provide strips explicitly")
        strips: Dict[int, Rect] = {}
        half = LANE_WIDTH_M / 2.0
        for lane in seg.lanes:
            p0 = self.lane_point(rid, lane.lid, 0.0)
            p1 = self.lane_point(rid, lane.lid, self.length(rid))
            strips[lane.lid] = Rect(
                min(p0[0], p1[0]) - half,
                min(p0[1], p1[1]) - half,
                max(p0[0], p1[0]) + half,
                max(p0[1], p1[1]) + half,
            )
        return strips
