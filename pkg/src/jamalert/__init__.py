"""Congestion alarms over signed vehicle-to-roadside messaging, plus a
deterministic simulator to exercise them.

The pieces compose bottom-up: geometry describes the road network, identity
handles credentials and signatures, protocol implements the vehicle and
roadside state machines, detection turns status reports into alerts, control
reschedules traffic lights, and engine ties everything to a discrete event
loop driven by scenario files.
"""

from .detection import CongestionAlert, DetectionParams, MainRsu
from .engine import World, run_scenario
from .geometry import Intersection, Lane, RoadNetwork, Segment
from .identity import CertificateAuthority, Hsm, TrustAnchors
from .protocol import RidStateS1, RidStateS2, RsuUnit, VehicleProtocol
from .scenario import Scenario, bundled_names, load_bundled, load_scenario

__version__ = "0.1.0"

__all__ = [
    "CongestionAlert",
    "CertificateAuthority",
    "DetectionParams",
    "Hsm",
    "Intersection",
    "Lane",
    "MainRsu",
    "RidStateS1",
    "RidStateS2",
    "RoadNetwork",
    "RsuUnit",
    "Scenario",
    "Segment",
    "TrustAnchors",
    "VehicleProtocol",
    "World",
    "bundled_names",
    "load_bundled",
    "load_scenario",
    "run_scenario",
    "__version__",
]
