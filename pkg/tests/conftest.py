from __future__ import annotations

import random

import pytest

from jamalert import geometry, identity


class ManualClock:
    """Clock under test control."""

    def __init__(self, t: float = 0.0):
        self.t = t

    def __call__(self) -> float:
        return self.t

    def advance(self, dt: float) -> float:
        self.t += dt
        return self.t


@pytest.fixture
def clock() -> ManualClock:
    return ManualClock()


@pytest.fixture
def ca(clock):
    return identity.CertificateAuthority("ca", random.Random(1234), clock)


@pytest.fixture
def anchors(ca):
    return identity.TrustAnchors({"ca": ca.public_key_raw()})


def make_vehicle_identity(ca, clock, vid="v1", n_pseudonyms=4, seed=99):
    hsm = identity.Hsm(clock, random.Random(seed))
    cred = ca.register(vid, hsm)
    pool = ca.issue_pseudonyms(cred, hsm, n_pseudonyms)
    return hsm, cred, pool


@pytest.fixture
def straight_network() -> geometry.RoadNetwork:
    """Two east-west segments in a row, two lanes each."""
    return geometry.RoadNetwork(
        [
            geometry.Intersection("I0", 0.0, 0.0),
            geometry.Intersection("I1", 400.0, 0.0),
            geometry.Intersection("I2", 800.0, 0.0),
        ],
        [
            geometry.Segment(
                "R1",
                "I0",
                "I1",
                [geometry.Lane(1, "R", 13.9), geometry.Lane(2, "L", 13.9)],
            ),
            geometry.Segment(
                "R2",
                "I1",
                "I2",
                [geometry.Lane(1, "R", 13.9), geometry.Lane(2, "L", 13.9)],
            ),
        ],
    )
