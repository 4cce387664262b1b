"""Executable attacker behaviors.

Every adversary is built from a scenario entry and hooks into the world in one
of three ways: a promiscuous capture tap on the radio medium, scheduled events
of its own, or a standing effect such as a jam region. Injected frames are
tagged so the run summary can attribute each one to the check that rejected it
(or flag it as accepted, which the test suite treats as a finding).

Kinds:
  replay    capture status frames, re-send copies later; 'stale' copies wait
            past the freshness window, 'fast' copies arrive fractions of a
            second after the original.
  forge     fabricate status frames with bad credentials. 'uncertified' uses a
            certificate no authority signed; 'wrong_key' attaches a genuine
            captured certificate to a signature from the attacker's own key.
  dos_flood forged traffic at a fixed rate to grind against the verification
            budget of a mid-segment unit.
  jam       a circular radio-suppression region with a start and end time.
  botnet    registered vehicles that drive normally but report fabricated
            crawl values clustered around a chosen point.
"""

from __future__ import annotations

from typing import Any, Dict, List, Optional

from . import protocol
from .geometry import Point
from .identity import Certificate, Hsm, SignedEnvelope
from .protocol import Routestate, VehicleProtocol, VeStateS1, VeStateS2


def build_all(specs: List[Dict[str, Any]], world) -> List["Adversary"]:
    out: List[Adversary] = []
    for i, spec in enumerate(specs):
        kind = spec["kind"]
        cls = {
            "replay": ReplayAttacker,
            "forge": ForgeAttacker,
            "dos_flood": DosFlooder,
            "jam": Jammer,
            "botnet": Botnet,
        }[kind]
        out.append(cls(i, spec, world))
    return out


class Adversary:
    wants_capture = False

    def __init__(self, idx: int, spec: Dict[str, Any], world):
        self.idx = idx
        self.spec = spec

    def setup(self, world) -> None:
        pass

    def on_capture(self, world, env: SignedEnvelope, dest: Optional[str], now: float) -> None:
        pass

    def fire(self, world, now: float, action: str, payload: tuple) -> None:
        pass


class ReplayAttacker(Adversary):
    """Records frames addressed to a mid-segment unit and re-sends copies."""

    wants_capture = True

    def __init__(self, idx, spec, world):
        super().__init__(idx, spec, world)
        self.target = f"mrsu:{spec['rid']}"
        self.stale_left = int(spec.get("stale_count", 500))
        self.fast_left = int(spec.get("fast_count", 500))
        freshness = world.scn.timing.freshness_s
        self.stale_delay = float(spec.get("stale_delay_s", freshness + 2.0))
        self.fast_delay = float(spec.get("fast_delay_s", 0.2))
        self.start_s = float(spec.get("start_s", 0.0))

    def on_capture(self, world, env, dest, now):
        if dest != self.target or now < self.start_s:
            return
        if self.stale_left > 0:
            self.stale_left -= 1
            world.inject_status(
                now + self.stale_delay, dest, env, {"kind": "replay", "mode": "stale"}
            )
        if self.fast_left > 0:
            self.fast_left -= 1
            world.inject_status(
                now + self.fast_delay, dest, env, {"kind": "replay", "mode": "fast"}
            )


class _ForgeBase(Adversary):
    """Shared machinery: an attacker HSM and fabricated status envelopes."""

    wants_capture = True
    tag_kind = "forge"

    def __init__(self, idx, spec, world):
        super().__init__(idx, spec, world)
        self.rid = spec["rid"]
        self.target = f"mrsu:{self.rid}"
        self.count = int(spec.get("count", 1000))
        self.rate_per_s = float(spec.get("rate_per_s", 50.0))
        self.start_s = float(spec.get("start_s", 1.0))
        self.hsm = Hsm(lambda: world.clock, world.rng)
        own_pub = self.hsm.new_key("own")
        # A certificate nobody signed: the issuer field claims the real
        # authority but the signature bytes come from the attacker's key.
        fake_cert = Certificate(
            subject_key=own_pub,
            issuer="ca",
            not_before=0.0,
            not_after=1e9,
            signature=self.hsm.sign_raw("own", own_pub),
        )
        self.hsm.install_certificate("own", fake_cert)
        self.stolen_cert: Optional[Certificate] = None
        self._stolen_installed = False
        self._sent = 0

    def on_capture(self, world, env, dest, now):
        if self.stolen_cert is None and dest == self.target:
            self.stolen_cert = env.certificate

    def setup(self, world) -> None:
        period = 1.0 / self.rate_per_s
        for i in range(self.count):
            world.schedule(self.start_s + i * period, "adv", self.idx, "send", (i,))

    def _payload(self, world) -> bytes:
        if world.variant == "s1":
            msg: protocol.Message = VeStateS1(
                self.rid, 1, 200.0, 0.1, Routestate.ONROAD, protocol.VehicleType.NORMAL
            )
        else:
            msg = VeStateS2(
                self.rid, world.mrsu_pos[self.target], 0.1, Routestate.ONROAD,
                protocol.VehicleType.NORMAL,
            )
        return protocol.encode_message(msg)

    def _build(self, world, i: int) -> SignedEnvelope:
        use_stolen = i % 2 == 1 and self.stolen_cert is not None
        if use_stolen and not self._stolen_installed:
            # Genuine certificate, attacker's key: the signature check must
            # catch the mismatch even though the certificate verifies.
            self.hsm.new_key("stolen")
            self.hsm.install_certificate("stolen", self.stolen_cert)
            self._stolen_installed = True
        ref = "stolen" if use_stolen else "own"
        return self.hsm.sign(ref, self._payload(world))

    def fire(self, world, now, action, payload):
        if action != "send":
            return
        env = self._build(world, payload[0])
        self._sent += 1
        world.inject_status(now, self.target, env, {"kind": self.tag_kind})


class ForgeAttacker(_ForgeBase):
    tag_kind = "forge"


class DosFlooder(_ForgeBase):
    tag_kind = "dos"

    def __init__(self, idx, spec, world):
        spec = dict(spec)
        spec.setdefault("rate_per_s", 400.0)
        spec.setdefault("count", 2000)
        super().__init__(idx, spec, world)


class Jammer(Adversary):
    """Suppresses radio reception inside a circle for a time interval."""

    def __init__(self, idx, spec, world):
        super().__init__(idx, spec, world)
        center = spec.get("center")
        if isinstance(center, str):
            self.center: Point = world.mrsu_pos[center]
        else:
            self.center = (float(center[0]), float(center[1]))
        self.radius = float(spec.get("radius_m", 30.0))
        self.start_s = float(spec.get("start_s", 0.0))
        self.end_s = float(spec["end_s"])

    def setup(self, world) -> None:
        world.add_jam(self.center, self.radius, self.start_s, self.end_s)


class FakeReport:
    """Per-vehicle lie: fixed reported value and crawl speed on one segment."""

    def __init__(self, rid: str, value: float, speed: float, pos: Optional[Point]):
        self.rid = rid
        self.value = value
        self.speed = speed
        self.pos = pos

    def build(self, proto: VehicleProtocol, now: float) -> protocol.Message:
        if proto.variant == "s1":
            return VeStateS1(
                self.rid, proto.lid_estimate, self.value, self.speed,
                Routestate.ONROAD, proto.vtype,
            )
        assert self.pos is not None
        return VeStateS2(self.rid, self.pos, self.speed, Routestate.ONROAD, proto.vtype)


class Botnet(Adversary):
    """Colluding registered vehicles that fake a stationary cluster."""

    MEMBER_SPACING_M = 3.0

    def __init__(self, idx, spec, world):
        super().__init__(idx, spec, world)
        self.rid = spec["rid"]
        self.members: List[str] = [str(v) for v in spec["members"]]
        self.center = float(spec.get("center_m", 200.0))
        self.speed = float(spec.get("speed_mps", 0.2))

    def setup(self, world) -> None:
        n = len(self.members)
        for i, vid in enumerate(self.members):
            offset = (i - (n - 1) / 2.0) * self.MEMBER_SPACING_M
            pos = None
            if world.variant == "s2":
                seg = world.network.segments[self.rid]
                lid = min(l.lid for l in seg.lanes)
                pos = world.network.lane_point(self.rid, lid, self.center + offset)
            world.fake_reports[vid] = FakeReport(
                self.rid, self.center + offset, self.speed, pos
            )
        bucket = world.rec.attack_bucket("botnet")
        bucket["members"] = n
