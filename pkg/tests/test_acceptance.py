"""Acceptance gate: the eleven release checks, one test per criterion.

Each test prints a one-line measurement record (visible even without -s) and
then asserts the stated bound. Simulation runs are cached per scenario, seed,
and controller so scenario-level criteria share work; the whole module is
expected to finish inside the two-minute budget asserted by the final test.
"""

from __future__ import annotations

import dataclasses
import random
import subprocess
import sys
import time
from pathlib import Path
from typing import Dict, Optional, Tuple

import pytest
import yaml
from importlib import resources

from jamalert import detection, engine, identity, scenario
from jamalert.detection import DetectionParams
from tests.test_detection import build_records, finding_tuple, oracle_check, random_rows

_T0 = time.perf_counter()

SEEDS = (7, 8, 9, 10, 11)

# Alert chain budget: detection window + status period + broadcast period,
# plus one second of scheduling slack.
LATENCY_BOUND_S = 60.0 + 2.0 + 1.0 + 1.0

_CACHE: Dict[Tuple[str, Optional[int], Optional[str]], Tuple[engine.World, dict]] = {}


def bundle_run(name: str, seed: Optional[int] = None, controller: Optional[str] = None):
    key = (name, seed, controller)
    if key not in _CACHE:
        scn = scenario.load_bundled(name)
        _CACHE[key] = engine.run_scenario(scn, seed=seed, controller=controller)
    return _CACHE[key]


@pytest.fixture
def announce(capsys):
    def _line(text: str) -> None:
        with capsys.disabled():
            print(f"\n    {text}", end="")

    return _line


def _flip_one_bit(data: bytes, rng: random.Random) -> bytes:
    out = bytearray(data)
    bit = rng.randrange(len(out) * 8)
    out[bit // 8] ^= 1 << (bit % 8)
    return bytes(out)


def test_c01_crypto_round_trip(announce):
    rng = random.Random(101)
    clock = lambda: 50.0
    ca = identity.CertificateAuthority("ca", rng, clock)
    hsm = identity.Hsm(clock, rng)
    cred = ca.register("unit", hsm)
    anchors = identity.TrustAnchors({"ca": ca.public_key_raw()})

    t0 = time.perf_counter()
    accepted = rejected = 0
    for i in range(10_000):
        payload = rng.randbytes(rng.randint(1, 96))
        env = identity.hsm_sign(hsm, cred.key_ref, payload)
        assert identity.verify_envelope(anchors, env, 50.0) == payload
        accepted += 1
        if i % 2 == 0:
            mutant = dataclasses.replace(env, payload=_flip_one_bit(env.payload, rng))
        else:
            mutant = dataclasses.replace(env, signature=_flip_one_bit(env.signature, rng))
        with pytest.raises(identity.VerifyError):
            identity.verify_envelope(anchors, mutant, 50.0)
        rejected += 1
    elapsed = time.perf_counter() - t0
    announce(
        f"c01 {accepted}/10000 round trips accepted, {rejected}/10000 single-bit "
        f"mutants rejected, {elapsed:.1f} s (bound 10 s)"
    )
    assert accepted == 10_000 and rejected == 10_000
    assert elapsed < 10.0


def test_c02_replay_resistance(announce):
    _, summary = bundle_run("replay_storm")
    bucket = summary["attacks"]["replay"]
    announce(
        f"c02 replay_storm injected {bucket['injected']}, outcomes {bucket['outcomes']}, "
        f"alerts {summary['alerts']['total']}"
    )
    assert bucket["injected"] == 1000
    assert bucket["outcomes"] == {"duplicate": 500, "stale": 500}
    assert "accepted" not in bucket["outcomes"]
    assert summary["alerts"]["total"] == 0


def test_c03_forgery_resistance(announce):
    rng = random.Random(303)
    clock = lambda: 50.0
    ca = identity.CertificateAuthority("ca", rng, clock)
    hsm = identity.Hsm(clock, rng)
    cred = ca.register("alice", hsm)
    rogue_ca = identity.CertificateAuthority("rogue", rng, clock)
    rogue_hsm = identity.Hsm(clock, rng)
    rogue_cred = rogue_ca.register("mallory", rogue_hsm)
    anchors = identity.TrustAnchors({"ca": ca.public_key_raw()})

    outcomes = {"cert": 0, "signature": 0, "accepted": 0}
    for i in range(1000):
        payload = rng.randbytes(24)
        forged = identity.hsm_sign(rogue_hsm, rogue_cred.key_ref, payload)
        if i % 2 == 1:
            # keep mallory's signature but present alice's genuine certificate
            forged = dataclasses.replace(forged, certificate=cred.certificate)
        try:
            identity.verify_envelope(anchors, forged, 50.0)
            outcomes["accepted"] += 1
        except identity.CertError:
            outcomes["cert"] += 1
        except identity.SignatureError:
            outcomes["signature"] += 1
    announce(f"c03 1000 forgeries: {outcomes}")
    assert outcomes == {"cert": 500, "signature": 500, "accepted": 0}


def test_c04_detection_oracle_equivalence(announce):
    rng = random.Random(20260816)
    params = DetectionParams(n_min=3)
    t0 = time.perf_counter()
    trials = 1100
    hits_s1 = hits_s2 = 0
    for _ in range(trials):
        rows = random_rows(rng)
        expected = oracle_check(rows, params, now=120.0)
        got = finding_tuple(detection.check_anomaly_s1(build_records(rows), params, now=120.0))
        assert got == expected
        if expected is not None:
            hits_s1 += 1
        # the positioning variant keeps no lane estimate; records land on lane 0
        flat = {key: (0, samples) for key, (_, samples) in rows.items()}
        expected = oracle_check(flat, params, now=120.0)
        got = finding_tuple(detection.check_anomaly_s2(build_records(flat), params, now=120.0))
        assert got == expected
        if expected is not None:
            hits_s2 += 1
    elapsed = time.perf_counter() - t0
    announce(
        f"c04 {trials} caches per variant, positives s1={hits_s1} s2={hits_s2}, "
        f"{elapsed:.1f} s (bound 30 s)"
    )
    assert hits_s1 > 100 and hits_s2 > 100, "generator produced too few positives"
    assert elapsed < 30.0


def test_c05_end_to_end_latency_bound(announce):
    observed = []
    for seed in SEEDS:
        _, summary = bundle_run("accident1", seed=seed, controller="alert_enabled")
        lat = summary["latencies"]
        assert lat["incident_to_alert_s"] is not None
        assert lat["incident_to_alert_s"] <= LATENCY_BOUND_S
        assert lat["alert_to_command_s"] is not None
        assert lat["alert_to_command_s"] <= lat["boundary_gap_at_alert_s"] + 1e-9
        observed.append((seed, lat["incident_to_alert_s"], lat["alert_to_command_s"]))
    announce(
        f"c05 accident1 incident-to-alert {[o[1] for o in observed]} s "
        f"(bound {LATENCY_BOUND_S:.0f} s), alert-to-command {[o[2] for o in observed]} s"
    )


def test_c06_directional_improvement(announce):
    wins = []
    for seed in SEEDS:
        _, alert_run = bundle_run("accident1", seed=seed, controller="alert_enabled")
        _, fixed_run = bundle_run("accident1", seed=seed, controller="fixed")
        a = alert_run["vehicles"]["mean_delay_s"]
        f = fixed_run["vehicles"]["mean_delay_s"]
        assert a is not None and f is not None
        assert a < f, f"seed {seed}: alert_enabled {a} not below fixed {f}"
        wins.append(round(f - a, 2))
    announce(f"c06 accident1 mean-delay win by seed {dict(zip(SEEDS, wins))} s")


def test_c07_diversion_behavior(announce):
    world, summary = bundle_run("divert1")
    diverts = [c for c in world.rec.commands if c.kind == "divert"]
    assert diverts, "no diversion command was recorded"
    alert_times = {a.alert_id: a.time for a in world.rec.alerts}
    first = diverts[0]
    causes = [alert_times[x] for x in first.cause if x in alert_times]
    assert causes, "diversion has no traceable causing alert"
    hop_delay = first.time - max(causes)
    jam_rid = summary["incidents"][0]["rid"]
    seg = world.network.segments[jam_rid]
    endpoints = {seg.a, seg.b}
    assert {c.iid for c in diverts} <= endpoints
    assert hop_delay <= 1e-9, "diversion was not decided within one forwarding hop"
    logged = [e for e in world.rec.events if e.kind == "command" and e.subject == "divert"]
    assert logged
    announce(
        f"c07 divert1 diversion at t={first.time:.1f} s by {sorted(c.iid for c in diverts)}, "
        f"hop delay {hop_delay:.1f} s"
    )


def test_c08_controller_invariants(announce):
    total_checks = 0
    for name in scenario.bundled_names():
        _, summary = bundle_run(name)
        safety = summary["safety"]
        assert safety["violations"] == 0, f"{name}: conflicting greens observed"
        assert safety["checks"] > 0
        assert safety["cycle_bounds_ok"], f"{name}: cycle left [20, 240] s"
        assert safety["step_bounds_ok"], f"{name}: green adjustment left [4, 7] s"
        total_checks += safety["checks"]
    announce(
        f"c08 {len(scenario.bundled_names())} scenarios, {total_checks} safety checks, "
        f"0 violations, cycle and step bounds held"
    )


def test_c09_pseudonym_unlinkability(announce):
    _, summary = bundle_run("chain10")
    audit = summary["pseudonyms"]
    assert audit, "no per-vehicle key audit was recorded"
    owners: Dict[str, str] = {}
    for vid, rows in audit.items():
        keys = [key for _, key in rows]
        assert len(rows) == 10, f"{vid} crossed {len(rows)} segments, wanted 10"
        assert len(set(keys)) == len(keys), f"{vid} reused a key across segments"
        for key in keys:
            assert key not in owners, f"key shared by {owners.get(key)} and {vid}"
            owners[key] = vid
    assert summary["identity"]["reuse_violations"] == 0
    announce(
        f"c09 chain10: {len(audit)} vehicles x 10 segments, {len(owners)} distinct keys, "
        f"0 reuses"
    )


def test_c10_botnet_demonstration(announce):
    scn = scenario.load_bundled("botnet")
    quorum = scn.detection.n_min
    _, summary = bundle_run("botnet")
    assert summary["alerts"]["total"] >= 1
    assert summary["alerts"]["true"] == 0, "the raised alert should be false"

    doc = yaml.safe_load(
        (resources.files("jamalert") / "scenarios" / "botnet.yaml").read_text(encoding="utf-8")
    )
    members = doc["adversaries"][0]["members"]
    assert len(members) == quorum
    doc["adversaries"][0]["members"] = members[:-1]
    _, below = engine.run_scenario(scenario.from_dict(doc))
    assert below["alerts"]["total"] == 0
    announce(
        f"c10 botnet: {quorum} members -> {summary['alerts']['false']} false alert(s), "
        f"{quorum - 1} members -> none"
    )


def test_c11_determinism(tmp_path, announce):
    checked = []
    for name in scenario.bundled_names():
        pair = []
        for rep in (1, 2):
            out = tmp_path / f"{name}-{rep}"
            proc = subprocess.run(
                [
                    sys.executable,
                    "-m",
                    "jamalert",
                    "run",
                    "--scenario",
                    name,
                    "--out",
                    str(out),
                    "--no-figures",
                ],
                capture_output=True,
                text=True,
            )
            assert proc.returncode == 0, f"{name} rep {rep} failed: {proc.stderr}"
            pair.append(out)
        for fname in ("summary.json", "events.csv"):
            a = (pair[0] / fname).read_bytes()
            b = (pair[1] / fname).read_bytes()
            assert a == b, f"{name}: {fname} differs between identical runs"
        checked.append(name)
    elapsed = time.perf_counter() - _T0
    announce(
        f"c11 byte-identical summary.json and events.csv for {checked}; "
        f"acceptance wall time {elapsed:.0f} s (bound 120 s)"
    )
    assert elapsed < 120.0
