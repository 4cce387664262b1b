from __future__ import annotations

import random

import pytest

from jamalert import identity, wire
from tests.conftest import ManualClock, make_vehicle_identity


def make_signer(ca, clock, holder="unit-x", seed=5):
    hsm = identity.Hsm(clock, random.Random(seed))
    cred = ca.register(holder, hsm)
    return hsm, cred


def test_sign_verify_round_trip(ca, anchors, clock):
    hsm, cred = make_signer(ca, clock)
    clock.t = 10.0
    env = hsm.sign(cred.key_ref, b"payload")
    assert anchors.verify(env, 10.0) == b"payload"
    # Inside the freshness window both ways.
    assert anchors.verify(env, 14.9) == b"payload"
    assert anchors.verify(env, 5.1) == b"payload"


def test_envelope_encode_decode(ca, anchors, clock):
    hsm, cred = make_signer(ca, clock)
    clock.t = 3.0
    env = hsm.sign(cred.key_ref, b"\x01\x02")
    back = identity.SignedEnvelope.decode(env.encode())
    assert back == env
    assert anchors.verify(back, 3.0) == b"\x01\x02"


def test_tampered_payload_rejected(ca, anchors, clock):
    hsm, cred = make_signer(ca, clock)
    env = hsm.sign(cred.key_ref, b"genuine")
    forged = identity.SignedEnvelope(b"forged!", env.timestamp, env.signature, env.certificate)
    with pytest.raises(identity.SignatureError):
        anchors.verify(forged, 0.0)


def test_tampered_timestamp_rejected(ca, anchors, clock):
    hsm, cred = make_signer(ca, clock)
    env = hsm.sign(cred.key_ref, b"genuine")
    shifted = identity.SignedEnvelope(env.payload, env.timestamp + 1.0, env.signature, env.certificate)
    with pytest.raises(identity.SignatureError):
        anchors.verify(shifted, 1.0)


def test_stale_timestamp_rejected(ca, anchors, clock):
    hsm, cred = make_signer(ca, clock)
    clock.t = 100.0
    env = hsm.sign(cred.key_ref, b"x")
    with pytest.raises(identity.StaleTimestamp):
        anchors.verify(env, 105.1)
    with pytest.raises(identity.StaleTimestamp):
        anchors.verify(env, 94.9)


def test_unknown_issuer_rejected(clock):
    other_ca = identity.CertificateAuthority("rogue", random.Random(7), clock)
    hsm, cred = make_signer(other_ca, clock, holder="r1")
    env = hsm.sign(cred.key_ref, b"x")
    anchors = identity.TrustAnchors({"ca": other_ca.public_key_raw()})
    with pytest.raises(identity.CertError):
        anchors.verify(env, 0.0)


def test_self_signed_certificate_rejected(ca, anchors, clock):
    # An attacker mints a key and signs their own cert naming the real issuer.
    hsm = identity.Hsm(clock, random.Random(11))
    pub = hsm.new_key("k")
    body = wire.Writer().blob(pub).text("ca").f64(0.0).f64(1e9).done()
    fake_cert = identity.Certificate(pub, "ca", 0.0, 1e9, hsm.sign_raw("k", body))
    hsm.install_certificate("k", fake_cert)
    env = hsm.sign("k", b"boo")
    with pytest.raises(identity.CertError):
        anchors.verify(env, 0.0)


def test_expired_certificate_rejected(ca, anchors, clock):
    hsm = identity.Hsm(clock, random.Random(13))
    cred = ca.register("short", hsm, lifetime_s=10.0)
    clock.t = 5.0
    env = hsm.sign(cred.key_ref, b"x")
    assert anchors.verify(env, 5.0) == b"x"
    clock.t = 11.0
    late = hsm.sign(cred.key_ref, b"x")
    with pytest.raises(identity.CertError):
        anchors.verify(late, 11.0)


def test_wrong_key_signature_attributed_to_signature(ca, anchors, clock):
    # Genuine certificate, signature from a different key: the certificate
    # checks out, the payload signature must not.
    victim_hsm, victim_cred = make_signer(ca, clock, holder="victim", seed=21)
    attacker = identity.Hsm(clock, random.Random(22))
    attacker.new_key("a")
    attacker.install_certificate("a", victim_cred.certificate)
    env = attacker.sign("a", b"spoof")
    with pytest.raises(identity.SignatureError):
        anchors.verify(env, 0.0)


def test_hsm_refuses_unknown_ref(clock):
    hsm = identity.Hsm(clock, random.Random(1))
    with pytest.raises(identity.UnknownKeyRef):
        hsm.sign("nope", b"x")
    hsm.new_key("k")
    with pytest.raises(identity.UnknownKeyRef):
        hsm.sign("k", b"x")  # no certificate installed yet


def test_hsm_equal_timestamps_allowed(ca, clock):
    hsm, cred = make_signer(ca, clock)
    a = hsm.sign(cred.key_ref, b"one")
    b = hsm.sign(cred.key_ref, b"two")
    assert a.timestamp == b.timestamp


def test_hsm_clock_must_not_go_backwards(ca, clock):
    hsm, cred = make_signer(ca, clock)
    clock.t = 10.0
    hsm.sign(cred.key_ref, b"x")
    clock.t = 9.0
    with pytest.raises(AssertionError):
        hsm.sign(cred.key_ref, b"y")


def test_duplicate_registration_rejected(ca, clock):
    hsm = identity.Hsm(clock, random.Random(2))
    ca.register("twin", hsm)
    with pytest.raises(identity.DuplicateIdentity):
        ca.register("twin", hsm)


def test_pseudonym_issuance_and_rotation(ca, clock):
    hsm, cred, pool = make_vehicle_identity(ca, clock, vid="rota", n_pseudonyms=3)
    assert [p.index for p in pool] == [0, 1, 2]
    picked = [identity.rotate_pseudonym(pool) for _ in range(3)]
    assert [p.index for p in picked] == [0, 1, 2]
    with pytest.raises(identity.PseudonymPoolExhausted):
        identity.rotate_pseudonym(pool)


def test_pseudonym_keys_are_distinct(ca, clock):
    hsm, cred, pool = make_vehicle_identity(ca, clock, vid="keys", n_pseudonyms=8)
    keys = {p.certificate.subject_key for p in pool}
    assert len(keys) == 8
    assert cred.certificate.subject_key not in keys


def test_pseudonym_linkage_is_authority_only(ca, anchors, clock):
    hsm, cred, pool = make_vehicle_identity(ca, clock, vid="veil")
    env = hsm.sign(pool[0].key_ref, b"status")
    # The envelope exposes only the pseudonym certificate.
    assert env.certificate.subject_key == pool[0].certificate.subject_key
    assert ca.resolve(env.certificate.subject_key) == "veil"
    assert ca.resolve(b"\x00" * 32) is None


def test_issuance_requires_holder_key(ca, clock):
    hsm = identity.Hsm(clock, random.Random(3))
    cred = ca.register("auth", hsm)
    stranger = identity.Hsm(clock, random.Random(4))
    with pytest.raises(identity.AuthFailure):
        ca.issue_pseudonyms(cred, stranger, 2)


def test_private_key_bytes_never_serialized(ca, clock):
    """No secret scalar shows up in any byte stream we emit."""
    rng = random.Random(31337)
    hsm = identity.Hsm(clock, rng)
    # Reproduce the private bytes the HSM drew, via the same generator state.
    probe_rng = random.Random(31337)
    cred = ca.register("leakcheck", hsm)
    secret = probe_rng.randbytes(32)
    pool = ca.issue_pseudonyms(cred, hsm, 2)
    secrets = [secret] + [probe_rng.randbytes(32) for _ in pool]
    blobs = [hsm.sign(cred.key_ref, b"status").encode()]
    blobs.extend(hsm.sign(p.key_ref, b"status").encode() for p in pool)
    blobs.append(cred.certificate.encode())
    blobs.extend(p.certificate.encode() for p in pool)
    joined = b"".join(blobs)
    for s in secrets:
        assert s not in joined
        assert s[:16] not in joined


def test_replay_guard_remembers_within_window(ca, clock):
    hsm, cred = make_signer(ca, clock)
    guard = identity.ReplayGuard(window_s=5.0)
    clock.t = 50.0
    env = hsm.sign(cred.key_ref, b"x")
    assert not guard.seen(env, 50.0)
    guard.remember(env, 50.0)
    assert guard.seen(env, 51.0)


def test_replay_guard_prunes_old_entries(ca, clock):
    hsm, cred = make_signer(ca, clock)
    guard = identity.ReplayGuard(window_s=5.0)
    envs = []
    for i in range(70):
        clock.t = float(i)
        envs.append(hsm.sign(cred.key_ref, b"%d" % i))
        guard.remember(envs[-1], clock.t)
    # Old envelopes fell out once the table grew past its working size.
    assert not guard.seen(envs[0], 100.0)


def test_certificate_cache_never_flips(ca, anchors, clock):
    hsm, cred = make_signer(ca, clock)
    env = hsm.sign(cred.key_ref, b"x")
    assert anchors.verify(env, 0.0)
    # Same cert again: the memoised path must agree with the first result.
    env2 = hsm.sign(cred.key_ref, b"y")
    assert anchors.verify(env2, 0.0)
