"""Credentials, pseudonyms, and envelope signing.

Every agent that signs holds its private keys inside an Hsm, which exposes a
sign operation and a monotone clock but never the key bytes. The certificate
authority registers long-term identities once and mints batches of pseudonym
certificates on request; pseudonym certificates carry nothing but the public
key and a validity window, so two pseudonyms of the same vehicle cannot be
linked from the material itself. Only the authority keeps the linkage map.

Signatures are Ed25519, which is deterministic: the same key and bytes always
produce the same signature, so simulation runs replay exactly. Key material is
drawn from the caller-supplied RNG stream for the same reason.

Verification order is fixed: certificate first, then signature, then
timestamp freshness. Receivers additionally keep a ReplayGuard: an envelope
byte-identical to one accepted within the freshness window is dropped even
though its timestamp still looks fresh.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from . import wire

DEFAULT_FRESHNESS_WINDOW_S = 5.0


class VerifyError(Exception):
    pass


class CertError(VerifyError):
    """Certificate missing, unknown issuer, bad CA signature, or expired."""


class SignatureError(VerifyError):
    """Payload signature does not verify under the certified key."""


class StaleTimestamp(VerifyError):
    """Envelope timestamp outside the freshness window."""


class DuplicateIdentity(Exception):
    pass


class AuthFailure(Exception):
    pass


class UnknownKeyRef(Exception):
    pass


class PseudonymPoolExhausted(Exception):
    pass


def _ts_bytes(ts: float) -> bytes:
    return wire.Writer().f64(ts).done()


@dataclass(frozen=True)
class Certificate:
    subject_key: bytes  # raw 32-byte Ed25519 public key
    issuer: str
    not_before: float
    not_after: float
    signature: bytes  # CA signature over body()

    def body(self) -> bytes:
        return (
            wire.Writer()
            .blob(self.subject_key)
            .text(self.issuer)
            .f64(self.not_before)
            .f64(self.not_after)
            .done()
        )

    def encode(self) -> bytes:
        return wire.Writer()._raw(self.body()).blob(self.signature).done()

    @staticmethod
    def decode(data: bytes) -> "Certificate":
        r = wire.Reader(data)
        cert = Certificate(r.blob(), r.text(), r.f64(), r.f64(), r.blob())
        r.expect_end()
        return cert

    @staticmethod
    def read_from(r: wire.Reader) -> "Certificate":
        return Certificate(r.blob(), r.text(), r.f64(), r.f64(), r.blob())


@dataclass(frozen=True)
class SignedEnvelope:
    """payload + timestamp, signed by the certificate's subject key.

    The signature covers payload || f64(timestamp).
    """

    payload: bytes
    timestamp: float
    signature: bytes
    certificate: Certificate

    def encode(self) -> bytes:
        w = wire.Writer()
        w.u32(len(self.payload))._raw(self.payload)
        w.f64(self.timestamp).blob(self.signature)
        cert = self.certificate.encode()
        w.u16(len(cert))._raw(cert)
        return w.done()

    @staticmethod
    def decode(data: bytes) -> "SignedEnvelope":
        r = wire.Reader(data)
        n = r.u32()
        payload = r._take(n)
        ts = r.f64()
        sig = r.blob()
        cn = r.u16()
        cert = Certificate.decode(r._take(cn))
        r.expect_end()
        return SignedEnvelope(payload, ts, sig, cert)


class Hsm:
    """Holds private keys and a monotone clock; key bytes never leave."""

    def __init__(self, clock: Callable[[], float], rng: random.Random):
        self._keys: Dict[str, Ed25519PrivateKey] = {}
        self._certs: Dict[str, Certificate] = {}
        self._clock = clock
        self._rng = rng
        self._last_ts = float("-inf")

    def new_key(self, ref: str) -> bytes:
        """Generate a key under ref and return its public raw bytes."""
        if ref in self._keys:
            raise ValueError(f"key ref {ref!r} already exists")
        key = Ed25519PrivateKey.from_private_bytes(self._rng.randbytes(32))
        self._keys[ref] = key
        return key.public_key().public_bytes_raw()

    def install_certificate(self, ref: str, cert: Certificate) -> None:
        if ref not in self._keys:
            raise UnknownKeyRef(ref)
        self._certs[ref] = cert

    def now(self) -> float:
        return self._clock()

    def sign(self, key_ref: str, payload: bytes) -> SignedEnvelope:
        """Timestamp and sign payload under key_ref."""
        if key_ref not in self._keys:
            raise UnknownKeyRef(key_ref)
        if key_ref not in self._certs:
            raise UnknownKeyRef(f"{key_ref} has no certificate installed")
        ts = self._clock()
        if ts < self._last_ts:
            raise AssertionError("HSM clock moved backwards")
        self._last_ts = ts
        sig = self._keys[key_ref].sign(payload + _ts_bytes(ts))
        return SignedEnvelope(payload, ts, sig, self._certs[key_ref])

    def sign_raw(self, key_ref: str, data: bytes) -> bytes:
        """Bare signature, used for authority challenges."""
        if key_ref not in self._keys:
            raise UnknownKeyRef(key_ref)
        return self._keys[key_ref].sign(data)


def hsm_sign(hsm: Hsm, key_ref: str, payload: bytes) -> SignedEnvelope:
    return hsm.sign(key_ref, payload)


@dataclass
class LongTermCredential:
    holder_id: str
    key_ref: str
    certificate: Certificate


@dataclass
class Pseudonym:
    index: int
    key_ref: str
    certificate: Certificate
    used: bool = False


class CertificateAuthority:
    """Registers vehicles and infrastructure, issues pseudonym batches."""

    def __init__(self, name: str, rng: random.Random, clock: Callable[[], float]):
        self.name = name
        self._rng = rng
        self._clock = clock
        self._key = Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))
        self._registry: Dict[str, LongTermCredential] = {}
        self._linkage: Dict[bytes, str] = {}  # pseudonym public key -> holder id

    def public_key_raw(self) -> bytes:
        return self._key.public_key().public_bytes_raw()

    def _issue_cert(self, subject_key: bytes, not_before: float, not_after: float) -> Certificate:
        body = (
            wire.Writer().blob(subject_key).text(self.name).f64(not_before).f64(not_after).done()
        )
        return Certificate(subject_key, self.name, not_before, not_after, self._key.sign(body))

    def register(self, holder_id: str, hsm: Hsm, lifetime_s: float = 1e9) -> LongTermCredential:
        """Create the long-term identity for holder_id, keys living in hsm."""
        if holder_id in self._registry:
            raise DuplicateIdentity(holder_id)
        ref = f"lt:{holder_id}"
        pub = hsm.new_key(ref)
        now = self._clock()
        cert = self._issue_cert(pub, now, now + lifetime_s)
        hsm.install_certificate(ref, cert)
        cred = LongTermCredential(holder_id, ref, cert)
        self._registry[holder_id] = cred
        return cred

    def issue_pseudonyms(
        self,
        credential: LongTermCredential,
        hsm: Hsm,
        count: int,
        lifetime_s: float = 1e9,
        start_index: int = 0,
    ) -> List[Pseudonym]:
        """Authenticate the holder, then mint count pseudonym certificates."""
        known = self._registry.get(credential.holder_id)
        if known is None:
            raise AuthFailure(f"{credential.holder_id} is not registered")
        challenge = self._rng.randbytes(16)
        try:
            proof = hsm.sign_raw(credential.key_ref, challenge)
            Ed25519PublicKey.from_public_bytes(known.certificate.subject_key).verify(
                proof, challenge
            )
        except (UnknownKeyRef, InvalidSignature) as exc:
            raise AuthFailure(f"challenge failed for {credential.holder_id}") from exc
        now = self._clock()
        batch: List[Pseudonym] = []
        for i in range(start_index, start_index + count):
            ref = f"ps:{credential.holder_id}:{i}"
            pub = hsm.new_key(ref)
            cert = self._issue_cert(pub, now, now + lifetime_s)
            hsm.install_certificate(ref, cert)
            self._linkage[pub] = credential.holder_id
            batch.append(Pseudonym(i, ref, cert))
        return batch

    def resolve(self, pseudonym_key: bytes) -> Optional[str]:
        """Authority-only linkage lookup."""
        return self._linkage.get(pseudonym_key)


def register_vehicle(ca: CertificateAuthority, vehicle_id: str, hsm: Hsm) -> LongTermCredential:
    return ca.register(vehicle_id, hsm)


def issue_pseudonyms(
    ca: CertificateAuthority,
    credential: LongTermCredential,
    hsm: Hsm,
    count: int,
    lifetime_s: float = 1e9,
    start_index: int = 0,
) -> List[Pseudonym]:
    return ca.issue_pseudonyms(credential, hsm, count, lifetime_s, start_index)


def rotate_pseudonym(pool: List[Pseudonym]) -> Pseudonym:
    """Pick the lowest-index unused pseudonym and mark it used."""
    for p in sorted(pool, key=lambda p: p.index):
        if not p.used:
            p.used = True
            return p
    raise PseudonymPoolExhausted(f"all {len(pool)} pseudonyms used")


class TrustAnchors:
    """Verifier state: trusted issuers plus the freshness window."""

    def __init__(self, anchors: Dict[str, bytes], freshness_window_s: float = DEFAULT_FRESHNESS_WINDOW_S):
        self._anchors = {name: Ed25519PublicKey.from_public_bytes(raw) for name, raw in anchors.items()}
        self.freshness_window_s = freshness_window_s
        self._cert_ok: Dict[bytes, bool] = {}  # cache keyed by encoded cert

    def _check_cert(self, cert: Certificate, now: float) -> None:
        anchor = self._anchors.get(cert.issuer)
        if anchor is None:
            raise CertError(f"unknown issuer {cert.issuer!r}")
        enc = cert.encode()
        ok = self._cert_ok.get(enc)
        if ok is None:
            try:
                anchor.verify(cert.signature, cert.body())
                ok = True
            except InvalidSignature:
                ok = False
            self._cert_ok[enc] = ok
        if not ok:
            raise CertError("certificate signature invalid")
        if not (cert.not_before <= now <= cert.not_after):
            raise CertError("certificate outside validity window")

    def verify(self, envelope: SignedEnvelope, now: float) -> bytes:
        """Return the payload, or raise CertError/SignatureError/StaleTimestamp."""
        self._check_cert(envelope.certificate, now)
        try:
            Ed25519PublicKey.from_public_bytes(envelope.certificate.subject_key).verify(
                envelope.signature, envelope.payload + _ts_bytes(envelope.timestamp)
            )
        except InvalidSignature as exc:
            raise SignatureError("payload signature invalid") from exc
        if abs(now - envelope.timestamp) > self.freshness_window_s:
            raise StaleTimestamp(f"timestamp {envelope.timestamp} vs now {now}")
        return envelope.payload


def verify_envelope(anchors: TrustAnchors, envelope: SignedEnvelope, now: float) -> bytes:
    return anchors.verify(envelope, now)


class ReplayGuard:
    """Duplicate suppression for accepted envelopes within the window."""

    def __init__(self, window_s: float = DEFAULT_FRESHNESS_WINDOW_S):
        self.window_s = window_s
        self._seen: Dict[bytes, float] = {}

    def seen(self, envelope: SignedEnvelope, now: float) -> bool:
        self._prune(now)
        return envelope.encode() in self._seen

    def remember(self, envelope: SignedEnvelope, now: float) -> None:
        self._prune(now)
        self._seen[envelope.encode()] = envelope.timestamp

    def _prune(self, now: float) -> None:
        if len(self._seen) < 64:
            return
        cutoff = now - self.window_s
        self._seen = {k: ts for k, ts in self._seen.items() if ts >= cutoff}
