"""The signed interchange envelope: the unit of every inter-port exchange.

An envelope travels between a delegated port (front-office side) and an
applicative port (back-office side) as canonical JSON: key-sorted at every
nesting level, compact separators, UTF-8, payload base64-encoded
(RFC 4648, padding kept). The canonical profile makes two things cheap:

- byte-identical re-serialization of an equal envelope, so signatures and
  audit diffs are stable,
- independent re-implementation, so a second canonicalizer can act as a
  byte-for-byte oracle in tests.

Signatures cover the canonical bytes of the envelope *without* its
``security`` block; signing therefore never changes the signed content,
and stripping the block and re-signing is always well-defined.

Top-level canonical keys (sorted): ``body``, ``correlation_id``,
``created_at``, ``destination``, ``envelope_id``, ``message_kind``,
``profile``, ``security``, ``sender``. Optional keys (``correlation_id``,
``security``) are omitted when absent.

Confidentiality is transport-level at the gateway; the envelope itself
stays inspectable so audit can trace it.
"""

from __future__ import annotations

import base64
import json
import re
import threading
import uuid
from dataclasses import dataclass, replace
from typing import Callable, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from ssc.errors import SscError
from ssc.util import iso_now

PROFILES = ("sync", "async_event", "async_process")
MESSAGE_KINDS = ("request", "response", "event", "fault")

_CREATED_AT_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}\.\d{3}Z$")


class EnvelopeError(SscError):
    pass


class InvalidAddress(EnvelopeError):
    pass


class MissingCorrelation(EnvelopeError):
    pass


class UnknownKey(EnvelopeError):
    pass


class DuplicateKey(EnvelopeError):
    pass


class AlreadySigned(EnvelopeError):
    pass


class MalformedEnvelope(EnvelopeError):
    pass


@dataclass(frozen=True)
class PortAddress:
    """Sender side of an envelope: which administration, which port."""

    admin_id: str
    port_id: str


@dataclass(frozen=True)
class ServiceAddress:
    """Destination side of an envelope: which administration, which service."""

    admin_id: str
    service_id: str


@dataclass(frozen=True)
class Body:
    content_type: str
    payload: bytes


@dataclass(frozen=True)
class SignatureBlock:
    signer_admin_id: str
    key_id: str
    algorithm: str
    signature: bytes


@dataclass(frozen=True)
class Envelope:
    envelope_id: str
    created_at: str
    sender: PortAddress
    destination: ServiceAddress
    profile: str
    message_kind: str
    correlation_id: Optional[str]
    body: Body
    security: Optional[SignatureBlock] = None


@dataclass(frozen=True)
class VerificationReport:
    """Outcome of verify_envelope. Failures are reported, never raised."""

    valid: bool
    reason: Optional[str] = None


# ---------------------------------------------------------------------------
# Signature algorithms (pluggable by identifier; ed25519 is the reference)
# ---------------------------------------------------------------------------


def _ed25519_sign(private_key: Ed25519PrivateKey, data: bytes) -> bytes:
    return private_key.sign(data)


def _ed25519_verify(public_key: bytes, signature: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
        return True
    except (InvalidSignature, ValueError):
        return False


SIGNATURE_ALGORITHMS: dict[str, tuple[Callable, Callable]] = {
    "ed25519": (_ed25519_sign, _ed25519_verify),
}


def generate_keypair() -> tuple[Ed25519PrivateKey, bytes]:
    """Fresh Ed25519 key pair; returns (private key, raw public key bytes)."""
    priv = Ed25519PrivateKey.generate()
    return priv, priv.public_key().public_bytes_raw()


# ---------------------------------------------------------------------------
# Key directory
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeyRecord:
    key_id: str
    public_key: bytes
    status: str  # active | revoked


class KeyDirectory:
    """Public keys per administration. key_id is unique per administration;
    revoked keys never verify again."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._admins: dict[str, dict[str, KeyRecord]] = {}

    def add_key(self, admin_id: str, key_id: str, public_key: bytes) -> None:
        if not admin_id or not key_id:
            raise InvalidAddress("admin_id and key_id must be non-empty")
        with self._lock:
            keys = self._admins.setdefault(admin_id, {})
            if key_id in keys:
                raise DuplicateKey(f"{admin_id} already has key {key_id}")
            keys[key_id] = KeyRecord(key_id, public_key, "active")

    def revoke_key(self, admin_id: str, key_id: str) -> None:
        with self._lock:
            keys = self._admins.get(admin_id, {})
            if key_id not in keys:
                raise UnknownKey(f"no key {key_id} for {admin_id}")
            keys[key_id] = replace(keys[key_id], status="revoked")

    def get(self, admin_id: str, key_id: str) -> Optional[KeyRecord]:
        with self._lock:
            return self._admins.get(admin_id, {}).get(key_id)

    def admins_holding(self, key_id: str) -> list[str]:
        with self._lock:
            return sorted(a for a, keys in self._admins.items() if key_id in keys)

    def has_admin(self, admin_id: str) -> bool:
        with self._lock:
            return admin_id in self._admins

    def snapshot(self) -> dict:
        with self._lock:
            return {
                admin: [
                    {"key_id": r.key_id, "public_key": r.public_key.hex(), "status": r.status}
                    for r in sorted(keys.values(), key=lambda r: r.key_id)
                ]
                for admin, keys in sorted(self._admins.items())
            }

    def load(self, snapshot: dict) -> None:
        with self._lock:
            for admin, entries in snapshot.items():
                keys = self._admins.setdefault(admin, {})
                for entry in entries:
                    keys[entry["key_id"]] = KeyRecord(
                        entry["key_id"], bytes.fromhex(entry["public_key"]), entry["status"]
                    )


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def build_envelope(
    sender: PortAddress,
    destination: ServiceAddress,
    profile: str,
    kind: str,
    payload: bytes | str,
    *,
    content_type: str = "application/octet-stream",
    correlation_id: Optional[str] = None,
) -> Envelope:
    """Fresh unsigned envelope. Responses and faults must carry a correlation."""
    for label, value in (
        ("sender.admin_id", sender.admin_id),
        ("sender.port_id", sender.port_id),
        ("destination.admin_id", destination.admin_id),
        ("destination.service_id", destination.service_id),
    ):
        if not value:
            raise InvalidAddress(f"{label} must be non-empty")
    if profile not in PROFILES:
        raise MalformedEnvelope(f"profile: {profile!r} not one of {PROFILES}")
    if kind not in MESSAGE_KINDS:
        raise MalformedEnvelope(f"message_kind: {kind!r} not one of {MESSAGE_KINDS}")
    if kind in ("response", "fault") and not correlation_id:
        raise MissingCorrelation(f"message_kind={kind} requires a correlation_id")
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    return Envelope(
        envelope_id=str(uuid.uuid4()),
        created_at=iso_now(),
        sender=sender,
        destination=destination,
        profile=profile,
        message_kind=kind,
        correlation_id=correlation_id,
        body=Body(content_type=content_type, payload=payload),
    )


# ---------------------------------------------------------------------------
# Canonical encoding
# ---------------------------------------------------------------------------


def envelope_to_dict(envelope: Envelope, *, include_security: bool = True) -> dict:
    out: dict = {
        "body": {
            "content_type": envelope.body.content_type,
            "payload": base64.b64encode(envelope.body.payload).decode("ascii"),
        },
        "created_at": envelope.created_at,
        "destination": {
            "admin_id": envelope.destination.admin_id,
            "service_id": envelope.destination.service_id,
        },
        "envelope_id": envelope.envelope_id,
        "message_kind": envelope.message_kind,
        "profile": envelope.profile,
        "sender": {
            "admin_id": envelope.sender.admin_id,
            "port_id": envelope.sender.port_id,
        },
    }
    if envelope.correlation_id is not None:
        out["correlation_id"] = envelope.correlation_id
    if include_security and envelope.security is not None:
        sec = envelope.security
        out["security"] = {
            "algorithm": sec.algorithm,
            "key_id": sec.key_id,
            "signature": base64.b64encode(sec.signature).decode("ascii"),
            "signer_admin_id": sec.signer_admin_id,
        }
    return out


def _canonical_json(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def canonical_bytes(envelope: Envelope) -> bytes:
    """Deterministic signing form: canonical JSON with `security` excluded."""
    return _canonical_json(envelope_to_dict(envelope, include_security=False))


def serialize_envelope(envelope: Envelope) -> bytes:
    """Wire form: canonical JSON including `security` when present."""
    return _canonical_json(envelope_to_dict(envelope))


# ---------------------------------------------------------------------------
# Parsing (tolerant reader: unknown fields ignored, never preserved)
# ---------------------------------------------------------------------------


def _require(obj: dict, field: str, where: str = "") -> object:
    if field not in obj:
        raise MalformedEnvelope(f"{where}{field}: missing")
    return obj[field]


def _require_str(obj: dict, field: str, where: str = "") -> str:
    value = _require(obj, field, where)
    if not isinstance(value, str):
        raise MalformedEnvelope(f"{where}{field}: expected string, got {type(value).__name__}")
    return value


def _require_obj(obj: dict, field: str) -> dict:
    value = _require(obj, field)
    if not isinstance(value, dict):
        raise MalformedEnvelope(f"{field}: expected object, got {type(value).__name__}")
    return value


def envelope_from_dict(obj: dict) -> Envelope:
    sender = _require_obj(obj, "sender")
    destination = _require_obj(obj, "destination")
    body = _require_obj(obj, "body")

    profile = _require_str(obj, "profile")
    if profile not in PROFILES:
        raise MalformedEnvelope(f"profile: {profile!r} not one of {PROFILES}")
    kind = _require_str(obj, "message_kind")
    if kind not in MESSAGE_KINDS:
        raise MalformedEnvelope(f"message_kind: {kind!r} not one of {MESSAGE_KINDS}")

    created_at = _require_str(obj, "created_at")
    if not _CREATED_AT_RE.match(created_at):
        raise MalformedEnvelope(f"created_at: {created_at!r} is not UTC ISO-8601 with milliseconds")

    correlation_id = obj.get("correlation_id")
    if correlation_id is not None and not isinstance(correlation_id, str):
        raise MalformedEnvelope("correlation_id: expected string or absent")
    if kind in ("response", "fault") and not correlation_id:
        raise MissingCorrelation(f"message_kind={kind} requires a correlation_id")

    payload_b64 = _require_str(body, "payload", "body.")
    try:
        payload = base64.b64decode(payload_b64.encode("ascii"), validate=True)
    except Exception as exc:
        raise MalformedEnvelope(f"body.payload: invalid base64 ({exc})") from exc

    security = None
    raw_security = obj.get("security")
    if raw_security is not None:
        if not isinstance(raw_security, dict):
            raise MalformedEnvelope("security: expected object or absent")
        sig_b64 = _require_str(raw_security, "signature", "security.")
        try:
            signature = base64.b64decode(sig_b64.encode("ascii"), validate=True)
        except Exception as exc:
            raise MalformedEnvelope(f"security.signature: invalid base64 ({exc})") from exc
        security = SignatureBlock(
            signer_admin_id=_require_str(raw_security, "signer_admin_id", "security."),
            key_id=_require_str(raw_security, "key_id", "security."),
            algorithm=_require_str(raw_security, "algorithm", "security."),
            signature=signature,
        )

    for label, value in (
        ("sender.admin_id", sender.get("admin_id")),
        ("sender.port_id", sender.get("port_id")),
        ("destination.admin_id", destination.get("admin_id")),
        ("destination.service_id", destination.get("service_id")),
    ):
        if not isinstance(value, str) or not value:
            raise MalformedEnvelope(f"{label}: missing or empty")

    return Envelope(
        envelope_id=_require_str(obj, "envelope_id"),
        created_at=created_at,
        sender=PortAddress(sender["admin_id"], sender["port_id"]),
        destination=ServiceAddress(destination["admin_id"], destination["service_id"]),
        profile=profile,
        message_kind=kind,
        correlation_id=correlation_id,
        body=Body(_require_str(body, "content_type", "body."), payload),
        security=security,
    )


def parse_envelope(data: bytes) -> Envelope:
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedEnvelope(f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedEnvelope(f"top level: expected object, got {type(obj).__name__}")
    return envelope_from_dict(obj)


# ---------------------------------------------------------------------------
# Signing and verification
# ---------------------------------------------------------------------------


def sign_envelope(
    envelope: Envelope,
    private_key: Ed25519PrivateKey,
    signer_admin_id: str,
    key_id: str,
    directory: KeyDirectory,
    *,
    algorithm: str = "ed25519",
) -> Envelope:
    """Attach a SignatureBlock over the envelope's canonical bytes.

    The key must be active in the directory and must match the private key
    handed in; the envelope is otherwise returned unchanged.
    """
    if envelope.security is not None:
        raise AlreadySigned(f"envelope {envelope.envelope_id} already carries a signature")
    if algorithm not in SIGNATURE_ALGORITHMS:
        raise UnknownKey(f"unsupported algorithm {algorithm!r}")
    record = directory.get(signer_admin_id, key_id)
    if record is None or record.status != "active":
        raise UnknownKey(f"no active key {key_id} for {signer_admin_id}")
    if record.public_key != private_key.public_key().public_bytes_raw():
        raise UnknownKey(f"private key does not match directory entry {signer_admin_id}/{key_id}")
    sign, _ = SIGNATURE_ALGORITHMS[algorithm]
    signature = sign(private_key, canonical_bytes(envelope))
    return replace(
        envelope,
        security=SignatureBlock(
            signer_admin_id=signer_admin_id,
            key_id=key_id,
            algorithm=algorithm,
            signature=signature,
        ),
    )


def verify_envelope(envelope: Envelope, directory: KeyDirectory) -> VerificationReport:
    """valid ⇔ signature present, signer consistent, key active, bytes match.

    Never raises: verification is a query and failures carry a reason.
    The security block itself is outside the signed bytes, so the claimed
    signer is cross-checked against the directory and the sender.
    """
    sec = envelope.security
    if sec is None:
        return VerificationReport(False, "missing_signature")
    if sec.signer_admin_id != envelope.sender.admin_id:
        return VerificationReport(False, "signer_mismatch")
    if sec.algorithm not in SIGNATURE_ALGORITHMS:
        return VerificationReport(False, "unsupported_algorithm")
    record = directory.get(sec.signer_admin_id, sec.key_id)
    if record is None:
        if directory.admins_holding(sec.key_id):
            return VerificationReport(False, "signer_mismatch")
        return VerificationReport(False, "unknown_key")
    if record.status == "revoked":
        return VerificationReport(False, "revoked_key")
    _, verify = SIGNATURE_ALGORITHMS[sec.algorithm]
    if not verify(record.public_key, sec.signature, canonical_bytes(envelope)):
        return VerificationReport(False, "bad_signature")
    return VerificationReport(True)
