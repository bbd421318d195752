"""Accounts, weak/strong authentication, SSO tokens, authorization, profiles.

Weak authentication is password-based (scrypt, salted). Strong
authentication signs a one-time server nonce with the user's registered
Ed25519 key — the software stand-in for signature cards. Either path
yields a self-contained SSO token signed by the framework key: any
endpoint and any portal can validate it statelessly until it expires.

Profiles are split in two keyspaces: the static registry part (identity
attributes, mutated only by registration) and dynamic preferences (freely
updatable). No operation ever returns or logs a password, hash, or
private key.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from ssc.audit import AuditLog
from ssc.envelope import _ed25519_verify
from ssc.errors import SscError
from ssc.util import iso_now, new_id

AUTH_LEVELS = {"none": 0, "weak": 1, "strong": 2}

DEFAULT_TOKEN_TTL_S = 8 * 3600
CHALLENGE_TTL_S = 300
MIN_PASSWORD_LEN = 8

# scrypt cost parameters; modest defaults keep the test envelope tight while
# staying memory-hard. Production deployments raise n via config.
SCRYPT_N = 2**14
SCRYPT_R = 8
SCRYPT_P = 1


class IdentityError(SscError):
    pass


class DuplicateUser(IdentityError):
    pass


class WeakPassword(IdentityError):
    pass


class UnknownUser(IdentityError):
    pass


class BadCredential(IdentityError):
    pass


class NoStrongCredential(IdentityError):
    pass


class InvalidToken(IdentityError):
    pass


class ExpiredToken(IdentityError):
    pass


class StaticAttributeViolation(IdentityError):
    pass


@dataclass(frozen=True)
class SsoToken:
    token_id: str
    subject: str
    level: str  # weak | strong
    issued_at: str
    expires_at: str


@dataclass(frozen=True)
class AuthzDecision:
    allowed: bool
    reason: Optional[str] = None  # level | expired | invalid | anonymous
    user_id: Optional[str] = None
    level: str = "none"


class _Account:
    def __init__(self, user_id, password_hash, public_key, roles, static_profile, dynamic_preferences):
        self.user_id = user_id
        self.password_hash = password_hash  # "scrypt$n$r$p$salt_hex$hash_hex"
        self.public_key: Optional[bytes] = public_key
        self.roles: set[str] = set(roles)
        self.static_profile: dict[str, str] = dict(static_profile)
        self.dynamic_preferences: dict[str, str] = dict(dynamic_preferences)


def _hash_password(password: str, *, salt: Optional[bytes] = None) -> str:
    salt = salt if salt is not None else os.urandom(16)
    digest = hashlib.scrypt(
        password.encode("utf-8"), salt=salt, n=SCRYPT_N, r=SCRYPT_R, p=SCRYPT_P, dklen=32
    )
    return f"scrypt${SCRYPT_N}${SCRYPT_R}${SCRYPT_P}${salt.hex()}${digest.hex()}"


def _check_password(password: str, stored: str) -> bool:
    try:
        _, n, r, p, salt_hex, digest_hex = stored.split("$")
        digest = hashlib.scrypt(
            password.encode("utf-8"), salt=bytes.fromhex(salt_hex),
            n=int(n), r=int(r), p=int(p), dklen=32,
        )
        import hmac as _hmac

        return _hmac.compare_digest(digest.hex(), digest_hex)
    except (ValueError, TypeError):
        return False


def _b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def _unb64url(text: str) -> bytes:
    padding = "=" * (-len(text) % 4)
    return base64.urlsafe_b64decode(text + padding)


def encode_token(token: SsoToken, framework_key: Ed25519PrivateKey) -> str:
    payload = json.dumps(
        {
            "expires_at": token.expires_at,
            "issued_at": token.issued_at,
            "level": token.level,
            "subject": token.subject,
            "token_id": token.token_id,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    signature = framework_key.sign(payload)
    return _b64url(payload) + "." + _b64url(signature)


def decode_token(text: str, framework_public_key: bytes, *, now: Optional[str] = None) -> SsoToken:
    """Stateless validation: signature intact and not expired, or it raises."""
    try:
        payload_b64, sig_b64 = text.split(".")
        payload = _unb64url(payload_b64)
        signature = _unb64url(sig_b64)
    except (ValueError, TypeError) as exc:
        raise InvalidToken(f"unparsable token: {exc}") from exc
    if not _ed25519_verify(framework_public_key, signature, payload):
        raise InvalidToken("signature check failed")
    try:
        obj = json.loads(payload.decode("utf-8"))
        token = SsoToken(
            token_id=obj["token_id"],
            subject=obj["subject"],
            level=obj["level"],
            issued_at=obj["issued_at"],
            expires_at=obj["expires_at"],
        )
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise InvalidToken(f"bad token payload: {exc}") from exc
    if token.level not in ("weak", "strong"):
        raise InvalidToken(f"bad token level {token.level!r}")
    if (now or iso_now()) >= token.expires_at:
        raise ExpiredToken(f"token {token.token_id} expired at {token.expires_at}")
    return token


class IdentityService:
    def __init__(
        self,
        framework_key: Ed25519PrivateKey,
        *,
        audit: Optional[AuditLog] = None,
        store_append: Optional[Callable[[dict], None]] = None,
        token_ttl_s: float = DEFAULT_TOKEN_TTL_S,
    ) -> None:
        self._key = framework_key
        self._public = framework_key.public_key().public_bytes_raw()
        self._audit = audit
        self._store = store_append
        self._ttl_s = token_ttl_s
        self._lock = threading.Lock()
        self._accounts: dict[str, _Account] = {}
        self._challenges: dict[str, tuple[str, bytes, float]] = {}  # id -> (user, nonce, deadline)

    def _persist(self, record: dict) -> None:
        if self._store is not None:
            self._store(record)

    def _audit_auth(self, user_id: str, outcome: str, detail: str) -> None:
        if self._audit is not None:
            self._audit.record("auth_event", None, user_id, user_id, outcome, detail)

    # -- accounts -------------------------------------------------------------

    def register_user(
        self,
        user_id: str,
        password: str,
        public_key: Optional[bytes] = None,
        roles: Optional[set[str]] = None,
        static_profile: Optional[dict] = None,
    ) -> str:
        if not user_id:
            raise IdentityError("user_id must be non-empty")
        if len(password) < MIN_PASSWORD_LEN:
            raise WeakPassword(f"password shorter than {MIN_PASSWORD_LEN} characters")
        account = _Account(
            user_id, _hash_password(password), public_key, roles or set(), static_profile or {}, {}
        )
        with self._lock:
            if user_id in self._accounts:
                raise DuplicateUser(user_id)
            self._persist(
                {
                    "type": "user_registered",
                    "user_id": user_id,
                    "password_hash": account.password_hash,
                    "public_key": public_key.hex() if public_key else None,
                    "roles": sorted(account.roles),
                    "static_profile": account.static_profile,
                }
            )
            self._accounts[user_id] = account
        self._audit_auth(user_id, "ok", "registered")
        return user_id

    def _account(self, user_id: str) -> _Account:
        with self._lock:
            account = self._accounts.get(user_id)
        if account is None:
            raise UnknownUser(user_id)
        return account

    def has_user(self, user_id: str) -> bool:
        with self._lock:
            return user_id in self._accounts

    def has_role(self, user_id: str, role: str) -> bool:
        try:
            return role in self._account(user_id).roles
        except UnknownUser:
            return False

    # -- authentication ---------------------------------------------------------

    def _issue(self, user_id: str, level: str) -> str:
        issued = time.time()
        token = SsoToken(
            token_id=new_id("tok"),
            subject=user_id,
            level=level,
            issued_at=_epoch_iso(issued),
            expires_at=_epoch_iso(issued + self._ttl_s),
        )
        self._audit_auth(user_id, "ok", f"login level={level}")
        return encode_token(token, self._key)

    def authenticate_password(self, user_id: str, password: str) -> str:
        account = self._account(user_id)
        if not _check_password(password, account.password_hash):
            self._audit_auth(user_id, "fault", "bad password")
            raise BadCredential("wrong password")
        return self._issue(user_id, "weak")

    def issue_challenge(self, user_id: str) -> tuple[str, bytes]:
        account = self._account(user_id)
        if account.public_key is None:
            raise NoStrongCredential(f"{user_id} has no registered key")
        challenge_id = new_id("chal")
        nonce = os.urandom(32)
        with self._lock:
            self._challenges[challenge_id] = (user_id, nonce, time.monotonic() + CHALLENGE_TTL_S)
        return challenge_id, nonce

    def authenticate_challenge(self, user_id: str, challenge_id: str, signature: bytes) -> str:
        account = self._account(user_id)
        if account.public_key is None:
            raise NoStrongCredential(f"{user_id} has no registered key")
        with self._lock:
            entry = self._challenges.pop(challenge_id, None)  # one-time use
        if entry is None or entry[0] != user_id or time.monotonic() > entry[2]:
            self._audit_auth(user_id, "fault", "bad or expired challenge")
            raise BadCredential("unknown or expired challenge")
        if not _ed25519_verify(account.public_key, signature, entry[1]):
            self._audit_auth(user_id, "fault", "bad challenge signature")
            raise BadCredential("challenge signature check failed")
        return self._issue(user_id, "strong")

    def validate_token(self, token_text: str) -> tuple[str, str]:
        """(user_id, level); raises InvalidToken/ExpiredToken. Portal-independent."""
        token = decode_token(token_text, self._public)
        return token.subject, token.level

    # -- authorization ------------------------------------------------------------

    def authorize(self, token_text: Optional[str], min_auth_level: str) -> AuthzDecision:
        """allow ⇔ token valid and level ≥ requirement. Fail-closed: any
        validation error denies. Anonymous (no token) passes only `none`."""
        if token_text is None:
            if AUTH_LEVELS[min_auth_level] == 0:
                return AuthzDecision(True, reason="anonymous", level="none")
            return AuthzDecision(False, reason="level", level="none")
        try:
            user_id, level = self.validate_token(token_text)
        except ExpiredToken:
            return AuthzDecision(False, reason="expired")
        except InvalidToken:
            return AuthzDecision(False, reason="invalid")
        if AUTH_LEVELS[level] < AUTH_LEVELS[min_auth_level]:
            return AuthzDecision(False, reason="level", user_id=user_id, level=level)
        return AuthzDecision(True, user_id=user_id, level=level)

    # -- profiles -----------------------------------------------------------------

    def get_profile(self, user_id: str) -> tuple[dict, dict]:
        account = self._account(user_id)
        with self._lock:
            return dict(account.static_profile), dict(account.dynamic_preferences)

    def get_roles(self, user_id: str) -> list[str]:
        return sorted(self._account(user_id).roles)

    def update_preferences(self, user_id: str, delta: dict) -> dict:
        account = self._account(user_id)
        with self._lock:
            clashes = sorted(set(delta) & set(account.static_profile))
            if clashes:
                raise StaticAttributeViolation(
                    f"static attributes are immutable here: {', '.join(clashes)}"
                )
            if delta:
                self._persist({"type": "preferences_updated", "user_id": user_id, "delta": delta})
                account.dynamic_preferences.update({k: str(v) for k, v in delta.items()})
            return dict(account.dynamic_preferences)

    # -- recovery -------------------------------------------------------------------

    def load_record(self, record: dict) -> None:
        kind = record["type"]
        if kind == "user_registered":
            self._accounts[record["user_id"]] = _Account(
                record["user_id"],
                record["password_hash"],
                bytes.fromhex(record["public_key"]) if record.get("public_key") else None,
                set(record.get("roles", ())),
                record.get("static_profile", {}),
                {},
            )
        elif kind == "preferences_updated":
            account = self._accounts[record["user_id"]]
            account.dynamic_preferences.update({k: str(v) for k, v in record["delta"].items()})
        else:
            raise IdentityError(f"unknown accounts record type {kind!r}")


def _epoch_iso(epoch: float) -> str:
    from datetime import datetime, timezone

    dt = datetime.fromtimestamp(epoch, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + "%03dZ" % (dt.microsecond // 1000)
