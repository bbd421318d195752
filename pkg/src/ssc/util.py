"""Small shared helpers: timestamps, identifiers, base64."""

from __future__ import annotations

import base64
import uuid
from datetime import datetime, timezone


def iso_now() -> str:
    """UTC timestamp, ISO-8601 with millisecond precision, e.g. 2026-08-08T10:50:00.123Z."""
    now = datetime.now(timezone.utc)
    return now.strftime("%Y-%m-%dT%H:%M:%S.") + "%03dZ" % (now.microsecond // 1000)


def new_id(prefix: str = "") -> str:
    raw = uuid.uuid4().hex
    return f"{prefix}-{raw}" if prefix else raw


def b64encode_str(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64decode_str(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)
