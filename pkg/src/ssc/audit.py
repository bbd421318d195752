"""Traceability log: one totally ordered record per externally visible effect.

Write-ahead discipline: the audit append happens before the audited
operation acknowledges success, so a crash never under-reports. Sequence
numbers are gap-free from 1 and records are immutable once written.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, asdict
from typing import Optional

from ssc.errors import SscError
from ssc.storage import AppendLog
from ssc.util import iso_now

CATEGORIES = (
    "exchange_request",
    "exchange_response",
    "publish",
    "deliver",
    "orchestration_transition",
    "task_event",
    "auth_event",
    "error",
)

OUTCOMES = ("ok", "fault")


class AuditError(SscError):
    pass


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    ts: str
    category: str
    correlation_id: Optional[str]
    actor: str
    subject: str
    outcome: str
    detail: str

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(obj: dict) -> "AuditRecord":
        return AuditRecord(
            seq=obj["seq"],
            ts=obj["ts"],
            category=obj["category"],
            correlation_id=obj.get("correlation_id"),
            actor=obj["actor"],
            subject=obj["subject"],
            outcome=obj["outcome"],
            detail=obj.get("detail", ""),
        )


class AuditLog:
    """In-memory view plus optional durable append log.

    Sequence assignment is the single serialization point; queries see a
    consistent prefix.
    """

    def __init__(self, log: Optional[AppendLog] = None) -> None:
        self._log = log
        self._lock = threading.Lock()
        self._records: list[AuditRecord] = []

    def load_existing(self) -> int:
        """Replay the durable log into memory. Returns the high-water seq."""
        if self._log is None:
            return 0
        with self._lock:
            self._records = [AuditRecord.from_dict(obj) for obj in self._log.replay()]
            return self._records[-1].seq if self._records else 0

    def record(
        self,
        category: str,
        correlation_id: Optional[str],
        actor: str,
        subject: str,
        outcome: str,
        detail: str = "",
    ) -> int:
        if category not in CATEGORIES:
            raise AuditError(f"unknown category {category!r}")
        if outcome not in OUTCOMES:
            raise AuditError(f"unknown outcome {outcome!r}")
        with self._lock:
            rec = AuditRecord(
                seq=len(self._records) + 1,
                ts=iso_now(),
                category=category,
                correlation_id=correlation_id,
                actor=actor,
                subject=subject,
                outcome=outcome,
                detail=detail,
            )
            if self._log is not None:
                self._log.append(rec.to_dict())  # StorageFailure propagates
            self._records.append(rec)
            return rec.seq

    def query(
        self,
        *,
        ts_from: Optional[str] = None,
        ts_to: Optional[str] = None,
        category: Optional[str] = None,
        actor: Optional[str] = None,
        subject: Optional[str] = None,
        outcome: Optional[str] = None,
    ) -> list[AuditRecord]:
        """Conjunctive filters, ascending seq. ISO timestamps compare as strings."""
        with self._lock:
            records = list(self._records)
        out = []
        for rec in records:
            if ts_from is not None and rec.ts < ts_from:
                continue
            if ts_to is not None and rec.ts > ts_to:
                continue
            if category is not None and rec.category != category:
                continue
            if actor is not None and rec.actor != actor:
                continue
            if subject is not None and rec.subject != subject:
                continue
            if outcome is not None and rec.outcome != outcome:
                continue
            out.append(rec)
        return out

    def trace(self, correlation_id: str) -> list[AuditRecord]:
        """Every record tied to one correlation, in seq order — the end-to-end
        story of a request or process instance. Unknown id gives []."""
        with self._lock:
            return [r for r in self._records if r.correlation_id == correlation_id]

    def high_water(self) -> int:
        with self._lock:
            return self._records[-1].seq if self._records else 0
