"""Publish&subscribe event notification with pull-based at-least-once delivery.

Decoupling contract: a publish succeeds and returns a receipt immediately
once the event is durably stored — regardless of how many subscribers
exist or whether any of them is alive. Subscribers pull in per-topic
global sequence order and acknowledge explicitly; until acked, pulls
re-deliver the same events.

Ordering: `seq` is strictly increasing per (topic, publisher), `global_seq`
per topic; both are assigned under the topic lock, which is the only
serialization point on the publish path.

Durable subscriptions survive restarts (subscription, cursor and events
are replayed from the append-only store); non-durable ones are memory-only
and vanish with the process.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from ssc.audit import AuditLog
from ssc.envelope import (
    Envelope,
    KeyDirectory,
    envelope_to_dict,
    envelope_from_dict,
    verify_envelope,
)
from ssc.errors import SscError
from ssc.util import iso_now, new_id

TOPIC_NAME_RE = re.compile(r"^[a-z0-9_]+(\.[a-z0-9_]+)*$")

DEFAULT_RETENTION_CAP = 100_000


class EventBusError(SscError):
    pass


class InvalidTopicName(EventBusError):
    pass


class UnknownTopic(EventBusError):
    pass


class UnknownSubscription(EventBusError):
    pass


class VerificationFailed(EventBusError):
    pass


class CursorRegression(EventBusError):
    pass


@dataclass(frozen=True)
class Topic:
    name: str
    created_at: str


@dataclass(frozen=True)
class PublicationReceipt:
    topic: str
    publisher_admin_id: str
    seq: int
    global_seq: int


@dataclass
class Subscription:
    sub_id: str
    subscriber_admin_id: str
    subscriber_port_id: str
    topic: str
    durable: bool
    cursor: int  # last acknowledged global_seq


class _TopicState:
    def __init__(self, topic: Topic) -> None:
        self.topic = topic
        self.events: list[tuple[int, Envelope]] = []  # (global_seq, envelope)
        self.global_seq = 0
        self.publisher_seq: dict[str, int] = {}


class EventBus:
    def __init__(
        self,
        key_directory: KeyDirectory,
        audit: AuditLog,
        *,
        store_append: Optional[Callable[[dict], None]] = None,
        retention_cap: int = DEFAULT_RETENTION_CAP,
    ) -> None:
        self._directory = key_directory
        self._audit = audit
        self._store = store_append
        self._retention_cap = retention_cap
        self._lock = threading.RLock()
        self._topics: dict[str, _TopicState] = {}
        self._subs: dict[str, Subscription] = {}

    def _persist(self, record: dict) -> None:
        if self._store is not None:
            self._store(record)

    # -- topics ---------------------------------------------------------------

    def create_topic(self, name: str) -> Topic:
        """Idempotent: re-creating an existing topic returns it unchanged."""
        if not isinstance(name, str) or not TOPIC_NAME_RE.match(name):
            raise InvalidTopicName(f"{name!r} (want dot-separated [a-z0-9_] segments)")
        with self._lock:
            state = self._topics.get(name)
            if state is not None:
                return state.topic
            topic = Topic(name=name, created_at=iso_now())
            self._persist({"type": "topic_created", "name": name, "created_at": topic.created_at})
            self._topics[name] = _TopicState(topic)
            return topic

    def topic_exists(self, name: str) -> bool:
        with self._lock:
            return name in self._topics

    def list_topics(self) -> list[Topic]:
        with self._lock:
            return [self._topics[n].topic for n in sorted(self._topics)]

    # -- subscriptions --------------------------------------------------------

    def subscribe(self, subscriber: tuple[str, str], topic: str, durable: bool) -> Subscription:
        with self._lock:
            state = self._topics.get(topic)
            if state is None:
                raise UnknownTopic(topic)
            sub = Subscription(
                sub_id=new_id("sub"),
                subscriber_admin_id=subscriber[0],
                subscriber_port_id=subscriber[1],
                topic=topic,
                durable=durable,
                cursor=state.global_seq,  # only events published after creation
            )
            if durable:
                self._persist(
                    {
                        "type": "subscribed",
                        "sub_id": sub.sub_id,
                        "admin_id": sub.subscriber_admin_id,
                        "port_id": sub.subscriber_port_id,
                        "topic": topic,
                        "cursor": sub.cursor,
                    }
                )
            self._subs[sub.sub_id] = sub
            return sub

    def get_subscription(self, sub_id: str) -> Subscription:
        with self._lock:
            sub = self._subs.get(sub_id)
            if sub is None:
                raise UnknownSubscription(sub_id)
            return sub

    # -- publish / pull / ack -------------------------------------------------

    def publish(self, event: Envelope, topic: str) -> PublicationReceipt:
        """Durably store one verified event; success is independent of subscribers."""
        with self._lock:
            state = self._topics.get(topic)
        if state is None:
            raise UnknownTopic(topic)
        if event.profile != "async_event":
            raise VerificationFailed(f"profile must be async_event, got {event.profile}")
        if event.message_kind != "event":
            raise VerificationFailed(f"message_kind must be event, got {event.message_kind}")
        report = verify_envelope(event, self._directory)
        if not report.valid:
            self._audit.record(
                "error", event.correlation_id, event.sender.admin_id, topic, "fault",
                f"publish rejected: {report.reason}",
            )
            raise VerificationFailed(report.reason or "invalid signature")

        publisher = event.sender.admin_id
        with self._lock:
            state.global_seq += 1
            state.publisher_seq[publisher] = state.publisher_seq.get(publisher, 0) + 1
            receipt = PublicationReceipt(
                topic=topic,
                publisher_admin_id=publisher,
                seq=state.publisher_seq[publisher],
                global_seq=state.global_seq,
            )
            self._persist(
                {
                    "type": "published",
                    "topic": topic,
                    "publisher": publisher,
                    "seq": receipt.seq,
                    "global_seq": receipt.global_seq,
                    "envelope": envelope_to_dict(event),
                }
            )
            state.events.append((receipt.global_seq, event))
            evicted = self._enforce_retention(state)
        self._audit.record(
            "publish", event.correlation_id, publisher, topic, "ok",
            f"seq={receipt.seq} global_seq={receipt.global_seq}",
        )
        if evicted:
            self._audit.record(
                "error", None, "ssc", topic, "fault",
                f"retention cap {self._retention_cap}: evicted {evicted} oldest events",
            )
        return receipt

    def _enforce_retention(self, state: _TopicState) -> int:
        overflow = len(state.events) - self._retention_cap
        if overflow <= 0:
            return 0
        dropped_up_to = state.events[overflow - 1][0]
        state.events = state.events[overflow:]
        self._persist({"type": "evicted", "topic": state.topic.name, "up_to": dropped_up_to})
        return overflow

    def pull(self, sub_id: str, max_events: int) -> list[tuple[int, Envelope]]:
        """Up to max unacknowledged events in global_seq order; repeat pulls
        without an ack re-deliver the same events (single consumer per sub)."""
        with self._lock:
            sub = self._subs.get(sub_id)
            if sub is None:
                raise UnknownSubscription(sub_id)
            state = self._topics[sub.topic]
            batch = [(g, e) for g, e in state.events if g > sub.cursor][: max(0, max_events)]
        if batch:
            self._audit.record(
                "deliver", None, sub.subscriber_admin_id, sub_id, "ok",
                f"topic={sub.topic} count={len(batch)} range={batch[0][0]}..{batch[-1][0]}",
            )
        return batch

    def ack(self, sub_id: str, up_to_global_seq: int) -> None:
        with self._lock:
            sub = self._subs.get(sub_id)
            if sub is None:
                raise UnknownSubscription(sub_id)
            if up_to_global_seq < sub.cursor:
                raise CursorRegression(f"up_to={up_to_global_seq} behind cursor={sub.cursor}")
            if up_to_global_seq == sub.cursor:
                return
            if sub.durable:
                self._persist({"type": "acked", "sub_id": sub_id, "up_to": up_to_global_seq})
            sub.cursor = up_to_global_seq

    # -- queries used by recovery and reconciliation -------------------------

    def retained(self, topic: str) -> list[tuple[int, Envelope]]:
        with self._lock:
            state = self._topics.get(topic)
            return list(state.events) if state is not None else []

    def high_water(self, topic: str) -> int:
        with self._lock:
            state = self._topics.get(topic)
            return state.global_seq if state is not None else 0

    # -- recovery -------------------------------------------------------------

    def load_record(self, record: dict) -> None:
        """Rebuild state from one persisted record (startup replay path)."""
        kind = record["type"]
        if kind == "topic_created":
            self._topics[record["name"]] = _TopicState(
                Topic(name=record["name"], created_at=record["created_at"])
            )
        elif kind == "published":
            state = self._topics[record["topic"]]
            state.global_seq = record["global_seq"]
            state.publisher_seq[record["publisher"]] = record["seq"]
            state.events.append((record["global_seq"], envelope_from_dict(record["envelope"])))
        elif kind == "subscribed":
            self._subs[record["sub_id"]] = Subscription(
                sub_id=record["sub_id"],
                subscriber_admin_id=record["admin_id"],
                subscriber_port_id=record["port_id"],
                topic=record["topic"],
                durable=True,
                cursor=record["cursor"],
            )
        elif kind == "acked":
            sub = self._subs.get(record["sub_id"])
            if sub is not None:
                sub.cursor = max(sub.cursor, record["up_to"])
        elif kind == "evicted":
            state = self._topics[record["topic"]]
            state.events = [(g, e) for g, e in state.events if g > record["up_to"]]
        else:
            raise EventBusError(f"unknown event-store record type {kind!r}")
