"""Services catalog organized by a hierarchical life-event taxonomy.

The taxonomy is an append-only forest curated by the framework operator;
descriptors tag themselves with taxonomy nodes and bind to a concrete
target (a sync applicative port, an event topic, or a process model).
Discovery by life event includes every descendant node, so tagging a leaf
makes the service findable from any ancestor.

Binding existence is checked at registration time through callbacks the
gateway wires in, keeping this module free of dependencies on the others.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional

from ssc.errors import SscError

USAGE_TARGETS = ("citizen", "business", "administration")
AUTH_LEVELS = ("none", "weak", "strong")
BINDING_KINDS = ("sync_port", "event_topic", "process")


class RegistryError(SscError):
    pass


class DuplicateNode(RegistryError):
    pass


class UnknownParent(RegistryError):
    pass


class CycleDetected(RegistryError):
    pass


class UnknownLifeEvent(RegistryError):
    pass


class UnknownBinding(RegistryError):
    pass


class DuplicateService(RegistryError):
    pass


class UnknownService(RegistryError):
    pass


@dataclass(frozen=True)
class LifeEventNode:
    node_id: str
    label: str
    parent: Optional[str] = None


@dataclass(frozen=True)
class ServiceBinding:
    kind: str  # sync_port | event_topic | process
    admin_id: Optional[str] = None  # sync_port
    service_id: Optional[str] = None  # sync_port
    topic: Optional[str] = None  # event_topic
    model_id: Optional[str] = None  # process

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        for key in ("admin_id", "service_id", "topic", "model_id"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    @staticmethod
    def from_dict(obj: dict) -> "ServiceBinding":
        return ServiceBinding(
            kind=obj.get("kind", ""),
            admin_id=obj.get("admin_id"),
            service_id=obj.get("service_id"),
            topic=obj.get("topic"),
            model_id=obj.get("model_id"),
        )


@dataclass(frozen=True)
class ServiceDescriptor:
    service_id: str
    provider_admin_id: str
    title: str
    description: str
    life_events: frozenset[str]
    usage_target: str  # citizen | business | administration
    min_auth_level: str  # none | weak | strong
    binding: ServiceBinding

    def to_dict(self) -> dict:
        return {
            "service_id": self.service_id,
            "provider_admin_id": self.provider_admin_id,
            "title": self.title,
            "description": self.description,
            "life_events": sorted(self.life_events),
            "usage_target": self.usage_target,
            "min_auth_level": self.min_auth_level,
            "binding": self.binding.to_dict(),
        }

    @staticmethod
    def from_dict(obj: dict) -> "ServiceDescriptor":
        return ServiceDescriptor(
            service_id=obj["service_id"],
            provider_admin_id=obj["provider_admin_id"],
            title=obj.get("title", ""),
            description=obj.get("description", ""),
            life_events=frozenset(obj.get("life_events", ())),
            usage_target=obj.get("usage_target", "citizen"),
            min_auth_level=obj.get("min_auth_level", "none"),
            binding=ServiceBinding.from_dict(obj["binding"]),
        )


BindingChecker = Callable[[ServiceBinding], bool]


class ServiceRegistry:
    def __init__(
        self,
        *,
        binding_checker: Optional[BindingChecker] = None,
        store_append: Optional[Callable[[dict], None]] = None,
    ) -> None:
        self._check_binding = binding_checker or (lambda binding: True)
        self._store = store_append
        self._lock = threading.Lock()
        self._nodes: dict[str, LifeEventNode] = {}
        self._children: dict[Optional[str], list[str]] = {}
        self._descriptors: dict[str, ServiceDescriptor] = {}

    def _persist(self, record: dict) -> None:
        if self._store is not None:
            self._store(record)

    # -- taxonomy -------------------------------------------------------------

    def add_life_event(self, node_id: str, label: str, parent: Optional[str] = None) -> LifeEventNode:
        if not node_id:
            raise RegistryError("node_id must be non-empty")
        with self._lock:
            if node_id in self._nodes:
                raise DuplicateNode(node_id)
            if parent is not None and parent not in self._nodes:
                if parent == node_id:
                    raise CycleDetected(f"{node_id} cannot parent itself")
                raise UnknownParent(parent)
            node = LifeEventNode(node_id, label, parent)
            self._persist({"type": "node_added", "node_id": node_id, "label": label, "parent": parent})
            self._nodes[node_id] = node
            self._children.setdefault(parent, []).append(node_id)
            return node

    def has_node(self, node_id: str) -> bool:
        with self._lock:
            return node_id in self._nodes

    def list_taxonomy(self) -> list[LifeEventNode]:
        """Deterministic depth-first order: roots then children, by node_id."""
        with self._lock:
            out: list[LifeEventNode] = []
            stack = sorted(self._children.get(None, []), reverse=True)
            while stack:
                node_id = stack.pop()
                out.append(self._nodes[node_id])
                stack.extend(sorted(self._children.get(node_id, []), reverse=True))
            return out

    def _subtree(self, node_id: str) -> set[str]:
        out = set()
        stack = [node_id]
        while stack:
            current = stack.pop()
            out.add(current)
            stack.extend(self._children.get(current, []))
        return out

    # -- descriptors ----------------------------------------------------------

    def register_service(self, descriptor: ServiceDescriptor) -> None:
        if descriptor.usage_target not in USAGE_TARGETS:
            raise RegistryError(f"usage_target {descriptor.usage_target!r} not in {USAGE_TARGETS}")
        if descriptor.min_auth_level not in AUTH_LEVELS:
            raise RegistryError(f"min_auth_level {descriptor.min_auth_level!r} not in {AUTH_LEVELS}")
        if descriptor.binding.kind not in BINDING_KINDS:
            raise RegistryError(f"binding kind {descriptor.binding.kind!r} not in {BINDING_KINDS}")
        with self._lock:
            if descriptor.service_id in self._descriptors:
                raise DuplicateService(descriptor.service_id)
            for node_id in descriptor.life_events:
                if node_id not in self._nodes:
                    raise UnknownLifeEvent(node_id)
        if not self._check_binding(descriptor.binding):
            raise UnknownBinding(f"{descriptor.binding.to_dict()} does not resolve")
        with self._lock:
            if descriptor.service_id in self._descriptors:
                raise DuplicateService(descriptor.service_id)
            self._persist({"type": "service_registered", "descriptor": descriptor.to_dict()})
            self._descriptors[descriptor.service_id] = descriptor

    def get_descriptor(self, service_id: str) -> ServiceDescriptor:
        with self._lock:
            descriptor = self._descriptors.get(service_id)
        if descriptor is None:
            raise UnknownService(service_id)
        return descriptor

    def has_service(self, service_id: str) -> bool:
        with self._lock:
            return service_id in self._descriptors

    def find_by_life_event(self, node_id: str, usage_target: Optional[str] = None) -> list[ServiceDescriptor]:
        """Descriptors tagged with node_id or any descendant, stable order."""
        with self._lock:
            if node_id not in self._nodes:
                raise UnknownLifeEvent(node_id)
            wanted = self._subtree(node_id)
            out = [
                d
                for d in self._descriptors.values()
                if d.life_events & wanted and (usage_target is None or d.usage_target == usage_target)
            ]
        return sorted(out, key=lambda d: (d.provider_admin_id, d.service_id))

    def list_services(self, usage_target: Optional[str] = None) -> list[ServiceDescriptor]:
        with self._lock:
            out = [
                d
                for d in self._descriptors.values()
                if usage_target is None or d.usage_target == usage_target
            ]
        return sorted(out, key=lambda d: (d.provider_admin_id, d.service_id))

    # -- recovery ---------------------------------------------------------------

    def load_record(self, record: dict) -> None:
        kind = record["type"]
        if kind == "node_added":
            node = LifeEventNode(record["node_id"], record["label"], record.get("parent"))
            self._nodes[node.node_id] = node
            self._children.setdefault(node.parent, []).append(node.node_id)
        elif kind == "service_registered":
            descriptor = ServiceDescriptor.from_dict(record["descriptor"])
            self._descriptors[descriptor.service_id] = descriptor
        else:
            raise RegistryError(f"unknown catalog record type {kind!r}")


def import_taxonomy(registry: ServiceRegistry, nodes: list[dict]) -> int:
    """Bulk node import tolerant of arbitrary ordering; cycles are refused.

    Returns the number of nodes actually added (existing ids are skipped).
    """
    pending = [dict(n) for n in nodes]
    added = 0
    while pending:
        progress = []
        for node in pending:
            parent = node.get("parent")
            if parent is None or registry.has_node(parent):
                if not registry.has_node(node["node_id"]):
                    registry.add_life_event(node["node_id"], node.get("label", node["node_id"]), parent)
                    added += 1
                progress.append(node)
        if not progress:
            cycle = ", ".join(sorted(n["node_id"] for n in pending))
            raise CycleDetected(f"unresolvable parent references among: {cycle}")
        pending = [n for n in pending if n not in progress]
    return added
