"""The deployable gateway: one process stacking connectivity, base services
and cooperation services over a shared durable store.

Composition root: it owns the storage directory, the key directory and the
framework signing key, and wires the modules together — the orchestrator
invokes backends through the cooperation mediator, published events fan
into waiting instances, the registry checks bindings against the live
port table / topic set / model repository, human-task claims ask the
identity module for roles.

Startup is recovery: every store is replayed before the gateway serves,
then non-terminal instances resume and retained events are reconciled
against waiting steps. Killing the process at any point after the last
acknowledged operation and restarting yields the same observable state.
"""

from __future__ import annotations

import json
import os
import stat
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from ssc.audit import AuditLog
from ssc.cooperation import CooperationMediator
from ssc.envelope import (
    Envelope,
    KeyDirectory,
    PortAddress,
    ServiceAddress,
    build_envelope,
    sign_envelope,
)
from ssc.errors import SscError
from ssc.eventbus import DEFAULT_RETENTION_CAP, EventBus, PublicationReceipt
from ssc.identity import DEFAULT_TOKEN_TTL_S, IdentityService
from ssc.orchestration import DEFAULT_TASK_LEASE_S, Orchestrator
from ssc.registry import ServiceBinding, ServiceRegistry
from ssc.storage import Storage
from ssc.util import new_id

FRAMEWORK_KEY_ID = "fw-1"


class ConfigError(SscError):
    pass


class AuthorizationDenied(SscError):
    def __init__(self, reason: str):
        super().__init__(f"authorization denied: {reason}")
        self.reason = reason


@dataclass
class GatewayConfig:
    host: str = "127.0.0.1"
    port: int = 8321
    storage_path: str = "./ssc-data"
    framework_key_path: Optional[str] = None  # default: <storage>/framework_key.pem
    framework_admin_id: str = "ssc"
    key_directory_path: Optional[str] = None
    sync_timeout_s: float = 5.0
    task_lease_s: float = DEFAULT_TASK_LEASE_S
    token_ttl_s: float = DEFAULT_TOKEN_TTL_S
    retention_cap: int = DEFAULT_RETENTION_CAP
    fsync: bool = False
    cors_origins: list[str] = field(default_factory=lambda: ["*"])
    seed_catalog: Optional[str] = None
    seed_users: Optional[str] = None
    seed_models: Optional[str] = None
    harness_scenario: Optional[str] = None  # scenario file whose admins respawn at startup

    @staticmethod
    def from_dict(obj: dict) -> "GatewayConfig":
        config = GatewayConfig(**{k: v for k, v in obj.items() if k in GatewayConfig.__dataclass_fields__})
        unknown = set(obj) - set(GatewayConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for label, value in (
            ("sync_timeout_s", config.sync_timeout_s),
            ("task_lease_s", config.task_lease_s),
            ("token_ttl_s", config.token_ttl_s),
        ):
            if value <= 0:
                raise ConfigError(f"{label} must be positive, got {value}")
        if config.retention_cap <= 0:
            raise ConfigError("retention_cap must be positive")
        return config

    @staticmethod
    def from_file(path: str | Path) -> "GatewayConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return GatewayConfig.from_dict(obj)


def _load_or_create_framework_key(path: Path) -> Ed25519PrivateKey:
    if path.exists():
        key = serialization.load_pem_private_key(path.read_bytes(), password=None)
        if not isinstance(key, Ed25519PrivateKey):
            raise ConfigError(f"{path} is not an Ed25519 private key")
        return key
    key = Ed25519PrivateKey.generate()
    pem = key.private_bytes(
        encoding=serialization.Encoding.PEM,
        format=serialization.PrivateFormat.PKCS8,
        encryption_algorithm=serialization.NoEncryption(),
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pem)
    os.chmod(path, stat.S_IRUSR | stat.S_IWUSR)
    return key


class Gateway:
    def __init__(self, config: GatewayConfig):
        self.config = config
        self.storage = Storage(config.storage_path, fsync=config.fsync)

        self.audit = AuditLog(self.storage.log("audit"))
        self.audit.load_existing()

        self.key_directory = KeyDirectory()
        if config.key_directory_path:
            try:
                self.key_directory.load(json.loads(Path(config.key_directory_path).read_text()))
            except (OSError, json.JSONDecodeError, KeyError) as exc:
                raise ConfigError(f"bad key directory file {config.key_directory_path}: {exc}") from exc

        key_path = Path(config.framework_key_path or Path(config.storage_path) / "framework_key.pem")
        self.framework_key = _load_or_create_framework_key(key_path)
        if self.key_directory.get(config.framework_admin_id, FRAMEWORK_KEY_ID) is None:
            self.key_directory.add_key(
                config.framework_admin_id,
                FRAMEWORK_KEY_ID,
                self.framework_key.public_key().public_bytes_raw(),
            )

        self.mediator = CooperationMediator(
            self.key_directory,
            self.audit,
            gateway_address=PortAddress(config.framework_admin_id, "gateway"),
            default_timeout_s=config.sync_timeout_s,
        )

        self.bus = EventBus(
            self.key_directory,
            self.audit,
            store_append=self.storage.log("events").append,
            retention_cap=config.retention_cap,
        )
        for record in self.storage.log("events").replay():
            self.bus.load_record(record)

        self.identity = IdentityService(
            self.framework_key,
            audit=self.audit,
            store_append=self.storage.log("accounts").append,
            token_ttl_s=config.token_ttl_s,
        )
        for record in self.storage.log("accounts").replay():
            self.identity.load_record(record)

        self.orchestrator = Orchestrator(
            service_invoker=self._engine_invoke,
            role_checker=self.identity.has_role,
            audit=self.audit,
            store_append=self.storage.log("instances").append,
            task_lease_s=config.task_lease_s,
        )
        for record in self.storage.log("instances").replay():
            self.orchestrator.load_record(record)

        self.registry = ServiceRegistry(
            binding_checker=self._check_binding,
            store_append=self.storage.log("catalog").append,
        )
        for record in self.storage.log("catalog").replay():
            self.registry.load_record(record)

        self._seed_from_config()

        # resume before reconcile: passes park instances on their wait steps,
        # reconcile then feeds retained events the crash may have kept from them
        self.orchestrator.resume_after_recovery()
        self.orchestrator.reconcile_events(self.bus.retained)

    # -- wiring ------------------------------------------------------------------

    def _engine_invoke(self, destination: ServiceAddress, payload: bytes, correlation: str) -> Envelope:
        request = build_envelope(
            PortAddress(self.config.framework_admin_id, "orchestrator"),
            destination,
            "sync",
            "request",
            payload,
            content_type="application/json",
            correlation_id=correlation,
        )
        request = sign_envelope(
            request, self.framework_key, self.config.framework_admin_id, FRAMEWORK_KEY_ID, self.key_directory
        )
        return self.mediator.exchange_sync(request)

    def _check_binding(self, binding: ServiceBinding) -> bool:
        if binding.kind == "sync_port":
            try:
                self.mediator.resolve_route(ServiceAddress(binding.admin_id or "", binding.service_id or ""))
                return True
            except SscError:
                return False
        if binding.kind == "event_topic":
            return self.bus.topic_exists(binding.topic or "")
        if binding.kind == "process":
            return self.orchestrator.has_model(binding.model_id or "")
        return False

    def _seed_from_config(self) -> None:
        config = self.config
        if config.seed_models:
            for model in json.loads(Path(config.seed_models).read_text()):
                if not self.orchestrator.has_model(model["model_id"]):
                    self.orchestrator.register_model(model)
        if config.seed_catalog:
            from ssc.registry import ServiceDescriptor, import_taxonomy

            blob = json.loads(Path(config.seed_catalog).read_text())
            import_taxonomy(self.registry, blob.get("taxonomy", []))
            for desc in blob.get("descriptors", []):
                if not self.registry.has_service(desc["service_id"]):
                    self.registry.register_service(ServiceDescriptor.from_dict(desc))
        if config.seed_users:
            for user in json.loads(Path(config.seed_users).read_text()):
                if not self.identity.has_user(user["user_id"]):
                    self.identity.register_user(
                        user["user_id"],
                        user["password"],
                        public_key=bytes.fromhex(user["public_key"]) if user.get("public_key") else None,
                        roles=set(user.get("roles", ())),
                        static_profile=user.get("static_profile", {}),
                    )
        if config.harness_scenario:
            from ssc.harness import Scenario, seed_gateway

            seed_gateway(self, Scenario.load(config.harness_scenario))

    # -- consolidated operations ---------------------------------------------------

    def publish_event(self, topic: str, event: Envelope) -> PublicationReceipt:
        """Durable publish, then synchronous fan-in to waiting instances."""
        receipt = self.bus.publish(event, topic)
        self.orchestrator.deliver_event(topic, event)
        return receipt

    def invoke_service(
        self,
        service_id: str,
        token: Optional[str],
        inputs: Optional[dict] = None,
        correlation: Optional[str] = None,
    ) -> dict:
        """Portal-facing entry: authorize against the descriptor, then dispatch
        on its binding (start a process / sync exchange / publish an event)."""
        descriptor = self.registry.get_descriptor(service_id)
        decision = self.identity.authorize(token, descriptor.min_auth_level)
        if not decision.allowed:
            raise AuthorizationDenied(decision.reason or "denied")
        inputs = inputs or {}
        binding = descriptor.binding
        correlation = correlation or new_id("req")

        if binding.kind == "process":
            instance_id = self.orchestrator.start_instance(
                binding.model_id, inputs=inputs, correlation_id=correlation
            )
            snapshot = self.orchestrator.instance_state(instance_id)
            return {
                "binding": "process",
                "instance_id": instance_id,
                "correlation_id": correlation,
                "status": snapshot.status,
            }
        if binding.kind == "sync_port":
            from ssc.envelope import envelope_to_dict

            response = self._engine_invoke(
                ServiceAddress(binding.admin_id or "", binding.service_id or ""),
                json.dumps(inputs, sort_keys=True).encode("utf-8"),
                correlation,
            )
            return {
                "binding": "sync_port",
                "correlation_id": correlation,
                "response": envelope_to_dict(response),
            }
        # event_topic: publish a framework-signed notification envelope
        event = build_envelope(
            PortAddress(self.config.framework_admin_id, "gateway"),
            ServiceAddress(self.config.framework_admin_id, "bus"),
            "async_event",
            "event",
            json.dumps(inputs, sort_keys=True).encode("utf-8"),
            content_type="application/json",
            correlation_id=correlation,
        )
        event = sign_envelope(
            event, self.framework_key, self.config.framework_admin_id, FRAMEWORK_KEY_ID, self.key_directory
        )
        receipt = self.publish_event(binding.topic or "", event)
        return {
            "binding": "event_topic",
            "correlation_id": correlation,
            "receipt": {
                "topic": receipt.topic,
                "seq": receipt.seq,
                "global_seq": receipt.global_seq,
            },
        }

    def healthcheck(self) -> dict:
        writable = True
        try:
            probe = Path(self.config.storage_path) / ".writable"
            probe.write_bytes(b"ok")
            probe.unlink()
        except OSError:
            writable = False
        return {
            "status": "ok" if writable else "degraded",
            "modules": {
                name: "ready"
                for name in ("envelope", "cooperation", "eventbus", "orchestration", "registry", "identity", "audit")
            },
            "storage_writable": writable,
            "high_water": {
                "audit_seq": self.audit.high_water(),
                "instances": len(self.orchestrator.list_instances()),
                "topics": len(self.bus.list_topics()),
                "admins_online": self.mediator.online_admins(),
            },
        }

    # -- harness delegates ----------------------------------------------------------

    def spawn_simulated_admin(self, sim) -> None:
        sim.spawn(self)

    def seed_demo(self, admin_count: int, participation_ratio: float = 0.8) -> list[str]:
        from ssc.harness import seed_demo

        return seed_demo(self, admin_count, participation_ratio)

    def run_scenario(self, scenario, base_url: Optional[str] = None):
        from ssc.harness import run_scenario

        return run_scenario(self, scenario, base_url=base_url)

    def close(self) -> None:
        self.storage.close()
