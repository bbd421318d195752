"""Simulated multi-administration harness and scripted one-stop scenarios.

A SimulatedAdministration is an in-process back office: deterministic
payload handlers behind the in-process transport, every response signed
with the administration's own key. Keys are derived deterministically
from the admin_id so external drivers (scenario runner, crash tests,
separate processes) can sign events as that administration without any
key exchange — a harness convenience, never a production pattern.

Scenarios are JSON: entities to seed, a script of actor actions executed
strictly through the public HTTP API (login, submit, publish, claim,
complete, await), and assertions evaluated at the end. The report lists
one pass/fail per assertion plus the audit trace.
"""

from __future__ import annotations

import hashlib
import json
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from ssc.cooperation import DuplicatePort, FaultInfo
from ssc.envelope import (
    DuplicateKey,
    Envelope,
    PortAddress,
    ServiceAddress,
    build_envelope,
    serialize_envelope,
    sign_envelope,
)
from ssc.errors import SscError
from ssc.registry import ServiceBinding, ServiceDescriptor, import_taxonomy

SIM_KEY_ID = "sim-1"
USER_KEY_SALT = b"ssc-user-key:"
ADMIN_KEY_SALT = b"ssc-sim-admin-key:"


class ScenarioError(SscError):
    pass


def deterministic_admin_key(admin_id: str) -> Ed25519PrivateKey:
    seed = hashlib.sha256(ADMIN_KEY_SALT + admin_id.encode("utf-8")).digest()
    return Ed25519PrivateKey.from_private_bytes(seed)


def deterministic_user_key(user_id: str) -> Ed25519PrivateKey:
    seed = hashlib.sha256(USER_KEY_SALT + user_id.encode("utf-8")).digest()
    return Ed25519PrivateKey.from_private_bytes(seed)


# ---------------------------------------------------------------------------
# Simulated administrations
# ---------------------------------------------------------------------------


PayloadHandler = Callable[[bytes, Envelope], bytes]


def echo_handler(admin_id: str, service_id: str) -> PayloadHandler:
    def handle(payload: bytes, request: Envelope) -> bytes:
        return json.dumps(
            {
                "admin": admin_id,
                "service": service_id,
                "esito": "ok",
                "echo": payload.decode("utf-8", "replace"),
            },
            sort_keys=True,
        ).encode("utf-8")

    return handle


STANDARD_HANDLERS = {"echo": echo_handler}

STANDARD_DEMO_SERVICES = ("anagrafe", "tributi", "protocollo")


@dataclass
class BackendScript:
    """Deterministic misbehavior knobs for one simulated service."""

    latency_s: float = 0.0
    fault: Optional[str] = None  # raise | fault_envelope
    fault_code: str = "backend_fault"
    fault_detail: str = "injected fault"


@dataclass
class SimulatedAdministration:
    admin_id: str
    services: dict[str, str] = field(default_factory=dict)  # service_id -> handler name
    scripts: dict[str, BackendScript] = field(default_factory=dict)

    def __post_init__(self):
        self.key = deterministic_admin_key(self.admin_id)

    def handler_for(self, service_id: str, directory) -> Callable[[Envelope], Envelope]:
        name = self.services.get(service_id, "echo")
        payload_handler = STANDARD_HANDLERS.get(name, echo_handler)(self.admin_id, service_id)
        script = self.scripts.get(service_id, BackendScript())
        admin_id = self.admin_id

        def handle(request: Envelope) -> Envelope:
            if script.latency_s > 0:
                time.sleep(script.latency_s)
            if script.fault == "raise":
                raise RuntimeError(script.fault_detail)
            if script.fault == "fault_envelope":
                fault = build_envelope(
                    PortAddress(admin_id, service_id),
                    ServiceAddress(request.sender.admin_id, request.sender.port_id),
                    "sync",
                    "fault",
                    FaultInfo(script.fault_code, script.fault_detail).to_payload(),
                    content_type="application/json",
                    correlation_id=request.envelope_id,
                )
                return sign_envelope(fault, self.key, admin_id, SIM_KEY_ID, directory)
            response = build_envelope(
                PortAddress(admin_id, service_id),
                ServiceAddress(request.sender.admin_id, request.sender.port_id),
                "sync",
                "response",
                payload_handler(request.body.payload, request),
                content_type="application/json",
                correlation_id=request.envelope_id,
            )
            return sign_envelope(response, self.key, admin_id, SIM_KEY_ID, directory)

        return handle

    def spawn(self, gateway) -> None:
        """Register key and applicative ports; idempotent across restarts."""
        directory = gateway.key_directory
        try:
            directory.add_key(self.admin_id, SIM_KEY_ID, self.key.public_key().public_bytes_raw())
        except DuplicateKey:
            pass
        for service_id in self.services:
            endpoint = f"sim:{self.admin_id}/{service_id}"
            gateway.mediator.bind_handler(endpoint, self.handler_for(service_id, directory))
            try:
                gateway.mediator.register_applicative_port(self.admin_id, service_id, endpoint)
            except DuplicatePort:
                pass


def signed_event(
    admin_id: str,
    directory,
    *,
    correlation: Optional[str],
    payload: bytes,
    content_type: str = "application/json",
) -> Envelope:
    """Event envelope signed with the administration's deterministic key."""
    event = build_envelope(
        PortAddress(admin_id, "eventi"),
        ServiceAddress("ssc", "bus"),
        "async_event",
        "event",
        payload,
        content_type=content_type,
        correlation_id=correlation,
    )
    return sign_envelope(event, deterministic_admin_key(admin_id), admin_id, SIM_KEY_ID, directory)


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    name: str
    admins: list[dict] = field(default_factory=list)
    topics: list[str] = field(default_factory=list)
    taxonomy: list[dict] = field(default_factory=list)
    users: list[dict] = field(default_factory=list)
    models: list[dict] = field(default_factory=list)
    descriptors: list[dict] = field(default_factory=list)
    script: list[dict] = field(default_factory=list)
    assertions: list[dict] = field(default_factory=list)
    base_dir: Optional[Path] = None

    @staticmethod
    def from_dict(obj: dict, base_dir: Optional[Path] = None) -> "Scenario":
        known = {f for f in Scenario.__dataclass_fields__ if f != "base_dir"}
        unknown = set(obj) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {', '.join(sorted(unknown))}")
        if not obj.get("name"):
            raise ScenarioError("scenario needs a name")
        return Scenario(base_dir=base_dir, **obj)

    @staticmethod
    def load(ref: str | Path) -> "Scenario":
        """Load from a file path, or from the bundled scenarios by name."""
        path = Path(ref)
        if path.exists():
            return Scenario.from_dict(json.loads(path.read_text()), base_dir=path.parent)
        bundled = resources.files("ssc.data.scenarios").joinpath(f"{ref}.json")
        try:
            return Scenario.from_dict(json.loads(bundled.read_text()))
        except FileNotFoundError:
            raise ScenarioError(f"no scenario file or bundled scenario named {ref!r}")

    def resolve_golden(self, ref: str) -> list:
        if self.base_dir is not None and (self.base_dir / ref).exists():
            return json.loads((self.base_dir / ref).read_text())
        bundled = resources.files("ssc.data.scenarios").joinpath(ref)
        try:
            return json.loads(bundled.read_text())
        except FileNotFoundError:
            raise ScenarioError(f"golden file {ref!r} not found")


def seed_gateway(gateway, scenario: Scenario) -> None:
    """Materialize a scenario's entities; safe to repeat on every restart."""
    for spec in scenario.admins:
        SimulatedAdministration(
            admin_id=spec["admin_id"],
            services=dict(spec.get("services", {})),
            scripts={k: BackendScript(**v) for k, v in spec.get("scripts", {}).items()},
        ).spawn(gateway)
    for topic in scenario.topics:
        gateway.bus.create_topic(topic)
    import_taxonomy(gateway.registry, scenario.taxonomy)
    for user in scenario.users:
        if gateway.identity.has_user(user["user_id"]):
            continue
        public_key = None
        if user.get("strong_key"):
            public_key = deterministic_user_key(user["user_id"]).public_key().public_bytes_raw()
        gateway.identity.register_user(
            user["user_id"],
            user["password"],
            public_key=public_key,
            roles=set(user.get("roles", ())),
            static_profile=user.get("static_profile", {}),
        )
    for model in scenario.models:
        if not gateway.orchestrator.has_model(model["model_id"]):
            gateway.orchestrator.register_model(model)
    for desc in scenario.descriptors:
        if not gateway.registry.has_service(desc["service_id"]):
            gateway.registry.register_service(ServiceDescriptor.from_dict(desc))


# ---------------------------------------------------------------------------
# HTTP driver (the scenario's actors only ever speak to public endpoints)
# ---------------------------------------------------------------------------


class HttpClient:
    def __init__(self, base_url: str, timeout_s: float = 10.0, headers: Optional[dict] = None):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self.extra_headers = dict(headers or {})

    def request(self, method: str, path: str, payload=None, token: Optional[str] = None):
        data = None
        headers = dict(self.extra_headers)
        if payload is not None:
            data = payload if isinstance(payload, bytes) else json.dumps(payload).encode("utf-8")
            headers["Content-Type"] = "application/json"
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(self.base_url + path, data=data, headers=headers, method=method)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                return resp.status, json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            body = exc.read().decode("utf-8", "replace")
            try:
                return exc.code, json.loads(body)
            except json.JSONDecodeError:
                return exc.code, {"error": "Http", "detail": body}

    def get(self, path: str, token=None):
        return self.request("GET", path, token=token)

    def post(self, path: str, payload=None, token=None):
        return self.request("POST", path, payload=payload, token=token)


class ScriptContext(dict):
    def resolve(self, value):
        if isinstance(value, str) and value.startswith("$"):
            name = value[1:]
            if name not in self:
                raise ScenarioError(f"script references unknown binding {value}")
            return self[name]
        return value


def _expect(status: int, body: dict, step: dict) -> dict:
    if status >= 400:
        raise ScenarioError(f"step {step.get('action')} failed: HTTP {status} {body}")
    return body


def execute_action(client: HttpClient, gateway_directory, step: dict, ctx: ScriptContext) -> None:
    action = step.get("action")
    if action == "login":
        status, body = client.post(
            "/auth/login", {"user_id": step["user_id"], "password": step["password"]}
        )
        _expect(status, body, step)
        if step.get("save_as"):
            ctx[step["save_as"]] = body["token"]
    elif action == "submit_service":
        status, body = client.post(
            f"/services/{step['service']}/invoke",
            {"inputs": step.get("inputs", {}), "correlation": step.get("correlation")},
            token=ctx.resolve(step.get("token")),
        )
        _expect(status, body, step)
        if step.get("save_as"):
            ctx[step["save_as"]] = body.get("instance_id", body.get("correlation_id"))
    elif action == "publish_event":
        payload = json.dumps(step.get("payload", {}), sort_keys=True).encode("utf-8")
        event = signed_event(
            step["admin"], gateway_directory, correlation=step.get("correlation"), payload=payload
        )
        status, body = client.post(f"/topics/{step['topic']}/publish", serialize_envelope(event))
        _expect(status, body, step)
    elif action == "claim_first_task":
        params = []
        if step.get("role"):
            params.append(f"role={step['role']}")
        if step.get("instance"):
            params.append(f"instance={ctx.resolve(step['instance'])}")
        params.append("state=open")
        status, body = client.get("/tasks?" + "&".join(params))
        _expect(status, body, step)
        tasks = body["tasks"]
        if not tasks:
            raise ScenarioError(f"step claim_first_task: no open task for {step.get('role')}")
        task_id = tasks[0]["task_id"]
        status, body = client.post(f"/tasks/{task_id}/claim", {}, token=ctx.resolve(step.get("token")))
        _expect(status, body, step)
        if step.get("save_as"):
            ctx[step["save_as"]] = task_id
    elif action == "complete_task":
        status, body = client.post(
            f"/tasks/{ctx.resolve(step['task'])}/complete",
            {"outcome": step["outcome"]},
            token=ctx.resolve(step.get("token")),
        )
        _expect(status, body, step)
    elif action == "await_instance_status":
        deadline = time.monotonic() + float(step.get("timeout_s", 5.0))
        instance_id = ctx.resolve(step["instance"])
        last = None
        while time.monotonic() < deadline:
            status, body = client.get(f"/instances/{instance_id}")
            _expect(status, body, step)
            last = body["status"]
            if last == step["status"]:
                return
            time.sleep(0.05)
        raise ScenarioError(
            f"instance {instance_id} never reached {step['status']} (last={last})"
        )
    elif action == "advance_instance":
        status, body = client.post(f"/instances/{ctx.resolve(step['instance'])}/advance", {})
        _expect(status, body, step)
    else:
        raise ScenarioError(f"unknown script action {action!r}")


# ---------------------------------------------------------------------------
# Assertions and report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssertionResult:
    description: str
    passed: bool
    detail: str = ""


@dataclass
class ScenarioReport:
    name: str
    results: list[AssertionResult]
    trace: list[dict]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)


def evaluate_assertion(client: HttpClient, scenario: Scenario, spec: dict, ctx: ScriptContext) -> AssertionResult:
    kind = spec.get("kind")
    if kind == "instance_status":
        instance_id = ctx.resolve(spec["instance"])
        status, body = client.get(f"/instances/{instance_id}")
        got = body.get("status") if status < 400 else f"HTTP {status}"
        ok = got == spec["equals"]
        return AssertionResult(
            f"instance {instance_id} status == {spec['equals']}", ok, f"got {got}"
        )
    if kind == "task_state":
        task_id = ctx.resolve(spec["task"])
        status, body = client.get(f"/tasks/{task_id}")
        got = body.get("state") if status < 400 else f"HTTP {status}"
        ok = got == spec["equals"]
        return AssertionResult(f"task {task_id} state == {spec['equals']}", ok, f"got {got}")
    if kind == "trace_categories":
        golden = scenario.resolve_golden(spec["golden"])
        status, body = client.get(f"/audit/trace/{spec['correlation']}")
        if status >= 400:
            return AssertionResult("audit trace matches golden", False, f"HTTP {status}")
        got = [{"category": r["category"], "outcome": r["outcome"]} for r in body["records"]]
        ok = got == golden
        detail = "" if ok else f"got {json.dumps(got)}"
        return AssertionResult(
            f"trace({spec['correlation']}) matches {spec['golden']} ({len(golden)} records)", ok, detail
        )
    if kind == "audit_min_count":
        status, body = client.get(f"/audit?category={spec['category']}")
        count = len(body.get("records", [])) if status < 400 else 0
        ok = count >= int(spec["min"])
        return AssertionResult(
            f"audit has >= {spec['min']} {spec['category']} records", ok, f"got {count}"
        )
    raise ScenarioError(f"unknown assertion kind {kind!r}")


def run_scenario(gateway, scenario: Scenario | dict | str, base_url: Optional[str] = None) -> ScenarioReport:
    """Seed, execute the script through the public API, evaluate assertions."""
    if isinstance(scenario, (str, Path)):
        scenario = Scenario.load(scenario)
    elif isinstance(scenario, dict):
        scenario = Scenario.from_dict(scenario)

    seed_gateway(gateway, scenario)

    own_server = None
    if base_url is None:
        from ssc.http_api import GatewayServer

        own_server = GatewayServer(gateway, host="127.0.0.1", port=0)
        base_url = own_server.base_url
    client = HttpClient(base_url)
    ctx = ScriptContext()
    try:
        for step in scenario.script:
            execute_action(client, gateway.key_directory, step, ctx)
        results = [evaluate_assertion(client, scenario, spec, ctx) for spec in scenario.assertions]
        correlations = [a.get("correlation") for a in scenario.assertions if a.get("correlation")]
        trace = [r.to_dict() for r in gateway.audit.trace(correlations[0])] if correlations else []
        return ScenarioReport(name=scenario.name, results=results, trace=trace)
    finally:
        if own_server is not None:
            own_server.shutdown()


# ---------------------------------------------------------------------------
# Demo seeding
# ---------------------------------------------------------------------------

DEMO_TAXONOMY = [
    {"node_id": "trasloco", "label": "Moving house"},
    {"node_id": "trasloco.residenza", "label": "Changing residence", "parent": "trasloco"},
    {"node_id": "tributi", "label": "Paying local taxes"},
    {"node_id": "impresa", "label": "Running a business"},
]


def seed_demo(gateway, admin_count: int, participation_ratio: float = 0.8) -> list[str]:
    """Spawn round(admin_count * participation_ratio) administrations with
    the standard service set, plus a demo taxonomy and catalog entries.

    The knob abstracts the deployment shape this harness imitates: a
    regional center serving thousands of small municipalities, of which
    roughly 80% take part — hence the default ratio.
    """
    spawned = []
    count = int(round(admin_count * participation_ratio))
    import_taxonomy(gateway.registry, DEMO_TAXONOMY)
    for i in range(1, count + 1):
        admin_id = f"comune_{i:03d}"
        sim = SimulatedAdministration(
            admin_id=admin_id, services={svc: "echo" for svc in STANDARD_DEMO_SERVICES}
        )
        sim.spawn(gateway)
        spawned.append(admin_id)
        service_id = f"{admin_id}.anagrafe"
        if not gateway.registry.has_service(service_id):
            gateway.registry.register_service(
                ServiceDescriptor(
                    service_id=service_id,
                    provider_admin_id=admin_id,
                    title=f"Servizi anagrafici {admin_id}",
                    description="Registry office services",
                    life_events=frozenset({"trasloco.residenza"}),
                    usage_target="citizen",
                    min_auth_level="weak",
                    binding=ServiceBinding(kind="sync_port", admin_id=admin_id, service_id="anagrafe"),
                )
            )
    return spawned
