"""HTTP+JSON surface consolidating every module endpoint, plus /health.

Built on the stdlib threading HTTP server: each request runs on its own
thread against the shared Gateway, whose modules carry their own locking.
Envelope-bearing endpoints speak canonical envelope bytes; everything else
is plain JSON. Errors map by exception class to conventional status codes
and a JSON body {"error": <class>, "detail": <message>}.

CORS is open to the configured origins so browser portals on a separate
origin can talk to the gateway directly.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import asdict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, urlparse

from ssc.envelope import envelope_to_dict, envelope_from_dict, parse_envelope, serialize_envelope
from ssc.errors import SscError
from ssc.gateway import Gateway
from ssc.orchestration import ProcessInstance
from ssc.registry import ServiceDescriptor
from ssc.storage import StorageCorrupt, StorageFailure

_STATUS_404 = {
    "UnknownTopic", "UnknownSubscription", "UnknownModel", "UnknownInstance", "UnknownTask",
    "UnknownUser", "UnknownService", "UnknownLifeEvent", "UnknownPort", "NoRoute",
    "UnknownParent", "UnknownKey",
}
_STATUS_409 = {
    "DuplicatePort", "DuplicateNode", "DuplicateService", "DuplicateUser", "DuplicateKey",
    "AlreadyClaimed", "AlreadyCompleted", "AlreadySigned", "CursorRegression",
}
_STATUS_401 = {"BadCredential", "InvalidToken", "ExpiredToken", "NoStrongCredential"}
_STATUS_403 = {"RoleDenied", "NotClaimant", "AuthorizationDenied"}


def _status_for(exc: SscError) -> int:
    name = type(exc).__name__
    if isinstance(exc, (StorageFailure, StorageCorrupt)):
        return 500
    if name in _STATUS_404:
        return 404
    if name in _STATUS_409:
        return 409
    if name in _STATUS_401:
        return 401
    if name in _STATUS_403:
        return 403
    return 400


def instance_to_dict(snapshot: ProcessInstance) -> dict:
    return {
        "instance_id": snapshot.instance_id,
        "model_id": snapshot.model_id,
        "version": snapshot.version,
        "correlation_id": snapshot.correlation_id,
        "status": snapshot.status,
        "variables": dict(snapshot.variables),
        "frontier": sorted(snapshot.frontier),
        "history": [rec.to_dict() for rec in snapshot.history],
    }


def _json_body(body: bytes) -> dict:
    if not body:
        return {}
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SscError(f"request body is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SscError("request body must be a JSON object")
    return obj


class _Routes:
    """(method, path regex) -> handler(gateway, match, body, query, token)."""

    def __init__(self) -> None:
        self.table: list[tuple[str, re.Pattern, object]] = []

    def add(self, method: str, pattern: str):
        compiled = re.compile("^" + pattern + "$")

        def register(fn):
            self.table.append((method, compiled, fn))
            return fn

        return register


routes = _Routes()


@routes.add("GET", r"/health")
def _health(gw: Gateway, m, body, query, token):
    return 200, gw.healthcheck()


# -- cooperation ---------------------------------------------------------------


@routes.add("POST", r"/exchange")
def _exchange(gw: Gateway, m, body, query, token):
    request = parse_envelope(body)
    response = gw.mediator.exchange_sync(request)
    return 200, serialize_envelope(response)


@routes.add("POST", r"/ports")
def _register_port(gw: Gateway, m, body, query, token):
    obj = _json_body(body)
    record = gw.mediator.register_applicative_port(obj["admin_id"], obj["service_id"], obj["endpoint"])
    return 201, asdict(record)


@routes.add("POST", r"/ports/deregister")
def _deregister_port(gw: Gateway, m, body, query, token):
    obj = _json_body(body)
    gw.mediator.deregister_applicative_port(obj["admin_id"], obj["service_id"])
    return 200, {"status": "offline"}


@routes.add("GET", r"/ports")
def _list_ports(gw: Gateway, m, body, query, token):
    return 200, {"ports": [asdict(r) for r in gw.mediator.list_ports()]}


# -- eventbus --------------------------------------------------------------------


@routes.add("POST", r"/topics")
def _create_topic(gw: Gateway, m, body, query, token):
    topic = gw.bus.create_topic(_json_body(body)["name"])
    return 201, asdict(topic)


@routes.add("POST", r"/topics/([a-z0-9_.]+)/publish")
def _publish(gw: Gateway, m, body, query, token):
    event = parse_envelope(body)
    receipt = gw.publish_event(m.group(1), event)
    return 200, asdict(receipt)


@routes.add("POST", r"/subscriptions")
def _subscribe(gw: Gateway, m, body, query, token):
    obj = _json_body(body)
    sub = gw.bus.subscribe(
        (obj["admin_id"], obj["port_id"]), obj["topic"], bool(obj.get("durable", False))
    )
    return 201, asdict(sub)


@routes.add("POST", r"/subscriptions/([A-Za-z0-9_-]+)/pull")
def _pull(gw: Gateway, m, body, query, token):
    obj = _json_body(body)
    events = gw.bus.pull(m.group(1), int(obj.get("max", 100)))
    return 200, {
        "events": [{"global_seq": g, "envelope": envelope_to_dict(e)} for g, e in events]
    }


@routes.add("POST", r"/subscriptions/([A-Za-z0-9_-]+)/ack")
def _ack(gw: Gateway, m, body, query, token):
    gw.bus.ack(m.group(1), int(_json_body(body)["up_to"]))
    return 200, {"status": "acked"}


# -- orchestration ------------------------------------------------------------------


@routes.add("POST", r"/models")
def _register_model(gw: Gateway, m, body, query, token):
    model_id, version = gw.orchestrator.register_model(_json_body(body))
    return 201, {"model_id": model_id, "version": version}


@routes.add("POST", r"/instances")
def _start_instance(gw: Gateway, m, body, query, token):
    obj = _json_body(body)
    instance_id = gw.orchestrator.start_instance(
        obj["model_id"],
        version=obj.get("version"),
        inputs=obj.get("inputs", {}),
        correlation_id=obj.get("correlation_id"),
    )
    return 201, instance_to_dict(gw.orchestrator.instance_state(instance_id))


@routes.add("GET", r"/instances/([A-Za-z0-9_-]+)")
def _instance_state(gw: Gateway, m, body, query, token):
    return 200, instance_to_dict(gw.orchestrator.instance_state(m.group(1)))


@routes.add("GET", r"/instances")
def _instances_by_correlation(gw: Gateway, m, body, query, token):
    correlation = query.get("correlation_id", [None])[0]
    ids = gw.orchestrator.find_by_correlation(correlation) if correlation else gw.orchestrator.list_instances()
    return 200, {"instance_ids": ids}


@routes.add("POST", r"/instances/([A-Za-z0-9_-]+)/advance")
def _advance(gw: Gateway, m, body, query, token):
    return 200, instance_to_dict(gw.orchestrator.advance(m.group(1)))


@routes.add("GET", r"/tasks")
def _list_tasks(gw: Gateway, m, body, query, token):
    tasks = gw.orchestrator.list_tasks(
        role=query.get("role", [None])[0],
        state=query.get("state", [None])[0],
        instance_id=query.get("instance", [None])[0],
    )
    return 200, {"tasks": [asdict(t) for t in tasks]}


@routes.add("GET", r"/tasks/([A-Za-z0-9_-]+)")
def _get_task(gw: Gateway, m, body, query, token):
    return 200, asdict(gw.orchestrator.get_task(m.group(1)))


@routes.add("POST", r"/tasks/([A-Za-z0-9_-]+)/claim")
def _claim_task(gw: Gateway, m, body, query, token):
    user_id, _ = gw.identity.validate_token(token or "")
    return 200, asdict(gw.orchestrator.claim_task(m.group(1), user_id))


@routes.add("POST", r"/tasks/([A-Za-z0-9_-]+)/complete")
def _complete_task(gw: Gateway, m, body, query, token):
    user_id, _ = gw.identity.validate_token(token or "")
    snapshot = gw.orchestrator.complete_task(m.group(1), user_id, _json_body(body)["outcome"])
    return 200, instance_to_dict(snapshot)


# -- registry -------------------------------------------------------------------------


@routes.add("GET", r"/taxonomy")
def _taxonomy(gw: Gateway, m, body, query, token):
    return 200, {"nodes": [asdict(n) for n in gw.registry.list_taxonomy()]}


@routes.add("POST", r"/taxonomy")
def _add_node(gw: Gateway, m, body, query, token):
    obj = _json_body(body)
    node = gw.registry.add_life_event(obj["node_id"], obj.get("label", obj["node_id"]), obj.get("parent"))
    return 201, asdict(node)


@routes.add("POST", r"/services")
def _register_service(gw: Gateway, m, body, query, token):
    gw.registry.register_service(ServiceDescriptor.from_dict(_json_body(body)))
    return 201, {"status": "registered"}


@routes.add("GET", r"/services/([A-Za-z0-9_.-]+)")
def _get_service(gw: Gateway, m, body, query, token):
    return 200, gw.registry.get_descriptor(m.group(1)).to_dict()


@routes.add("GET", r"/services")
def _find_services(gw: Gateway, m, body, query, token):
    life_event = query.get("life_event", [None])[0]
    target = query.get("target", [None])[0]
    if life_event:
        found = gw.registry.find_by_life_event(life_event, target)
    else:
        found = gw.registry.list_services(target)
    return 200, {"services": [d.to_dict() for d in found]}


@routes.add("POST", r"/services/([A-Za-z0-9_.-]+)/invoke")
def _invoke_service(gw: Gateway, m, body, query, token):
    obj = _json_body(body)
    return 200, gw.invoke_service(
        m.group(1), token, inputs=obj.get("inputs", {}), correlation=obj.get("correlation")
    )


# -- identity -----------------------------------------------------------------------


@routes.add("POST", r"/auth/register")
def _register_user(gw: Gateway, m, body, query, token):
    obj = _json_body(body)
    user_id = gw.identity.register_user(
        obj["user_id"],
        obj["password"],
        public_key=bytes.fromhex(obj["public_key"]) if obj.get("public_key") else None,
        roles=set(obj.get("roles", ())),
        static_profile=obj.get("static_profile", {}),
    )
    return 201, {"user_id": user_id}


@routes.add("POST", r"/auth/login")
def _login(gw: Gateway, m, body, query, token):
    obj = _json_body(body)
    issued = gw.identity.authenticate_password(obj["user_id"], obj["password"])
    user_id, level = gw.identity.validate_token(issued)
    return 200, {"token": issued, "user_id": user_id, "level": level}


@routes.add("POST", r"/auth/challenge")
def _challenge(gw: Gateway, m, body, query, token):
    import base64

    challenge_id, nonce = gw.identity.issue_challenge(_json_body(body)["user_id"])
    return 200, {"challenge_id": challenge_id, "nonce_b64": base64.b64encode(nonce).decode("ascii")}


@routes.add("POST", r"/auth/respond")
def _respond(gw: Gateway, m, body, query, token):
    import base64

    obj = _json_body(body)
    issued = gw.identity.authenticate_challenge(
        obj["user_id"], obj["challenge_id"], base64.b64decode(obj["signature_b64"])
    )
    user_id, level = gw.identity.validate_token(issued)
    return 200, {"token": issued, "user_id": user_id, "level": level}


@routes.add("GET", r"/profile")
def _profile(gw: Gateway, m, body, query, token):
    user_id, level = gw.identity.validate_token(token or "")
    static, dynamic = gw.identity.get_profile(user_id)
    return 200, {
        "user_id": user_id,
        "level": level,
        "roles": gw.identity.get_roles(user_id),
        "static_profile": static,
        "dynamic_preferences": dynamic,
    }


@routes.add("PATCH", r"/profile/preferences")
def _preferences(gw: Gateway, m, body, query, token):
    user_id, _ = gw.identity.validate_token(token or "")
    return 200, {"dynamic_preferences": gw.identity.update_preferences(user_id, _json_body(body))}


# -- audit ---------------------------------------------------------------------------


@routes.add("GET", r"/audit")
def _audit_query(gw: Gateway, m, body, query, token):
    records = gw.audit.query(
        ts_from=query.get("from", [None])[0],
        ts_to=query.get("to", [None])[0],
        category=query.get("category", [None])[0],
        actor=query.get("actor", [None])[0],
        subject=query.get("subject", [None])[0],
        outcome=query.get("outcome", [None])[0],
    )
    return 200, {"records": [r.to_dict() for r in records]}


@routes.add("GET", r"/audit/trace/([^/]+)")
def _audit_trace(gw: Gateway, m, body, query, token):
    return 200, {"records": [r.to_dict() for r in gw.audit.trace(m.group(1))]}


# -- server ----------------------------------------------------------------------------


class GatewayRequestHandler(BaseHTTPRequestHandler):
    gateway: Gateway = None  # set by make_server
    cors_origins: list[str] = ["*"]
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route handler noise to nowhere
        pass

    def _cors_headers(self):
        origin = self.headers.get("Origin")
        allowed = "*" if "*" in self.cors_origins else (origin if origin in self.cors_origins else "")
        if allowed:
            self.send_header("Access-Control-Allow-Origin", allowed)
            self.send_header("Access-Control-Allow-Methods", "GET, POST, PATCH, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type, Authorization")

    def _reply(self, status: int, payload) -> None:
        data = payload if isinstance(payload, bytes) else json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self._cors_headers()
        self.end_headers()
        self.wfile.write(data)

    def _bearer(self) -> Optional[str]:
        header = self.headers.get("Authorization", "")
        if header.startswith("Bearer "):
            return header[len("Bearer "):]
        return None

    def _dispatch(self, method: str) -> None:
        parsed = urlparse(self.path)
        query = parse_qs(parsed.query)
        length = int(self.headers.get("Content-Length", 0) or 0)
        body = self.rfile.read(length) if length else b""
        for route_method, pattern, fn in routes.table:
            if route_method != method:
                continue
            match = pattern.match(parsed.path)
            if not match:
                continue
            try:
                status, payload = fn(self.gateway, match, body, query, self._bearer())
            except SscError as exc:
                self._reply(_status_for(exc), {"error": type(exc).__name__, "detail": str(exc)})
            except (KeyError, ValueError, TypeError) as exc:
                self._reply(400, {"error": "BadRequest", "detail": f"{type(exc).__name__}: {exc}"})
            else:
                self._reply(status, payload)
            return
        self._reply(404, {"error": "NotFound", "detail": f"no route for {method} {parsed.path}"})

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_PATCH(self):
        self._dispatch("PATCH")

    def do_OPTIONS(self):
        self.send_response(204)
        self._cors_headers()
        self.send_header("Content-Length", "0")
        self.end_headers()


class GatewayServer:
    """A Gateway bound to a listening HTTP server on its own thread."""

    def __init__(self, gateway: Gateway, host: Optional[str] = None, port: Optional[int] = None):
        self.gateway = gateway
        handler = type(
            "BoundHandler",
            (GatewayRequestHandler,),
            {"gateway": gateway, "cors_origins": gateway.config.cors_origins},
        )
        self._httpd = ThreadingHTTPServer(
            (host if host is not None else gateway.config.host,
             port if port is not None else gateway.config.port),
            handler,
        )
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(
            target=lambda: self._httpd.serve_forever(poll_interval=0.05),
            daemon=True,
            name="ssc-http",
        )
        self._thread.start()

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def base_url(self) -> str:
        host = self._httpd.server_address[0]
        return f"http://{host}:{self.port}"

    def shutdown(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()


def serve(config_or_gateway, host: Optional[str] = None, port: Optional[int] = None) -> GatewayServer:
    """Bring up a gateway (recovering its stores) and expose the HTTP API."""
    gateway = config_or_gateway if isinstance(config_or_gateway, Gateway) else Gateway(config_or_gateway)
    return GatewayServer(gateway, host=host, port=port)
