"""Port registry and synchronous request/response mediation.

The mediator sits between delegated ports and applicative ports: it
verifies the request signature, resolves the destination to exactly one
online endpoint, invokes it under a timeout, and hands back the backend's
response envelope. Every failure mode comes back as a fault envelope —
exchange_sync never raises to the caller — and every exchange leaves at
least two audit records (request, response/fault) sharing a correlation.

Endpoints are either in-process handles (bound callables, used by the
simulated administrations) or http(s) URLs (POST canonical envelope
bytes, response body = canonical envelope bytes).

Fail-closed: an envelope that does not verify is never delivered to any
applicative port. The mediator signs nothing itself — responses carry
the responding administration's own signature; fault envelopes built by
the mediator are mediation outcomes and stay unsigned.
"""

from __future__ import annotations

import json
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Callable, Optional

from ssc.audit import AuditLog
from ssc.envelope import (
    Envelope,
    KeyDirectory,
    PortAddress,
    ServiceAddress,
    build_envelope,
    parse_envelope,
    serialize_envelope,
    verify_envelope,
)
from ssc.errors import SscError
from ssc.util import iso_now

FAULT_CODES = ("no_route", "timeout", "verification_failed", "backend_fault", "unauthorized")

DEFAULT_SYNC_TIMEOUT_S = 5.0


class CooperationError(SscError):
    pass


class DuplicatePort(CooperationError):
    pass


class UnknownPort(CooperationError):
    pass


class NoRoute(CooperationError):
    pass


@dataclass(frozen=True)
class ApplicativePortRecord:
    admin_id: str
    service_id: str
    endpoint: str
    status: str  # online | offline
    registered_at: str


@dataclass(frozen=True)
class FaultInfo:
    code: str
    detail: str

    def to_payload(self) -> bytes:
        return json.dumps({"code": self.code, "detail": self.detail}, sort_keys=True).encode("utf-8")

    @staticmethod
    def from_payload(payload: bytes) -> "FaultInfo":
        obj = json.loads(payload.decode("utf-8"))
        return FaultInfo(code=obj["code"], detail=obj.get("detail", ""))


Handler = Callable[[Envelope], Envelope]


class CooperationMediator:
    def __init__(
        self,
        key_directory: KeyDirectory,
        audit: AuditLog,
        *,
        gateway_address: PortAddress = PortAddress("ssc", "gateway"),
        default_timeout_s: float = DEFAULT_SYNC_TIMEOUT_S,
    ) -> None:
        self._directory = key_directory
        self._audit = audit
        self._gateway_address = gateway_address
        self._default_timeout_s = default_timeout_s
        self._lock = threading.Lock()
        self._ports: dict[tuple[str, str], ApplicativePortRecord] = {}
        self._handlers: dict[str, Handler] = {}

    # -- port table ---------------------------------------------------------

    def register_applicative_port(self, admin_id: str, service_id: str, endpoint: str) -> ApplicativePortRecord:
        if not admin_id or not service_id:
            raise CooperationError("admin_id and service_id must be non-empty")
        if not endpoint:
            raise CooperationError("endpoint must be non-empty")
        key = (admin_id, service_id)
        with self._lock:
            existing = self._ports.get(key)
            if existing is not None and existing.status == "online":
                raise DuplicatePort(f"{admin_id}/{service_id} is already online")
            record = ApplicativePortRecord(admin_id, service_id, endpoint, "online", iso_now())
            self._ports[key] = record
            return record

    def deregister_applicative_port(self, admin_id: str, service_id: str) -> None:
        key = (admin_id, service_id)
        with self._lock:
            existing = self._ports.get(key)
            if existing is None or existing.status != "online":
                raise UnknownPort(f"{admin_id}/{service_id} is not online")
            self._ports[key] = ApplicativePortRecord(
                admin_id, service_id, existing.endpoint, "offline", existing.registered_at
            )

    def resolve_route(self, destination: ServiceAddress) -> str:
        with self._lock:
            record = self._ports.get((destination.admin_id, destination.service_id))
        if record is None or record.status != "online":
            raise NoRoute(f"no online port for {destination.admin_id}/{destination.service_id}")
        return record.endpoint

    def list_ports(self) -> list[ApplicativePortRecord]:
        with self._lock:
            return sorted(self._ports.values(), key=lambda r: (r.admin_id, r.service_id))

    def online_admins(self) -> list[str]:
        with self._lock:
            return sorted({r.admin_id for r in self._ports.values() if r.status == "online"})

    def bind_handler(self, handle_id: str, handler: Handler) -> None:
        """Attach an in-process backend behind a non-URL endpoint id."""
        with self._lock:
            self._handlers[handle_id] = handler

    # -- mediation ----------------------------------------------------------

    def exchange_sync(self, request: Envelope, timeout_s: Optional[float] = None) -> Envelope:
        """Mediate one synchronous exchange; always returns exactly one envelope."""
        timeout_s = self._default_timeout_s if timeout_s is None else timeout_s
        correlation = request.correlation_id or request.envelope_id
        subject = f"{request.destination.admin_id}/{request.destination.service_id}"
        self._audit.record(
            "exchange_request", correlation, request.sender.admin_id, subject, "ok",
            f"kind={request.message_kind} envelope={request.envelope_id}",
        )

        fault = self._precheck(request)
        if fault is None:
            try:
                endpoint = self.resolve_route(request.destination)
            except NoRoute as exc:
                fault = FaultInfo("no_route", str(exc))

        response: Optional[Envelope] = None
        if fault is None:
            response, fault = self._invoke(endpoint, request, timeout_s)
        if fault is None:
            fault = self._check_response_shape(request, response)

        if fault is not None:
            response = self._fault_envelope(request, fault)
            self._audit.record(
                "exchange_response", correlation, request.sender.admin_id, subject, "fault",
                f"code={fault.code} detail={fault.detail}",
            )
        else:
            outcome = "fault" if response.message_kind == "fault" else "ok"
            self._audit.record(
                "exchange_response", correlation, response.sender.admin_id, subject, outcome,
                f"kind={response.message_kind} envelope={response.envelope_id}",
            )
        return response

    def _precheck(self, request: Envelope) -> Optional[FaultInfo]:
        if request.profile != "sync" or request.message_kind != "request":
            return FaultInfo(
                "verification_failed",
                f"expected profile=sync kind=request, got {request.profile}/{request.message_kind}",
            )
        report = verify_envelope(request, self._directory)
        if not report.valid:
            return FaultInfo("verification_failed", report.reason or "invalid signature")
        return None

    def _invoke(
        self, endpoint: str, request: Envelope, timeout_s: float
    ) -> tuple[Optional[Envelope], Optional[FaultInfo]]:
        if endpoint.startswith("http://") or endpoint.startswith("https://"):
            return self._invoke_http(endpoint, request, timeout_s)
        return self._invoke_inprocess(endpoint, request, timeout_s)

    def _invoke_inprocess(
        self, endpoint: str, request: Envelope, timeout_s: float
    ) -> tuple[Optional[Envelope], Optional[FaultInfo]]:
        with self._lock:
            handler = self._handlers.get(endpoint)
        if handler is None:
            return None, FaultInfo("no_route", f"no handler bound for {endpoint}")

        result: list = []
        done = threading.Event()

        def run():
            try:
                result.append(("ok", handler(request)))
            except Exception as exc:  # backend bug surfaces as a fault, not a crash
                result.append(("error", exc))
            finally:
                done.set()

        # One thread per invocation: a stalled backend must not block the
        # mediator or other exchanges, only burn its own thread.
        threading.Thread(target=run, daemon=True, name=f"backend:{endpoint}").start()
        if not done.wait(timeout_s):
            return None, FaultInfo("timeout", f"backend exceeded {timeout_s}s")
        status, value = result[0]
        if status == "error":
            return None, FaultInfo("backend_fault", f"{type(value).__name__}: {value}")
        return value, None

    def _invoke_http(
        self, endpoint: str, request: Envelope, timeout_s: float
    ) -> tuple[Optional[Envelope], Optional[FaultInfo]]:
        req = urllib.request.Request(
            endpoint,
            data=serialize_envelope(request),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=timeout_s) as resp:
                body = resp.read()
        except urllib.error.HTTPError as exc:
            return None, FaultInfo("backend_fault", f"HTTP {exc.code} from {endpoint}")
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, TimeoutError) or "timed out" in str(exc.reason):
                return None, FaultInfo("timeout", f"backend exceeded {timeout_s}s")
            return None, FaultInfo("backend_fault", f"{endpoint}: {exc.reason}")
        except TimeoutError:
            return None, FaultInfo("timeout", f"backend exceeded {timeout_s}s")
        try:
            return parse_envelope(body), None
        except SscError as exc:
            return None, FaultInfo("backend_fault", f"unparsable response: {exc}")

    def _check_response_shape(self, request: Envelope, response: Envelope) -> Optional[FaultInfo]:
        if response.message_kind not in ("response", "fault"):
            return FaultInfo("backend_fault", f"backend returned kind={response.message_kind}")
        if response.correlation_id != request.envelope_id:
            return FaultInfo(
                "backend_fault",
                f"correlation mismatch: got {response.correlation_id}, want {request.envelope_id}",
            )
        return None

    def _fault_envelope(self, request: Envelope, fault: FaultInfo) -> Envelope:
        return build_envelope(
            self._gateway_address,
            ServiceAddress(request.sender.admin_id, request.sender.port_id),
            "sync",
            "fault",
            fault.to_payload(),
            content_type="application/json",
            correlation_id=request.envelope_id,
        )
