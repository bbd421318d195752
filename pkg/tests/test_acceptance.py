"""Acceptance suite: one test per release criterion, each with a hard
runtime budget and a visible pass/fail line.

Run it alone with `pytest tests/test_acceptance.py -q` — the criterion
lines print even under capture.
"""

import json
import os
import random
import signal
import socket
import subprocess
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import pytest

from oracle_canonical import oracle_canonical_bytes
from ssc.audit import AuditLog
from ssc.cooperation import CooperationMediator, FaultInfo
from ssc.envelope import (
    SIGNATURE_ALGORITHMS,
    KeyDirectory,
    PortAddress,
    ServiceAddress,
    build_envelope,
    canonical_bytes,
    generate_keypair,
    parse_envelope,
    serialize_envelope,
    sign_envelope,
)
from ssc.eventbus import EventBus
from ssc.gateway import Gateway, GatewayConfig
from ssc.harness import (
    SIM_KEY_ID,
    BackendScript,
    HttpClient,
    Scenario,
    ScriptContext,
    SimulatedAdministration,
    deterministic_admin_key,
    execute_action,
    run_scenario,
    signed_event,
)
from ssc.http_api import GatewayServer
from ssc.orchestration import AlreadyClaimed, AlreadyCompleted, Orchestrator, replay_instance
from ssc.registry import ServiceBinding, ServiceDescriptor, ServiceRegistry

SRC = str(Path(__file__).resolve().parents[1] / "src")


@pytest.fixture()
def criterion(capsys):
    @contextmanager
    def run(name: str, budget_s: float):
        start = time.perf_counter()
        try:
            yield
        except BaseException:
            with capsys.disabled():
                print(f"[FAIL] {name} ({time.perf_counter() - start:.2f}s)")
            raise
        elapsed = time.perf_counter() - start
        ok = elapsed < budget_s
        with capsys.disabled():
            print(f"[{'PASS' if ok else 'FAIL'}] {name} ({elapsed:.2f}s, budget {budget_s:.0f}s)")
        assert ok, f"{name}: {elapsed:.2f}s exceeded the {budget_s}s budget"

    return run


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

_CHARS = (
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .,;:-_/"
    'àèìòù€"\\\n\t\x01'
)


def random_envelope(rng: random.Random):
    kind = rng.choice(["request", "response", "event", "fault"])
    needs_corr = kind in ("response", "fault")
    correlation = (
        "corr-" + str(rng.randrange(10**6)) if needs_corr or rng.random() < 0.5 else None
    )
    text = lambda n: "".join(rng.choice(_CHARS) for _ in range(rng.randint(0, n)))  # noqa: E731
    ident = lambda: "id" + str(rng.randrange(10**9))  # noqa: E731
    return build_envelope(
        PortAddress(ident(), ident()),
        ServiceAddress(ident(), ident()),
        rng.choice(["sync", "async_event", "async_process"]),
        kind,
        bytes(rng.randrange(256) for _ in range(rng.randint(0, 64))),
        content_type="application/x-" + text(20).replace("\x01", ""),
        correlation_id=correlation,
    )


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def wait_health(port: int, deadline_s: float = 20.0) -> None:
    import urllib.request

    deadline = time.monotonic() + deadline_s
    last = None
    while time.monotonic() < deadline:
        try:
            with urllib.request.urlopen(f"http://127.0.0.1:{port}/health", timeout=2):
                return
        except Exception as exc:  # noqa: BLE001
            last = exc
            time.sleep(0.05)
    raise AssertionError(f"gateway on :{port} never became healthy: {last}")


# ---------------------------------------------------------------------------
# 1. envelope suite
# ---------------------------------------------------------------------------


def test_envelope_suite(criterion):
    with criterion("envelope: 1000 round-trips, 100 oracle matches, exhaustive tamper", 10.0):
        rng = random.Random(20260808)

        for _ in range(1000):
            env = random_envelope(rng)
            assert parse_envelope(serialize_envelope(env)) == env

        for _ in range(100):
            env = random_envelope(rng)
            assert canonical_bytes(env) == oracle_canonical_bytes(env)

        directory = KeyDirectory()
        priv, pub = generate_keypair()
        _, verify = SIGNATURE_ALGORITHMS["ed25519"]
        rejected = total = 0
        for i in range(50):
            env = random_envelope(rng)
            env = replace(env, sender=PortAddress("firmataria", env.sender.port_id), security=None)
            key_id = f"k{i}"
            directory.add_key("firmataria", key_id, pub)
            signed = sign_envelope(env, priv, "firmataria", key_id, directory)
            content = canonical_bytes(signed)
            for pos in range(len(content)):
                mutated = bytearray(content)
                mutated[pos] ^= 0x01
                total += 1
                if not verify(pub, signed.security.signature, bytes(mutated)):
                    rejected += 1
        assert rejected == total, f"{total - rejected} tampered byte positions went undetected"


# ---------------------------------------------------------------------------
# 2. cooperation
# ---------------------------------------------------------------------------


def test_cooperation_concurrent_exchanges(criterion, tmp_path):
    with criterion("cooperation: 1000 concurrent exchanges, fault + timeout paths", 30.0):
        gateway = Gateway(GatewayConfig(storage_path=str(tmp_path / "data")))
        admins = [f"comune_{i}" for i in range(3)]
        for admin in admins:
            SimulatedAdministration(admin, services={"anagrafe": "echo"}).spawn(gateway)

        directory = gateway.key_directory
        req_priv, req_pub = generate_keypair()
        directory.add_key("porta_test", "kt", req_pub)

        def one_exchange(i: int):
            target = admins[i % 3]
            payload = json.dumps({"n": i, "target": target})
            request = build_envelope(
                PortAddress("porta_test", "delegata"),
                ServiceAddress(target, "anagrafe"),
                "sync",
                "request",
                payload,
            )
            request = sign_envelope(request, req_priv, "porta_test", "kt", directory)
            response = gateway.mediator.exchange_sync(request)
            assert response.message_kind == "response", response.body.payload
            assert response.correlation_id == request.envelope_id
            body = json.loads(response.body.payload)
            assert body["admin"] == target, f"cross-routed: wanted {target}, got {body['admin']}"
            assert json.loads(body["echo"])["n"] == i

        with ThreadPoolExecutor(max_workers=32) as pool:
            for result in pool.map(one_exchange, range(1000)):
                pass

        # injected backend fault: exactly one fault envelope, >= 2 audit records
        SimulatedAdministration(
            "comune_guasto",
            services={"anagrafe": "echo"},
            scripts={"anagrafe": BackendScript(fault="raise", fault_detail="injected outage")},
        ).spawn(gateway)
        request = build_envelope(
            PortAddress("porta_test", "delegata"),
            ServiceAddress("comune_guasto", "anagrafe"),
            "sync",
            "request",
            b"{}",
        )
        request = sign_envelope(request, req_priv, "porta_test", "kt", directory)
        fault = gateway.mediator.exchange_sync(request)
        assert fault.message_kind == "fault"
        assert FaultInfo.from_payload(fault.body.payload).code == "backend_fault"
        assert len(gateway.audit.trace(request.envelope_id)) >= 2

        # injected timeout
        SimulatedAdministration(
            "comune_lento",
            services={"anagrafe": "echo"},
            scripts={"anagrafe": BackendScript(latency_s=1.0)},
        ).spawn(gateway)
        request = build_envelope(
            PortAddress("porta_test", "delegata"),
            ServiceAddress("comune_lento", "anagrafe"),
            "sync",
            "request",
            b"{}",
        )
        request = sign_envelope(request, req_priv, "porta_test", "kt", directory)
        start = time.monotonic()
        fault = gateway.mediator.exchange_sync(request, timeout_s=0.2)
        elapsed = time.monotonic() - start
        assert fault.message_kind == "fault"
        assert FaultInfo.from_payload(fault.body.payload).code == "timeout"
        assert elapsed < 0.2 + 0.1
        assert len(gateway.audit.trace(request.envelope_id)) >= 2
        gateway.close()


# ---------------------------------------------------------------------------
# 3. event bus
# ---------------------------------------------------------------------------


def test_eventbus_firehose_with_restart(criterion, tmp_path):
    with criterion("eventbus: 10k events, 4 publishers, 5 durable subs, restart mid-stream", 60.0):
        config = GatewayConfig(storage_path=str(tmp_path / "data"))
        publishers = [f"editore_{i}" for i in range(4)]
        per_publisher = 2500
        half = per_publisher // 2
        topic = "flusso.dati"

        gateway = Gateway(config)
        gateway.bus.create_topic(topic)
        gateway.bus.create_topic("deserto.vuoto")
        for admin in publishers:
            SimulatedAdministration(admin, services={}).spawn(gateway)
        subs = [
            gateway.bus.subscribe(("lettore", f"p{i}"), topic, durable=True).sub_id
            for i in range(5)
        ]

        def publish_range(gw, admin, start, stop):
            for i in range(start, stop):
                payload = json.dumps({"p": admin, "i": i}).encode()
                event = signed_event(admin, gw.key_directory, correlation=None, payload=payload)
                gw.bus.publish(event, topic)

        threads = [
            threading.Thread(target=publish_range, args=(gateway, admin, 0, half))
            for admin in publishers
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

        received = {sub: [] for sub in subs}
        for sub in subs:  # partial consumption before the crash
            batch = gateway.bus.pull(sub, 1000)
            received[sub].extend(batch)
            gateway.bus.ack(sub, batch[-1][0])

        # hard restart: abandon the old gateway object, replay the same storage
        gateway2 = Gateway(config)
        for admin in publishers:
            SimulatedAdministration(admin, services={}).spawn(gateway2)
        threads = [
            threading.Thread(target=publish_range, args=(gateway2, admin, half, per_publisher))
            for admin in publishers
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

        # decoupling: zero subscribers, zero pulls, still acknowledged
        lonely = signed_event(publishers[0], gateway2.key_directory, correlation=None, payload=b"{}")
        assert gateway2.bus.publish(lonely, "deserto.vuoto").global_seq == 1

        for sub in subs:
            while True:
                batch = gateway2.bus.pull(sub, 500)
                if not batch:
                    break
                received[sub].extend(batch)
                gateway2.bus.ack(sub, batch[-1][0])

        expected = {(admin, i) for admin in publishers for i in range(per_publisher)}
        for sub, events in received.items():
            seen = []
            for _, env in events:
                body = json.loads(env.body.payload)
                seen.append((body["p"], body["i"]))
            assert set(seen) == expected, f"sub {sub}: lost {len(expected - set(seen))} events"
            assert len(seen) == len(expected), f"sub {sub}: duplicates delivered"
            per_pub_order = {}
            for admin, i in seen:
                per_pub_order.setdefault(admin, []).append(i)
            for admin, order in per_pub_order.items():
                assert order == sorted(order), f"sub {sub}: FIFO broken for {admin}"
        gateway2.close()


# ---------------------------------------------------------------------------
# 4. orchestration
# ---------------------------------------------------------------------------

PARALLEL_MODEL = {
    "model_id": "parallel2",
    "entry_step": "split",
    "variables": ["case_id", "left", "right"],
    "steps": {
        "split": {"kind": "parallel_split", "branches": ["wait_a", "wait_b"], "join": "meet"},
        "wait_a": {
            "kind": "wait_event", "topic": "ramo.a", "correlation_var": "case_id",
            "output_var": "left", "next": "meet",
        },
        "wait_b": {
            "kind": "wait_event", "topic": "ramo.b", "correlation_var": "case_id",
            "output_var": "right", "next": "meet",
        },
        "meet": {"kind": "join", "arity": 2, "next": "end"},
        "end": {"kind": "terminate", "status": "completed"},
    },
}

TASK_MODEL = {
    "model_id": "contesa",
    "entry_step": "approva",
    "variables": ["decisione"],
    "steps": {
        "approva": {
            "kind": "human_task", "role": "operatore", "prompt_template": "decidere",
            "outcome_var": "decisione", "next": "end",
        },
        "end": {"kind": "terminate", "status": "completed"},
    },
}


def _bare_engine():
    return Orchestrator(
        service_invoker=lambda d, p, c: (_ for _ in ()).throw(RuntimeError("unused")),
        role_checker=lambda user, role: True,
        audit=AuditLog(),
    )


def test_orchestration_join_replay_and_claim_races(criterion):
    with criterion("orchestration: 200 join interleavings, replay equality, 50-way claim race", 60.0):
        rng = random.Random(42)
        event = lambda topic_corr: build_envelope(  # noqa: E731
            PortAddress("sim", "eventi"), ServiceAddress("ssc", "bus"),
            "async_event", "event", b'"x"', correlation_id=topic_corr,
        )

        for trial in range(200):
            engine = _bare_engine()
            engine.register_model(PARALLEL_MODEL)
            iid = engine.start_instance("parallel2", inputs={"case_id": f"c{trial}"})
            deliveries = [("ramo.a", event(f"c{trial}")), ("ramo.b", event(f"c{trial}"))]
            rng.shuffle(deliveries)
            if trial % 2:  # alternate: concurrent and sequential interleavings
                threads = [
                    threading.Thread(target=engine.deliver_event, args=(t, e))
                    for t, e in deliveries
                ]
                for t in threads:
                    t.start()
                for t in threads:
                    t.join()
            else:
                for t, e in deliveries:
                    engine.deliver_event(t, e)
                    engine.advance(iid)

            snap = engine.instance_state(iid)
            assert snap.status == "completed", trial
            # brute-force oracle: linear scan counts the join exactly once
            assert sum(1 for r in snap.history if r.kind == "join") == 1, trial

            model = engine.get_model("parallel2", snap.version)
            variables, frontier, status = replay_instance(
                model, {"case_id": f"c{trial}"}, snap.correlation_id, list(snap.history)
            )
            assert (variables, frontier, status) == (snap.variables, snap.frontier, snap.status)

        engine = _bare_engine()
        engine.register_model(TASK_MODEL)
        iid = engine.start_instance("contesa")
        task = engine.list_tasks(instance_id=iid)[0]
        outcomes = []

        def try_claim(user):
            try:
                engine.claim_task(task.task_id, user)
                outcomes.append(user)
            except AlreadyClaimed:
                pass

        threads = [threading.Thread(target=try_claim, args=(f"utente{i}",)) for i in range(50)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(outcomes) == 1, f"claim race had {len(outcomes)} winners"

        winner = outcomes[0]
        engine.complete_task(task.task_id, winner, "fatto")
        with pytest.raises(AlreadyCompleted):
            engine.complete_task(task.task_id, winner, "ancora")
        assert engine.instance_state(iid).status == "completed"


# ---------------------------------------------------------------------------
# 5. registry
# ---------------------------------------------------------------------------


def test_registry_against_brute_force(criterion):
    with criterion("registry: 50 random forests vs exhaustive descendant walk", 10.0):
        rng = random.Random(7)
        for trial in range(50):
            registry = ServiceRegistry()
            node_count = rng.randint(1, 100)
            nodes = []
            for i in range(node_count):
                node_id = f"n{i:03d}"
                parent = rng.choice(nodes) if nodes and rng.random() < 0.75 else None
                registry.add_life_event(node_id, node_id, parent)
                nodes.append(node_id)
            parent_of = {n.node_id: n.parent for n in registry.list_taxonomy()}

            descriptors = []
            for j in range(rng.randint(0, 200)):
                tags = frozenset(rng.sample(nodes, k=rng.randint(1, min(3, len(nodes)))))
                desc = ServiceDescriptor(
                    service_id=f"s{j:03d}",
                    provider_admin_id=f"ente{j % 7}",
                    title="",
                    description="",
                    life_events=tags,
                    usage_target=rng.choice(["citizen", "business", "administration"]),
                    min_auth_level="none",
                    binding=ServiceBinding(kind="process", model_id="m"),
                )
                registry.register_service(desc)
                descriptors.append(desc)

            def ancestors_of(node_id):
                chain = []
                while node_id is not None:
                    chain.append(node_id)
                    node_id = parent_of[node_id]
                return chain

            for _ in range(8):
                query = rng.choice(nodes)
                target = rng.choice([None, "citizen", "business", "administration"])
                expected = sorted(
                    (
                        d
                        for d in descriptors
                        if any(query in ancestors_of(tag) for tag in d.life_events)
                        and (target is None or d.usage_target == target)
                    ),
                    key=lambda d: (d.provider_admin_id, d.service_id),
                )
                assert registry.find_by_life_event(query, target) == expected, trial


# ---------------------------------------------------------------------------
# 6. identity / SSO
# ---------------------------------------------------------------------------


def test_identity_sso_across_endpoints_and_portals(criterion, tmp_path):
    with criterion("identity: one login for every endpoint via two portal origins", 10.0):
        gateway = Gateway(GatewayConfig(storage_path=str(tmp_path / "data")))
        server = GatewayServer(gateway, host="127.0.0.1", port=0)
        from ssc.harness import seed_gateway

        seed_gateway(gateway, Scenario.load("residence_change"))

        portal_a = HttpClient(server.base_url, headers={"Origin": "http://portale-regionale"})
        portal_b = HttpClient(server.base_url, headers={"Origin": "http://portale-comunale"})

        # exactly one login for the operator
        status, login = portal_a.post(
            "/auth/login", {"user_id": "anna", "password": "sportello-anna-1"}
        )
        assert status == 200
        token = login["token"]

        # the same token drives every authenticated endpoint from both portals
        status, _ = portal_a.get("/profile", token=token)
        assert status == 200
        status, _ = portal_b.get("/profile", token=token)
        assert status == 200
        status, _ = portal_b.request("PATCH", "/profile/preferences", {"tema": "scuro"}, token=token)
        assert status == 200

        status, result = portal_a.post(
            "/services/cambio-residenza/invoke",
            {"inputs": {"citizen": "anna", "case_id": "sso-1"}, "correlation": "sso-1"},
            token=token,
        )
        assert status == 200
        instance_id = result["instance_id"]

        event = signed_event(
            "scuola", gateway.key_directory, correlation="sso-1", payload=b'{"esito":"ok"}'
        )
        gateway.publish_event("scuola.iscrizione.trasferita", event)

        status, tasks = portal_b.get(f"/tasks?instance={instance_id}&state=open")
        task_id = tasks["tasks"][0]["task_id"]
        status, _ = portal_b.post(f"/tasks/{task_id}/claim", {}, token=token)
        assert status == 200
        status, done = portal_a.post(f"/tasks/{task_id}/complete", {"outcome": "approva"}, token=token)
        assert status == 200
        assert done["status"] == "completed"

        # weak token denied on a strong-only service, 100% of attempts
        gateway.registry.add_life_event("riservata", "Restricted area")
        gateway.registry.register_service(
            ServiceDescriptor(
                service_id="solo-forte",
                provider_admin_id="comune_nuovo",
                title="",
                description="",
                life_events=frozenset({"riservata"}),
                usage_target="citizen",
                min_auth_level="strong",
                binding=ServiceBinding(kind="process", model_id="cambio_residenza"),
            )
        )
        for _ in range(20):
            status, body = portal_a.post("/services/solo-forte/invoke", {"inputs": {}}, token=token)
            assert status == 403, body

        server.shutdown()
        gateway.close()

        # expired tokens denied, 100% of attempts
        gateway2 = Gateway(
            GatewayConfig(storage_path=str(tmp_path / "data2"), token_ttl_s=0.2)
        )
        server2 = GatewayServer(gateway2, host="127.0.0.1", port=0)
        client = HttpClient(server2.base_url)
        client.post("/auth/register", {"user_id": "breve", "password": "password-lunga"})
        _, login = client.post("/auth/login", {"user_id": "breve", "password": "password-lunga"})
        time.sleep(0.4)
        for _ in range(20):
            status, _ = client.get("/profile", token=login["token"])
            assert status == 401
        server2.shutdown()
        gateway2.close()


# ---------------------------------------------------------------------------
# 7. end-to-end one-stop scenario
# ---------------------------------------------------------------------------


def test_one_stop_scenario_with_golden_trace(criterion, tmp_path):
    with criterion("one-stop scenario: completed + golden trace + CLI exit 0", 20.0):
        gateway = Gateway(GatewayConfig(storage_path=str(tmp_path / "data")))
        report = run_scenario(gateway, "residence_change")
        assert report.passed, [f"{r.description}: {r.detail}" for r in report.results if not r.passed]
        gateway.close()

        proc = subprocess.run(
            [sys.executable, "-m", "ssc.cli", "scenario", "run", "residence_change"],
            capture_output=True,
            text=True,
            timeout=60,
            env=dict(os.environ, PYTHONPATH=SRC),
        )
        assert proc.returncode == 0, proc.stdout + proc.stderr


# ---------------------------------------------------------------------------
# 8. crash safety
# ---------------------------------------------------------------------------


def _driver_directory(scenario: Scenario) -> KeyDirectory:
    directory = KeyDirectory()
    for spec in scenario.admins:
        key = deterministic_admin_key(spec["admin_id"])
        directory.add_key(spec["admin_id"], SIM_KEY_ID, key.public_key().public_bytes_raw())
    return directory


def _crash_trial(tmp_path: Path, trial: int, kill_after: int, scenario: Scenario, golden) -> None:
    storage = tmp_path / f"trial{trial}"
    port = free_port()
    scenario_path = tmp_path / "scenario.json"
    config_path = tmp_path / f"config{trial}.json"
    config_path.write_text(
        json.dumps(
            {
                "storage_path": str(storage),
                "host": "127.0.0.1",
                "port": port,
                "harness_scenario": str(scenario_path),
            }
        )
    )
    env = dict(os.environ, PYTHONPATH=SRC)

    def start():
        proc = subprocess.Popen(
            [sys.executable, "-m", "ssc.cli", "serve", "--config", str(config_path)],
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
            env=env,
        )
        wait_health(port)
        return proc

    proc = start()
    client = HttpClient(f"http://127.0.0.1:{port}")
    directory = _driver_directory(scenario)
    ctx = ScriptContext()
    try:
        for step in scenario.script[:kill_after]:
            execute_action(client, directory, step, ctx)

        proc.send_signal(signal.SIGKILL)
        proc.wait(timeout=10)
        proc = start()

        for step in scenario.script[kill_after:]:
            execute_action(client, directory, step, ctx)

        status, body = client.get("/audit/trace/case-0001")
        assert status == 200
        got = [{"category": r["category"], "outcome": r["outcome"]} for r in body["records"]]
        assert got == golden, (
            f"trial {trial} (killed after action {kill_after}): "
            f"trace diverged from golden:\n{json.dumps(got, indent=1)}"
        )
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait(timeout=10)


def test_crash_safety_sigkill_random_points(criterion, tmp_path):
    with criterion("crash safety: SIGKILL at 10 random scenario points, golden-equivalent trace", 120.0):
        scenario = Scenario.load("residence_change")
        golden = scenario.resolve_golden("residence_change_golden.json")
        (tmp_path / "scenario.json").write_text(
            json.dumps(
                {f: getattr(scenario, f) for f in (
                    "name", "admins", "topics", "taxonomy", "users", "models", "descriptors",
                    "script", "assertions",
                )}
            )
        )
        rng = random.Random(2026)
        points = [rng.randint(0, len(scenario.script)) for _ in range(10)]
        for trial, kill_after in enumerate(points):
            _crash_trial(tmp_path, trial, kill_after, scenario, golden)


# ---------------------------------------------------------------------------
# 9. seed knob
# ---------------------------------------------------------------------------


def test_seed_demo_participation(criterion, tmp_path):
    with criterion("seed: seed_demo(10, 0.8) brings exactly 8 administrations online", 5.0):
        gateway = Gateway(GatewayConfig(storage_path=str(tmp_path / "data")))
        spawned = gateway.seed_demo(10, 0.8)
        assert len(spawned) == 8
        assert len(gateway.mediator.online_admins()) == 8
        gateway.close()
