"""Command line entry points.

    ssc serve --config gateway.json [--seed-catalog catalog.json]
    ssc scenario run residence_change.json [--config gateway.json]
    ssc seed --admins 10 --participation 0.8 [--config gateway.json]
    ssc audit trace case-0001 --storage ./ssc-data

Exit code 0 only on full success (for `scenario run`: every assertion passed).
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
import time
from pathlib import Path

from ssc.errors import SscError
from ssc.gateway import Gateway, GatewayConfig


def _config_from_args(args, ephemeral_ok: bool = True) -> GatewayConfig:
    if args.config:
        return GatewayConfig.from_file(args.config)
    if not ephemeral_ok:
        raise SscError("--config is required for this command")
    tmp = tempfile.mkdtemp(prefix="ssc-")
    return GatewayConfig(storage_path=tmp, port=0)


def cmd_serve(args) -> int:
    config = GatewayConfig.from_file(args.config)
    if args.seed_catalog:
        config.seed_catalog = args.seed_catalog
    from ssc.http_api import serve

    server = serve(config)
    print(f"ssc gateway listening on {server.base_url} (storage: {server.gateway.config.storage_path})")
    sys.stdout.flush()
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.gateway.close()
    return 0


def cmd_scenario_run(args) -> int:
    from ssc.harness import Scenario

    config = _config_from_args(args)
    gateway = Gateway(config)
    try:
        report = gateway.run_scenario(Scenario.load(args.scenario))
    finally:
        gateway.close()
    print(f"scenario: {report.name}")
    for result in report.results:
        mark = "PASS" if result.passed else "FAIL"
        detail = f"  ({result.detail})" if result.detail and not result.passed else ""
        print(f"  [{mark}] {result.description}{detail}")
    print(f"result: {'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


def cmd_seed(args) -> int:
    config = _config_from_args(args)
    gateway = Gateway(config)
    try:
        spawned = gateway.seed_demo(args.admins, args.participation)
    finally:
        gateway.close()
    print(f"spawned {len(spawned)} administrations: {', '.join(spawned) if spawned else '(none)'}")
    return 0


def cmd_audit_trace(args) -> int:
    if args.config:
        storage_path = GatewayConfig.from_file(args.config).storage_path
    elif args.storage:
        storage_path = args.storage
    else:
        print("audit trace needs --storage or --config", file=sys.stderr)
        return 2
    audit_log = Path(storage_path) / "audit.log"
    if not audit_log.exists():
        print(f"no audit log at {audit_log}", file=sys.stderr)
        return 1
    from ssc.storage import AppendLog

    count = 0
    for record in AppendLog(audit_log).replay():
        if record.get("correlation_id") == args.correlation:
            count += 1
            print(json.dumps(record, sort_keys=True))
    print(f"# {count} records for correlation {args.correlation}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssc", description="Shared services cooperation gateway")
    sub = parser.add_subparsers(dest="command", required=True)

    serve_p = sub.add_parser("serve", help="run the gateway HTTP service")
    serve_p.add_argument("--config", required=True, help="gateway config JSON file")
    serve_p.add_argument("--seed-catalog", help="bulk-import taxonomy + descriptors JSON at startup")
    serve_p.set_defaults(fn=cmd_serve)

    scenario_p = sub.add_parser("scenario", help="scenario operations")
    scenario_sub = scenario_p.add_subparsers(dest="scenario_command", required=True)
    run_p = scenario_sub.add_parser("run", help="seed, execute and assert one scenario")
    run_p.add_argument("scenario", help="scenario file path or bundled name (e.g. residence_change)")
    run_p.add_argument("--config", help="gateway config JSON (default: ephemeral storage)")
    run_p.set_defaults(fn=cmd_scenario_run)

    seed_p = sub.add_parser("seed", help="spawn demo administrations")
    seed_p.add_argument("--admins", type=int, required=True)
    seed_p.add_argument("--participation", type=float, default=0.8)
    seed_p.add_argument("--config", help="gateway config JSON (default: ephemeral storage)")
    seed_p.set_defaults(fn=cmd_seed)

    audit_p = sub.add_parser("audit", help="audit log queries")
    audit_sub = audit_p.add_subparsers(dest="audit_command", required=True)
    trace_p = audit_sub.add_parser("trace", help="print all records for one correlation id")
    trace_p.add_argument("correlation")
    trace_p.add_argument("--storage", help="gateway storage directory")
    trace_p.add_argument("--config", help="gateway config JSON")
    trace_p.set_defaults(fn=cmd_audit_trace)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SscError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
