"""``tim``: run scenarios, walk through the honest flow, serve a loopback proxy."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from ..errors import TimError
from ..proxy.boot import BootManifest
from ..wire import Frame
from .scenarios import builtin_scenarios, drtm_sessions_interleaved, run_scenario, scenario_by_name, stress
from .transcript import encode_bundle
from .world import World


def cmd_list(args) -> int:
    for s in builtin_scenarios():
        print(f"{s.name:<30} {s.expected.value:<26} by {s.claim_stage:<16} {s.description}")
    return 0


def cmd_run(args) -> int:
    names = [s.name for s in builtin_scenarios()] if args.scenario == "all" else [args.scenario]
    bundle, failed = [], 0
    for name in names:
        scenario = scenario_by_name(name)
        t0 = time.perf_counter()
        report = run_scenario(scenario, seed=args.seed)
        elapsed = time.perf_counter() - t0
        bundle.append((name, report.transcript))
        status = "PASS" if report.passed else "FAIL"
        failed += not report.passed
        where = f"{report.detected_stage}@{report.detected_step}" if report.detected_stage else "-"
        print(f"{status} {name:<30} expected={report.expected.value} observed={report.observed} "
              f"detected={where} ({elapsed:.2f}s)")
        for f in report.findings:
            print(f"     leak: {f.secret} in {f.where} at offset {f.offset}")
        if args.verbose and report.detail:
            print(f"     {report.detail}")
    if args.transcript:
        Path(args.transcript).write_bytes(encode_bundle(bundle))
    print(f"{len(names) - failed}/{len(names)} scenarios passed")
    return 1 if failed else 0


def _describe(record) -> str | None:
    t = record.type
    if t == "event":
        name, detail = record.get("name"), record.get("detail")
        if name == "stage":
            return f"\n== {detail} =="
        return f"   [proxy] {name}: {detail}" if detail else f"   [proxy] {name}"
    if t == "frame":
        frame = Frame.decode(record.fields["data"])
        arrow = "->" if record.get("dir") == "request" else "<-"
        a, b = record.get("src"), record.get("dst")
        if arrow == "<-":
            a, b = b, a
        return f"   {a} {arrow} {b}: {frame.kind}"
    if t == "envelope":
        return f"   PAL file {record.get('file')} ({len(record.fields['data'])} bytes)"
    if t == "pcr":
        index = int.from_bytes(record.fields["index"], "big")
        return f"   PCR{index} <- {record.get('label')} = {record.fields['value'].hex()[:16]}..."
    return None


def cmd_demo(args) -> int:
    report = run_scenario(scenario_by_name("honest"), seed=args.seed)
    for record in report.transcript.records:
        line = _describe(record)
        if line is None:
            continue
        if args.step and line.startswith("\n=="):
            input("press enter to continue ")
        print(line)
    print(f"\noutcome: {report.observed}, leaks: {len(report.findings)}")
    return 0 if report.passed else 1


def cmd_stress(args) -> int:
    t0 = time.perf_counter()
    world, errors = stress(seed=args.seed, clients=args.clients)
    interleaved = drtm_sessions_interleaved(world.transcript)
    print(f"{args.clients} clients, {world.proxy.flicker.invocations} PAL invocations, "
          f"{len(errors)} errors, interleaved DRTM sessions: {interleaved} ({time.perf_counter() - t0:.2f}s)")
    for e in errors:
        print(f"  {e!r}")
    return 1 if errors or interleaved else 0


def _account(spec: str) -> tuple[str, str, str]:
    parts = spec.split(":", 2)
    if len(parts) != 3 or not all(parts):
        raise argparse.ArgumentTypeError("expected site:username:password")
    return parts[0], parts[1], parts[2]


def cmd_serve(args) -> int:
    from ..proxy.config import ProxyConfig
    from ..transport import serve

    config = ProxyConfig.load(args.config) if args.config else ProxyConfig()
    listen = args.listen or config.listen
    state = Path(args.state)
    state.mkdir(parents=True, exist_ok=True)
    world = World(args.seed, db_path=config.db_path or state / "tim.db",
                  entropy=os.urandom(16).hex(), clock=time.time)
    world.proxy.sessions.idle_timeout = config.session_idle_timeout
    manifest_path = Path(config.manifest_path) if config.manifest_path else state / "manifest.txt"
    if manifest_path.exists():
        world.proxy.manifest = BootManifest.from_text(manifest_path.read_text(encoding="utf-8"))
    else:
        manifest_path.write_text(world.proxy.manifest.to_text(), encoding="utf-8")
    for site, user, pw in args.account:
        world.sites[site].accounts[user] = pw
    try:
        world.boot()
    except TimError as exc:
        print(f"boot refused: {exc}", file=sys.stderr)
        return 1
    bootstrap = {
        "ca_pub": world.ca.public_key.encode().hex(),
        "reference": world.reference.encode().hex(),
        "proxy_address": listen,
    }
    (state / "bootstrap.json").write_text(json.dumps(bootstrap, indent=2), encoding="utf-8")
    server = serve(world.proxy.handle, listen)
    print(f"proxy listening on {listen}; client bootstrap in {state / 'bootstrap.json'}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("list", help="list builtin scenarios").set_defaults(fn=cmd_list)

    run = sub.add_parser("run", help="run one scenario or all of them")
    run.add_argument("scenario", help="scenario name or 'all'")
    run.add_argument("--seed", type=int, default=7)
    run.add_argument("--transcript", help="write the transcript bundle here")
    run.set_defaults(fn=cmd_run)

    demo = sub.add_parser("demo", help="print each protocol step of the honest flow")
    demo.add_argument("--seed", type=int, default=7)
    demo.add_argument("--step", action="store_true", help="pause between stages")
    demo.set_defaults(fn=cmd_demo)

    st = sub.add_parser("stress", help="many concurrent clients against one proxy")
    st.add_argument("--seed", type=int, default=7)
    st.add_argument("--clients", type=int, default=16)
    st.set_defaults(fn=cmd_stress)

    sv = sub.add_parser("serve", help="run proxy and target stubs behind a loopback TCP port")
    sv.add_argument("--config", help="proxy INI file")
    sv.add_argument("--listen", help="host:port (overrides config)")
    sv.add_argument("--state", default="tim-state", help="directory for database, manifest, bootstrap")
    sv.add_argument("--seed", type=int, default=7, help="seed for CA, site and TPM identities")
    sv.add_argument("--account", type=_account, action="append", default=[],
                    help="site:username:password account on a target stub (repeatable)")
    sv.set_defaults(fn=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not hasattr(args, "seed"):
        args.seed = 7
    try:
        return args.fn(args)
    except TimError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
