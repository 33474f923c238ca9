"""Operator entry point: ``lip serve | run | verify | keygen | audit``.

Exit codes: 0 success, 1 assertion failure, 2 usage error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import signal
import sys
from pathlib import Path
from typing import Optional, Sequence

from .audit import AuditCorrupt, read_audit, verify_records
from .canonical import canonical_bytes
from .errors import ConfigError, LipError, ScenarioError
from .security import KeyPair, fingerprint

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("lip")


class UsageError(Exception):
    pass


def _out(text: str = "") -> None:
    print(text, flush=True)


def _err(text: str) -> None:
    print(text, file=sys.stderr, flush=True)


def _emit_json(target: Optional[str], doc: dict) -> None:
    if target is None:
        return
    data = json.dumps(doc, indent=2, sort_keys=True)
    if target == "-":
        _out(data)
    else:
        Path(target).write_text(data + "\n", encoding="utf-8")


# -- run ----------------------------------------------------------------------------


def cmd_run(args) -> int:
    from .harness import Scenario, run_scenario

    path = Path(args.scenario)
    if not path.is_file():
        raise UsageError(f"scenario file not found: {path}")
    scenario = Scenario.load(path)
    result = run_scenario(scenario, seed=args.seed, transport=args.transport, audit_path=args.audit_out)
    _out(f"scenario {result.name} seed={result.seed} transport={result.transport}")
    for ix, s in sorted(result.interactions.items()):
        trace = ", ".join(f"{h:.6f}" for h in s.entropy_trace)
        _out(
            f"  {ix}: state={s.final_state} reason={s.dissolution_reason} rounds={s.rounds} "
            f"plan_steps={s.plan_steps} fallback={s.fallback or '-'} renegotiations={s.renegotiations} entropy=[{trace}]"
        )
    _out(f"  residual coupling: {'all zero' if result.coupling_zero else 'NONZERO'} over {len(result.coupling)} pairs")
    for failure in result.failures:
        _out(f"  FAIL {failure}")
    _out("result: " + ("PASS" if result.ok else "FAIL"))
    _emit_json(args.json_report, result.to_doc())
    return EXIT_OK if result.ok else EXIT_FAIL


# -- verify -------------------------------------------------------------------------


def _read_audit_arg(path_arg: str):
    path = Path(path_arg)
    if not path.exists():
        raise UsageError(f"audit path not found: {path}")
    return read_audit(path)


def cmd_verify(args) -> int:
    records = _read_audit_arg(args.audit)
    checks = verify_records(records)
    interactions = len({r.interaction_id for r in records})
    _out(f"audit {args.audit}: {len(records)} records, {interactions} interactions")
    width = max(len(c.name) for c in checks)
    for c in checks:
        _out(f"  {c.name.ljust(width)}  {'PASS' if c.passed else 'FAIL'}")
        for v in c.violations:
            _out(f"      {v}")
    ok = all(c.passed for c in checks)
    _out("result: " + ("PASS" if ok else "FAIL"))
    _emit_json(
        args.json_report,
        {"audit": str(args.audit), "records": len(records), "checks": {c.name: c.violations for c in checks}, "passed": ok},
    )
    return EXIT_OK if ok else EXIT_FAIL


# -- keygen -------------------------------------------------------------------------


def cmd_keygen(args) -> int:
    path = Path(args.output)
    if path.exists() and not args.force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    kp = KeyPair.generate()
    try:
        kp.save(path)
    except OSError as exc:
        raise LipError(f"cannot write {path}: {exc}") from exc
    _out(f"wrote {path}")
    _out(f"fingerprint {fingerprint(kp.public_key)}")
    return EXIT_OK


# -- audit --------------------------------------------------------------------------


def _brief(event: str, d: dict) -> str:
    if event == "IntentReceived":
        intent = d.get("intent", {})
        keys = ",".join(c["key"] for c in intent.get("constraints", []))
        return f"goal={intent.get('goal_text')!r} keys=[{keys}]"
    if event == "Adjudicated":
        parts = []
        for j in d.get("judgments", []):
            r = j.get("rationale", {})
            parts.append(f"{j['capability_id']}:s={j['suitability']:.3f}/b={j.get('blended', j['suitability']):.3f} lex={r.get('lexical_score', 0):.3f}")
        h0 = d.get("session", {}).get("H0")
        return f"admitted={d.get('admitted')} H0={h0 if h0 is None else round(h0, 6)} " + "; ".join(parts)
    if event in ("RoundCompleted", "NonProgress"):
        return " ".join(f"{k}={d[k] if not isinstance(d[k], float) else round(d[k], 6)}" for k in ("round", "offers", "declined", "entropy", "delta", "H_max", "status") if k in d)
    if event == "PolicyDecision":
        return f"agent={d.get('agent', '')[:12]} allowed={d.get('allowed')} reasons={d.get('reasons')}"
    if event == "PlanComposed":
        steps = [f"{s['capability_id']}<{','.join(s['sub_intention'])}>" for s in d["plan"]["steps"]]
        return f"plan={d['plan']['plan_id']} steps={steps} solid={d.get('solid')}"
    if event == "FallbackTriggered":
        return f"mode={d.get('mode')} reason={d.get('reason')!r}" + (f" dropped={d['dropped']}" if "dropped" in d else "")
    if event == "FailureSignal":
        return f"signal={d.get('signal')} capability={d.get('capability_id')} cycle={d.get('cycle')}"
    if event == "ExecutionCompleted":
        return f"outcomes={d.get('outcomes')} priors={d.get('priors')}"
    if event == "Dissolved":
        return f"reason={d.get('reason')} cleared={d.get('artifacts_cleared')} residual_coupling={d.get('residual_coupling')}"
    return ""


def cmd_audit(args) -> int:
    records = [r for r in _read_audit_arg(args.audit) if r.interaction_id == args.interaction_id]
    if not records:
        _err(f"no audit records for interaction {args.interaction_id}")
        return EXIT_FAIL
    if args.format == "raw":
        for r in records:
            sys.stdout.write(canonical_bytes(r.to_doc()).decode("utf-8") + "\n")
        sys.stdout.flush()
        return EXIT_OK
    _out(f"interaction {args.interaction_id}: {len(records)} events")
    for r in records:
        _out(f"  {r.seq:>5}  t={r.at:<8} {r.event.value:<19} [{r.detail.get('state', '?')}] {_brief(r.event.value, r.detail)}")
    return EXIT_OK


# -- serve --------------------------------------------------------------------------


def build_coordinator(cfg):
    from .audit import AuditLog
    from .coordinator import Coordinator
    from .negotiation import CoreOntology
    from .security import Policy
    from .semantics import PriorStore

    def load(kind, path, what):
        if not path:
            return kind()
        try:
            return kind.load(path)
        except (OSError, ValueError, KeyError, TypeError, LipError) as exc:
            raise ConfigError(f"cannot load {what} {path}: {exc}") from exc

    policy = load(Policy, cfg.policy_path, "policy")
    core = load(CoreOntology, cfg.core_path, "core ontology")
    keypair = KeyPair.load(cfg.coordinator_key) if cfg.coordinator_key else KeyPair.generate()
    return Coordinator(cfg, policy=policy, core=core, audit=AuditLog(directory=cfg.audit_dir), priors=PriorStore(cfg.prior_path), keypair=keypair)


def cmd_serve(args) -> int:
    from .coordinator import CoordinatorConfig
    from .transport import CoordinatorEndpoint, serve_tcp

    config_path = args.config or os.environ.get("LIP_CONFIG")
    if not config_path:
        raise UsageError("no config given (argument or LIP_CONFIG)")
    cfg = CoordinatorConfig.load(config_path)
    coordinator = build_coordinator(cfg)
    if cfg.audit_dir and Path(cfg.audit_dir).is_dir():
        recovered = coordinator.recover(read_audit(cfg.audit_dir))
        if recovered:
            log.info("recovered and dissolved %d open interactions", len(recovered))
    host, _, port = cfg.bind.rpartition(":")
    endpoint = CoordinatorEndpoint(coordinator)

    async def main() -> None:
        loop = asyncio.get_running_loop()
        stop = asyncio.Event()

        def reload_policy() -> None:
            from .security import Policy

            try:
                n = coordinator.reload_policy(Policy.load(cfg.policy_path)) if cfg.policy_path else 0
                log.info("policy reloaded: %d rules", n)
            except (OSError, ValueError, KeyError, TypeError, LipError) as exc:
                log.error("policy reload failed, keeping previous policy: %s", exc)

        loop.add_signal_handler(signal.SIGHUP, reload_policy)
        loop.add_signal_handler(signal.SIGTERM, stop.set)
        loop.add_signal_handler(signal.SIGINT, stop.set)
        server = await serve_tcp(endpoint, host or "127.0.0.1", int(port), lambda addr: log.info("listening on %s", addr))
        try:
            while not stop.is_set():
                try:
                    await asyncio.wait_for(stop.wait(), timeout=1.0)
                except asyncio.TimeoutError:
                    reports, fx = coordinator.sweep_deadlines()
                    endpoint.deliver(fx.outbound)
                    for report in reports:
                        log.info("deadline passed: dissolved %s", report.interaction_id)
        finally:
            server.close()
            await server.wait_closed()
            log.info("stopped")

    try:
        asyncio.run(main())
    except OSError as exc:
        raise LipError(f"cannot bind {cfg.bind}: {exc}") from exc
    return EXIT_OK


# -- dispatch -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lip", description="Liquid Interface Protocol coordinator and tools")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the coordinator service")
    s.add_argument("config", nargs="?", help="config document (default: $LIP_CONFIG)")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("run", help="run a scenario and check its expectations")
    s.add_argument("scenario")
    s.add_argument("--seed", type=int)
    s.add_argument("--transport", choices=("loopback", "socket"), default="loopback")
    s.add_argument("--audit-out", help="write the audit log to this file")
    s.add_argument("--json-report", nargs="?", const="-", help="machine-readable report (stdout, or a path)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("verify", help="check protocol invariants over an audit log")
    s.add_argument("audit", help="audit file or directory of daily files")
    s.add_argument("--json-report", nargs="?", const="-")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("keygen", help="generate an agent key file")
    s.add_argument("output")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("audit", help="show one interaction's audit trail")
    s.add_argument("interaction_id")
    s.add_argument("audit", help="audit file or directory")
    s.add_argument("--format", choices=("table", "raw"), default="table")
    s.set_defaults(func=cmd_audit)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        _err(f"lip {args.command}: {exc}")
        return EXIT_USAGE
    except AuditCorrupt as exc:
        _err(f"lip {args.command}: corrupt audit: {exc}")
        return EXIT_RUNTIME
    except (ScenarioError, ConfigError, LipError) as exc:
        _err(f"lip {args.command}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
