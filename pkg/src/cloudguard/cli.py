"""Command-line entry point.

Exit codes: 0 success, 1 domain error, 2 usage error.

Working files under ``--out``::

    inventory.json            gen
    inventory.injected.json   inject
    labels.jsonl              inject (write-once)
    runs/<config>/            run: evidence/, labels.jsonl, plans/, tokens/, state/, metrics.json
    compare-<nodes>.json      compare
    report/                   report: table2.csv, fig2.csv, ...
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from .correlation import DEFAULT_CONFIG, EngineConfig
from .errors import DomainError, RemediationError, ScenarioError
from .evidence import EvidenceLog, verify_chain
from .graph import PlatformSnapshot, empty_graph, ingest_inventory, ingest_snapshot, who_can
from .model import canonical_json
from .remediation import Approval, Orchestrator, PlanArtifact, StateStore
from .replay import BaselineConfig, Comparison, compare, labeled_resources, load_run, replay_run, write_reports
from .risk import NormalizationCaps, calibrate_weights
from .scenario import ALL_CLASSES, Inventory, InjectionClass, inject, generate_inventory, read_labels, spec_for_scale, write_labels


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 on its own; keep the message format uniform
        self.print_usage(sys.stderr)
        print(f"usage error: {message}", file=sys.stderr)
        sys.exit(2)


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="root seed")
    p.add_argument("--config", default=d(None), help="engine config file (YAML or JSON)")
    p.add_argument("--out", default=d("cloudguard-out"), help="working directory")
    p.add_argument("--profile", choices=("baseline", "hardened", "regulated"), default=d("baseline"))
    p.add_argument("--scale", choices=("50", "100", "200", "desk"), default=d("desk"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cloudguard", description="Identity-aware security correlation and remediation lab.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        return p

    cmd("gen", "generate a synthetic inventory")
    p = cmd("inject", "plant labeled violations")
    p.add_argument("--classes", nargs="*", choices=[c.value for c in ALL_CLASSES], default=None)
    p.add_argument("--count", type=int, default=20, help="injections per class")
    p.add_argument("--approved-injectors", action="store_true", help="make every change as an approved operator")
    p = cmd("run", "replay one toolchain configuration")
    p.add_argument("toolchain", choices=[c.value for c in BaselineConfig])
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--manual-approval", action="store_true", help="leave plans pending for `approve`")
    p = cmd("compare", "replay several configurations on shared inputs")
    p.add_argument("--toolchains", nargs="+", choices=[c.value for c in BaselineConfig],
                   default=[c.value for c in BaselineConfig])
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--days", type=int, default=30)
    p = cmd("calibrate", "grid-search risk weights on a run's evidence")
    p.add_argument("--run", help="run directory (default <out>/runs/proposed)")
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--fpr-cap", type=float, default=0.05)
    p.add_argument("--caps", type=int, nargs=4, metavar=("C", "T", "I", "M"), default=[10, 10, 10, 10],
                   help="saturation caps for config, runtime, identity and override counts")
    cmd("report", "write the summary table and scaling CSVs from compare outputs")
    p = cmd("who-can", "subjects allowed to perform an action on a resource")
    p.add_argument("action")
    p.add_argument("resource")
    p = cmd("plan", "inspect remediation plans")
    p.add_argument("what", choices=("list", "show"))
    p.add_argument("plan_id", nargs="?")
    p.add_argument("--run", help="run directory (default <out>/runs/proposed)")
    p = cmd("approve", "approve and apply a pending plan")
    p.add_argument("plan_id")
    p.add_argument("--run", help="run directory (default <out>/runs/proposed)")
    p = cmd("rollback", "redeem a rollback token")
    p.add_argument("token")
    p.add_argument("--run", help="run directory (default <out>/runs/proposed)")
    p = cmd("verify-log", "check an evidence log's digest chain")
    p.add_argument("path", nargs="?", help="evidence directory (default <out>/runs/proposed/evidence)")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _emit(doc: Any) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _engine_config(path: Optional[str]) -> EngineConfig:
    if not path:
        return DEFAULT_CONFIG
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise DomainError("config-unreadable", str(exc)) from None
    except yaml.YAMLError as exc:
        raise DomainError("bad-config", str(exc)) from None
    return EngineConfig.from_doc(doc)


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text("utf-8"))
    except FileNotFoundError:
        raise DomainError("missing-input", f"{path} not found") from None


def _write_json(path: Path, doc: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(doc) + "\n", "utf-8")


def _inventory(out: Path, injected: bool = True) -> Inventory:
    path = out / "inventory.injected.json"
    if not injected or not path.exists():
        path = out / "inventory.json"
    return Inventory.from_doc(_read_json(path))


def _run_dir(args) -> Path:
    return Path(args.run) if getattr(args, "run", None) else Path(args.out) / "runs" / "proposed"


def _orchestrator(run: Path) -> Orchestrator:
    live = StateStore(_read_json(run / "state" / "live.json"))
    declared = StateStore(_read_json(run / "state" / "declared.json"))
    orch = Orchestrator(live, declared)
    for f in sorted((run / "plans").glob("*.json")):
        plan = PlanArtifact.from_doc(_read_json(f))
        orch.plans[plan.plan_id] = plan
    return orch


def _save_state(run: Path, orch: Orchestrator) -> None:
    _write_json(run / "state" / "live.json", orch.live.snapshot())
    _write_json(run / "state" / "declared.json", orch.declared.snapshot())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    inv = generate_inventory(spec_for_scale(args.scale, args.seed))
    out = Path(args.out)
    _write_json(out / "inventory.json", inv.to_doc())
    kinds: dict = {}
    for d in inv.docs.values():
        kinds[d["kind"]] = kinds.get(d["kind"], 0) + 1
    _emit({"inventory": str(out / "inventory.json"), "digest": inv.digest(), "documents": kinds,
           "events": len(inv.events)})
    return 0


def cmd_inject(args) -> int:
    out = Path(args.out)
    inv = _inventory(out, injected=False)
    classes = [InjectionClass(c) for c in args.classes] if args.classes else list(ALL_CLASSES)
    injected, labels = inject(inv, classes, args.count, args.seed, approved_injectors=args.approved_injectors)
    write_labels(out / "labels.jsonl", labels)
    _write_json(out / "inventory.injected.json", injected.to_doc())
    _emit({"labels": len(labels), "label_file": str(out / "labels.jsonl")})
    return 0


def cmd_run(args) -> int:
    out = Path(args.out)
    inv = _inventory(out)
    labels = read_labels(out / "labels.jsonl") if (out / "labels.jsonl").exists() else []
    run_dir = out / "runs" / args.toolchain
    if (run_dir / "evidence").exists():
        raise ScenarioError("run-exists", f"{run_dir} already holds a run")
    result = replay_run(inv, labels, args.toolchain, _engine_config(args.config), profile=args.profile,
                        run_id=args.toolchain, out_dir=run_dir, days=args.days,
                        auto_approve=not args.manual_approval)
    _emit({"run": str(run_dir), "metrics": result.metrics, "detected_classes": result.detected_classes})
    return 0


def cmd_compare(args) -> int:
    spec = spec_for_scale(args.scale, args.seed)
    cmp = compare(spec, args.toolchains, _engine_config(args.config), args.reps,
                  count_per_class=args.count, profile=args.profile, days=args.days)
    path = Path(args.out) / f"compare-{spec.node_count}.json"
    _write_json(path, cmp.to_doc())
    _emit({"comparison": str(path), "summary": {
        c: {m: {"mean": s.mean, "sd": s.sd} for m, s in ms.items()} for c, ms in cmp.summaries.items()}})
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    found = sorted(out.glob("compare-*.json"))
    if not found:
        raise DomainError("missing-input", f"no compare-*.json in {out}; run `cloudguard compare` first")
    cmps = [Comparison.from_doc(_read_json(p)) for p in found]
    wanted = spec_for_scale(args.scale).node_count
    main = next((c for c in cmps if c.node_count == wanted), cmps[0])
    paths = write_reports(main, out / "report", cmps)
    _emit({"written": [str(p) for p in paths]})
    return 0


def cmd_calibrate(args) -> int:
    log, _, labels = load_run(_run_dir(args))
    data = labeled_resources(log, labels)
    try:
        caps = NormalizationCaps(*args.caps)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = calibrate_weights(data, caps, theta=args.theta, fpr_cap=args.fpr_cap)
    _write_json(_run_dir(args) / "calibration.json", result.to_doc())
    _emit(result.to_doc())
    return 0


def cmd_who_can(args) -> int:
    inv = _inventory(Path(args.out))
    g = empty_graph()
    for platform in ("k8s", "openstack"):
        g, _ = ingest_snapshot(g, PlatformSnapshot(platform, tuple(inv.snapshots[platform])))
    g = ingest_inventory(g, inv.docs.values())
    for subject in sorted(who_can(g, args.action, args.resource)):
        print(subject)
    return 0


def cmd_plan(args) -> int:
    run = _run_dir(args)
    plans = [_read_json(p) for p in sorted((run / "plans").glob("*.json"))]
    if args.what == "list":
        _emit([{k: p[k] for k in ("plan_id", "book_id", "target", "approval", "applied")} for p in plans])
        return 0
    if not args.plan_id:
        raise UsageError("plan show needs a plan id")
    for p in plans:
        if p["plan_id"] == args.plan_id:
            _emit(p)
            return 0
    raise RemediationError("target-not-found", f"plan {args.plan_id}")


def cmd_approve(args) -> int:
    run = _run_dir(args)
    orch = _orchestrator(run)
    plan = orch.plans.get(args.plan_id)
    if plan is None:
        raise RemediationError("target-not-found", f"plan {args.plan_id}")
    if plan.approval is Approval.REJECTED:
        raise RemediationError("plan-rejected", args.plan_id)
    orch.approve(args.plan_id)
    plan = orch.apply_plan(args.plan_id)
    _save_state(run, orch)
    _write_json(run / "plans" / f"{plan.plan_id}.json", plan.to_doc())
    log = EvidenceLog.open(run / "evidence")
    log.append_ops({"op": "approve_apply", "plan_id": plan.plan_id, "by": "cli"})
    log.close()
    _emit(plan.to_doc())
    return 0


def cmd_rollback(args) -> int:
    run = _run_dir(args)
    path = run / "tokens" / f"{args.token}.json"
    if not path.exists():
        raise RemediationError("target-not-found", f"token {args.token}")
    tok = _read_json(path)
    if tok["redeemed"]:
        raise RemediationError("already-redeemed", args.token)
    live = StateStore(_read_json(run / "state" / "live.json"))
    if tok["resource_id"] not in live:
        raise RemediationError("resource-missing", tok["resource_id"])
    live.put(tok["resource_id"], tok["pre_state"])
    _write_json(run / "state" / "live.json", live.snapshot())
    tok["redeemed"] = True
    _write_json(path, tok)
    log = EvidenceLog.open(run / "evidence")
    log.append_ops({"op": "rollback", "token": args.token, "resource_id": tok["resource_id"], "by": "cli"})
    log.close()
    _emit({"restored": tok["resource_id"]})
    return 0


def cmd_verify_log(args) -> int:
    path = Path(args.path) if args.path else Path(args.out) / "runs" / "proposed" / "evidence"
    if not path.is_dir():
        raise DomainError("missing-input", f"{path} is not an evidence directory")
    bad = verify_chain(path)
    if bad is None:
        print("ok")
        return 0
    print(f"corrupt at sequence {bad}")
    return 1


COMMANDS = {
    "gen": cmd_gen,
    "inject": cmd_inject,
    "run": cmd_run,
    "compare": cmd_compare,
    "calibrate": cmd_calibrate,
    "report": cmd_report,
    "who-can": cmd_who_can,
    "plan": cmd_plan,
    "approve": cmd_approve,
    "rollback": cmd_rollback,
    "verify-log": cmd_verify_log,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
