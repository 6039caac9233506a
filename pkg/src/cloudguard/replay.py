"""Replay harness: toolchain configurations, runs, metrics and reports.

A run has two phases on one virtual clock:

* assessment, ``[0, ASSESSMENT_MS)``: benign traffic plus the injected
  violations. Confusion counts, recall and throughput come from here.
* operational, thirty daily ticks after that: pending plans are approved
  and applied, the live state is rescanned and runtime abuse recurs.
  Incident reduction compares labeled events seen here against a
  counterfactual run of the same inputs with remediation switched off.

Every metric is a pure function of the evidence log(s) and the label file;
:func:`recompute_metrics` is what the run itself uses.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from .adapters import normalize
from .correlation import DEFAULT_CONFIG, CorrelationEngine, EngineConfig
from .errors import DomainError, ScenarioError
from .evidence import EvidenceLog
from .findings import ControlProfile, check_policy, dedup, load_profile, severity_gate
from .graph import PlatformSnapshot, empty_graph, ingest_inventory, ingest_snapshot, record_activity
from .metrics import (
    ConfusionCounts,
    RunSummary,
    coverage,
    events_per_100_nodes,
    fpr,
    incident_reduction,
    summarize,
    welch_t,
)
from .model import CONFIG_SOURCES, ActionKind, EvidenceRecord, NormalizedEvent, Source, canonical_json
from .remediation import Orchestrator, StateStore, load_playbooks
from .risk import EvidenceCounts, LabeledResource
from .scenario import (
    ALL_CLASSES,
    ASSESSMENT_MS,
    CLASS_INFO,
    DAY_MS,
    KUBE_PROXY_SA,
    RUNTIME_RULE_FOR,
    GroundTruthLabel,
    Inventory,
    InventorySpec,
    channel_of,
    generate_inventory,
    inject,
    write_labels,
)

OPERATIONAL_DAYS = 30
# one virtual day of the operational window is replayed as one replay second
VIRTUAL_TO_REPLAY = DAY_MS // 1000
APPROVER = "change-board"

METRICS = (
    "fpr",
    "recall",
    "incident_reduction",
    "coverage",
    "class_coverage",
    "events_per_replay_second",
    "mean_latency_ms",
)


@dataclass(frozen=True)
class Toggles:
    runtime_events: bool
    config_scanning: bool
    openstack_adapter: bool
    identity_correlation: bool
    remediation: bool

    def channels(self) -> Set[str]:
        on = set()
        if self.runtime_events:
            on.add("runtime")
        if self.config_scanning:
            on |= {"k8s_config", "iac"}
        if self.openstack_adapter:
            on.add("openstack")
        return on


class BaselineConfig(enum.Enum):
    BASELINE_A = "baseline_a"
    BASELINE_B = "baseline_b"
    PROPOSED = "proposed"

    @property
    def toggles(self) -> Toggles:
        return _TOGGLES[self]


_TOGGLES = {
    BaselineConfig.BASELINE_A: Toggles(True, False, False, False, False),
    BaselineConfig.BASELINE_B: Toggles(False, True, False, False, False),
    BaselineConfig.PROPOSED: Toggles(True, True, True, True, True),
}


# ---------------------------------------------------------------------------
# scanning
# ---------------------------------------------------------------------------

_POLICY_CHANNEL = {"k8s": "k8s_config", "iac": "iac", "openstack": "openstack"}


class Scanner:
    """Profile evaluation over a store, cached per document version."""

    def __init__(self, profile: ControlProfile, channels: Set[str]):
        self.by_kind: Dict[Tuple[str, str], list] = {}
        for p in profile.policies:
            if _POLICY_CHANNEL[p.family] in channels:
                self.by_kind.setdefault((p.family, p.kind), []).append(p)
        self._cache: Dict[str, Tuple[int, list]] = {}

    def scan(self, store: StateStore) -> list:
        out = []
        for rid in store.ids():
            version = store.version(rid)
            hit = self._cache.get(rid)
            if hit is None or hit[0] != version:
                doc = store.get(rid)
                policies = self.by_kind.get((doc.get("family"), doc.get("kind")), ())
                found = [f for f in (check_policy(p, doc) for p in policies) if f is not None]
                hit = (version, found)
                self._cache[rid] = hit
            out.extend(hit[1])
        return out

    def checked_kinds(self) -> List[str]:
        return sorted(f"{fam}/{kind}" for fam, kind in self.by_kind)


def declared_families(inv: Inventory) -> List[str]:
    return sorted({f"{d['family']}/{d['kind']}" for d in inv.docs.values()})


def checked_families(inv: Inventory, toggles: Toggles, profile: ControlProfile) -> List[str]:
    checked = set(Scanner(profile, toggles.channels()).checked_kinds())
    if toggles.runtime_events:
        checked.add("k8s/pod")
    if toggles.openstack_adapter:
        checked.add("openstack/project")  # keystone and neutron logs are project-scoped
    return sorted(checked & set(declared_families(inv)))


# ---------------------------------------------------------------------------
# single run
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    run_id: str
    config: str
    seed: int
    node_count: int
    log: EvidenceLog
    counterfactual: Optional[EvidenceLog]
    labels: List[GroundTruthLabel]
    metrics: Dict[str, float]
    confusion: ConfusionCounts
    detected_classes: List[str]
    orchestrator: Optional[Orchestrator] = None


class _Sim:
    def __init__(self, inv, toggles, engine_config, profile, log, auto_approve=True):
        self.inv = inv
        self.auto_approve = auto_approve
        self.toggles = toggles
        self.profile = profile
        self.log = log
        self.channels = toggles.channels()
        self.live = StateStore(inv.docs)
        self.declared = StateStore({r: inv.docs[r] for r in inv.declared_ids()})
        graph = empty_graph()
        if toggles.identity_correlation:
            graph, _ = ingest_snapshot(graph, PlatformSnapshot("k8s", tuple(inv.snapshots["k8s"])))
            if toggles.openstack_adapter:
                graph, _ = ingest_snapshot(graph, PlatformSnapshot("openstack", tuple(inv.snapshots["openstack"])))
            graph = ingest_inventory(graph, inv.docs.values())
            graph = record_activity(graph, inv.activity)
        self.books = load_playbooks() if toggles.remediation else []
        self.orch = Orchestrator(self.live, self.declared, profile, self.books)
        self.engine = CorrelationEngine(
            graph, log, orchestrator=self.orch, books=self.books, config=engine_config,
            identity=toggles.identity_correlation,
        )
        self.scanner = Scanner(profile, self.channels)
        self.plan_controls: Dict[str, Tuple[str, str]] = {}

    def run_batch(self, raws: Iterable[Mapping[str, Any]]) -> None:
        """Normalize, dedup and process; per-event failures become info entries."""
        events: List[NormalizedEvent] = []
        for raw in raws:
            try:
                events.append(normalize(raw))
            except DomainError as exc:
                self.log.append_info({"event_id": raw.get("event_id"), "error": exc.code})
        groups = dedup(events, self.engine.config.dedup_window_ms)
        groups.sort(key=lambda pair: pair[0].sort_key)
        for e, n in groups:
            try:
                rec = self.engine.process(e, n)
            except DomainError as exc:
                self.log.append_info({"event_id": e.event_id, "error": exc.code})
                continue
            if rec.plan_id:
                self.plan_controls[rec.plan_id] = (rec.resource_id, rec.control_id)

    def assessment(self) -> None:
        self.run_batch(e for e in self.inv.events if channel_of(e) in self.channels)

    def day(self, d: int, labels: Sequence[GroundTruthLabel]) -> None:
        t = ASSESSMENT_MS + d * DAY_MS
        if self.toggles.remediation and self.auto_approve:
            for plan in self.orch.pending_plans():
                self.orch.approve(plan.plan_id)
                self.orch.apply_plan(plan.plan_id)
                self.log.append_ops({"op": "approve_apply", "plan_id": plan.plan_id, "at": t, "by": APPROVER})
                if plan.plan_id in self.plan_controls:
                    self.engine.resolve(*self.plan_controls[plan.plan_id])
        if self.toggles.identity_correlation:
            proxies = [r for r in self.live.ids() if r.startswith("pod/kube-system/")]
            self.engine.graph = record_activity(self.engine.graph, [(KUBE_PROXY_SA, p, t) for p in proxies])
        raws: List[Any] = []
        if self.channels - {"runtime"}:
            found = self.scanner.scan(self.live)
            raws.extend(severity_gate(found, at_ms=t, id_prefix=f"scan:d{d:02d}"))
        if self.toggles.runtime_events:
            for i, lab in enumerate(labels):
                if CLASS_INFO[lab.cls].recurs:
                    raws.append({"adapter": "falco", "event_id": f"rec:d{d:02d}:{lab.event_id}",
                                 "timestamp": t + 1_000 + i, "pod": lab.resource_id,
                                 "rule": RUNTIME_RULE_FOR[lab.cls], "priority": "warning", "user": "intruder"})
        self.run_batch(raws)


def _simulate(inv, labels, toggles, engine_config, profile, log, meta, days, auto_approve=True) -> _Sim:
    log.append_meta(meta)
    sim = _Sim(inv, toggles, engine_config, profile, log, auto_approve)
    sim.assessment()
    for d in range(1, days + 1):
        sim.day(d, labels)
    return sim


def replay_run(
    inv: Inventory,
    labels: Sequence[GroundTruthLabel],
    config: BaselineConfig | str,
    engine_config: EngineConfig = DEFAULT_CONFIG,
    *,
    profile: str | ControlProfile = "baseline",
    run_id: str = "run-0",
    out_dir: str | Path | None = None,
    days: int = OPERATIONAL_DAYS,
    toggles: Optional[Toggles] = None,
    auto_approve: bool = True,
) -> RunResult:
    """One run from a fresh copy of every state store.

    With ``out_dir`` the evidence log, a counterfactual log (when remediation
    is on), the label file, plans, tokens, final live state and metrics are
    written there. ``auto_approve=False`` leaves plans pending instead of
    having the daily change board approve them.
    """
    config = BaselineConfig(config)
    toggles = toggles or config.toggles
    prof = load_profile(profile) if isinstance(profile, str) else profile
    out = Path(out_dir) if out_dir is not None else None
    meta = {
        "run_id": run_id,
        "config": config.value,
        "toggles": {k: getattr(toggles, k) for k in Toggles.__dataclass_fields__},
        "seed": inv.spec.seed,
        "node_count": inv.spec.node_count,
        "profile": prof.name,
        "engine": engine_config.to_doc(),
        "assessment_end_ms": ASSESSMENT_MS,
        "days": days,
        "day_ms": DAY_MS,
        "virtual_to_replay": VIRTUAL_TO_REPLAY,
        "declared_families": declared_families(inv),
        "checked_families": checked_families(inv, toggles, prof),
        "counterfactual": False,
        "auto_approve": auto_approve,
    }
    log = EvidenceLog(out / "evidence" if out else None)
    sim = _simulate(inv, labels, toggles, engine_config, prof, log, meta, days, auto_approve)
    log.close()
    counterfactual = None
    if toggles.remediation:
        cf_toggles = replace(toggles, remediation=False)
        cf_meta = dict(meta, counterfactual=True, toggles={k: getattr(cf_toggles, k) for k in Toggles.__dataclass_fields__})
        counterfactual = EvidenceLog(out / "evidence_counterfactual" if out else None)
        _simulate(inv, labels, cf_toggles, engine_config, prof, counterfactual, cf_meta, days)
        counterfactual.close()
    metrics, confusion, detected = recompute_metrics(log, labels, counterfactual)
    if out is not None:
        _write_run_dir(out, sim, labels, metrics)
    return RunResult(run_id, config.value, inv.spec.seed, inv.spec.node_count, log, counterfactual,
                     list(labels), metrics, confusion, detected, sim.orch)


def _write_run_dir(out: Path, sim: _Sim, labels, metrics) -> None:
    if not (out / "labels.jsonl").exists():
        write_labels(out / "labels.jsonl", labels)
    (out / "plans").mkdir(exist_ok=True)
    for pid, plan in sorted(sim.orch.plans.items()):
        (out / "plans" / f"{pid}.json").write_text(canonical_json(plan.to_doc()) + "\n", "utf-8")
    (out / "tokens").mkdir(exist_ok=True)
    for tid, tok in sorted(sim.orch.tokens.items()):
        doc = {"token_id": tid, "resource_id": tok.resource_id, "pre_state": tok.pre_state,
               "issued_at": tok.issued_at, "redeemed": tid in sim.orch.redeemed}
        (out / "tokens" / f"{tid}.json").write_text(canonical_json(doc) + "\n", "utf-8")
    (out / "state").mkdir(exist_ok=True)
    (out / "state" / "live.json").write_text(canonical_json(sim.live.snapshot()) + "\n", "utf-8")
    (out / "state" / "declared.json").write_text(canonical_json(sim.declared.snapshot()) + "\n", "utf-8")
    (out / "metrics.json").write_text(canonical_json(metrics) + "\n", "utf-8")


# ---------------------------------------------------------------------------
# metrics from evidence
# ---------------------------------------------------------------------------

ALERTS = frozenset({ActionKind.TICKET, ActionKind.PLAN, ActionKind.PATCH})


def _records(log: EvidenceLog) -> List[EvidenceRecord]:
    return log.records()


def labeled_events_after(records: Sequence[EvidenceRecord], keys: Set[Tuple[str, str]], start_ms: int) -> int:
    """Deduplicated labeled observations at or after ``start_ms``."""
    return sum(1 for r in records if r.observed_at >= start_ms and (r.resource_id, r.control_id) in keys)


def recompute_metrics(
    log: EvidenceLog,
    labels: Sequence[GroundTruthLabel],
    counterfactual: Optional[EvidenceLog] = None,
) -> Tuple[Dict[str, float], ConfusionCounts, List[str]]:
    """Every reported metric, from the evidence log(s) and the labels alone."""
    meta = log.meta()
    end = meta["assessment_end_ms"]
    records = _records(log)
    keys = {(lab.resource_id, lab.control_id) for lab in labels}
    assessed = [r for r in records if r.observed_at < end]

    tp = fp = tn = 0
    alerted: Set[Tuple[str, str]] = set()
    seen: Set[Tuple[str, str]] = set()
    for r in assessed:
        key = (r.resource_id, r.control_id)
        seen.add(key)
        if r.action in ALERTS:
            if key in keys:
                tp += 1
                alerted.add(key)
            else:
                fp += 1
        elif key not in keys:
            tn += 1
    fn = len(keys - alerted)
    confusion = ConfusionCounts(tp, fp, tn, fn)

    detected = sorted({lab.cls.value for lab in labels if (lab.resource_id, lab.control_id) in seen})
    classes = {lab.cls.value for lab in labels}

    node_count = meta["node_count"]
    if meta["toggles"]["remediation"] and counterfactual is not None:
        e_after = events_per_100_nodes(labeled_events_after(records, keys, end), node_count)
        e_before = events_per_100_nodes(labeled_events_after(_records(counterfactual), keys, end), node_count)
        ir = incident_reduction(e_before, e_after) if e_before > 0 else 0.0
    else:
        ir = 0.0

    raw_events = sum(r.duplicate_count for r in assessed)
    busy_until = max((r.wrote_at for r in assessed), default=0)
    metrics = {
        "fpr": fpr(confusion) if tp + fp else 0.0,
        "recall": 100.0 * len({(l.resource_id, l.control_id) for l in labels} & seen) / len(keys) if keys else 0.0,
        "incident_reduction": ir,
        "coverage": coverage(len(meta["checked_families"]), len(meta["declared_families"])),
        "class_coverage": 100.0 * len(detected) / len(classes) if classes else 0.0,
        "events_per_replay_second": raw_events / (busy_until / 1000.0) if busy_until else 0.0,
        "mean_latency_ms": math.fsum(r.latency_ms for r in assessed) / len(assessed) if assessed else 0.0,
        "tp": float(tp),
        "fp": float(fp),
    }
    return metrics, confusion, detected


# ---------------------------------------------------------------------------
# protocol: repetitions and comparison
# ---------------------------------------------------------------------------


def scenario_for(spec: InventorySpec, count_per_class: int = 20, *, approved_injectors: bool = False):
    inv = generate_inventory(spec)
    return inject(inv, ALL_CLASSES, count_per_class, spec.seed, approved_injectors=approved_injectors)


def replay(
    spec: InventorySpec,
    config: BaselineConfig | str,
    engine_config: EngineConfig = DEFAULT_CONFIG,
    repetitions: int = 5,
    *,
    count_per_class: int = 20,
    profile: str = "baseline",
    out_dir: str | Path | None = None,
    days: int = OPERATIONAL_DAYS,
) -> List[RunResult]:
    """Repetition k uses seed ``spec.seed + k``; every run starts from fresh stores."""
    if repetitions < 1:
        raise ScenarioError("bad-repetitions", "repetitions must be >= 1")
    runs = []
    for k in range(repetitions):
        rep_spec = replace(spec, seed=spec.seed + k)
        inv, labels = scenario_for(rep_spec, count_per_class)
        run_out = Path(out_dir) / f"{BaselineConfig(config).value}-r{k}" if out_dir else None
        runs.append(replay_run(inv, labels, config, engine_config, profile=profile,
                               run_id=f"r{k}", out_dir=run_out, days=days))
    return runs


@dataclass
class Comparison:
    """Per-run metric values for several configs on shared inputs."""

    configs: List[str]
    node_count: int
    values: Dict[str, List[Tuple[str, Dict[str, float]]]]
    runs: Dict[str, List[RunResult]] = field(default_factory=dict)

    def series(self, config: str, metric: str) -> List[float]:
        return [m[metric] for _, m in self.values[config]]

    @property
    def summaries(self) -> Dict[str, Dict[str, RunSummary]]:
        return {c: {m: summarize(self.series(c, m), m) for m in METRICS} for c in self.configs}

    @property
    def welch(self) -> List[Tuple[str, str, str, float, float, float]]:
        rows = []
        for m in METRICS:
            for i, a in enumerate(self.configs):
                for b in self.configs[i + 1:]:
                    try:
                        t, df, p = welch_t(self.series(a, m), self.series(b, m))
                    except DomainError:
                        # fewer than two runs, or both sides constant and equal
                        t, df, p = 0.0, float("nan"), 1.0
                    rows.append((m, a, b, t, df, p))
        return rows

    def to_doc(self) -> Dict[str, Any]:
        return {
            "configs": self.configs,
            "node_count": self.node_count,
            "values": {c: [{"run_id": rid, "metrics": m} for rid, m in v] for c, v in self.values.items()},
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Comparison":
        values = {c: [(r["run_id"], dict(r["metrics"])) for r in v] for c, v in doc["values"].items()}
        return cls(list(doc["configs"]), int(doc["node_count"]), values)


def compare(
    spec: InventorySpec,
    configs: Sequence[BaselineConfig | str] = tuple(BaselineConfig),
    engine_config: EngineConfig = DEFAULT_CONFIG,
    repetitions: int = 5,
    *,
    count_per_class: int = 20,
    profile: str = "baseline",
    out_dir: str | Path | None = None,
    days: int = OPERATIONAL_DAYS,
) -> Comparison:
    """Run every config on the same inventory and labels per repetition."""
    configs = [BaselineConfig(c) for c in configs]
    if len(configs) < 2:
        raise ScenarioError("too-few-configs", "compare needs at least two configurations")
    if repetitions < 1:
        raise ScenarioError("bad-repetitions", "repetitions must be >= 1")
    runs: Dict[str, List[RunResult]] = {c.value: [] for c in configs}
    for k in range(repetitions):
        rep_spec = replace(spec, seed=spec.seed + k)
        inv, labels = scenario_for(rep_spec, count_per_class)
        for c in configs:
            run_out = Path(out_dir) / f"{c.value}-r{k}" if out_dir else None
            runs[c.value].append(replay_run(inv, labels, c, engine_config, profile=profile,
                                            run_id=f"r{k}", out_dir=run_out, days=days))
    values = {c: [(r.run_id, r.metrics) for r in rs] for c, rs in runs.items()}
    return Comparison([c.value for c in configs], spec.node_count, values, runs)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

TABLE2_HEADER = ["metric", "baseline_a", "baseline_b", "proposed"]
TABLE2_LONG_HEADER = ["metric", "config", "mean", "sd", "n"]
METRIC_HEADER = ["run_id", "config", "value"]
WELCH_HEADER = ["metric", "config_a", "config_b", "t", "df", "p"]
FIG2_HEADER = ["node_count", "config", "events_per_replay_second"]


def _fmt(x: Optional[float]) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.6g}"


def write_reports(cmp: Comparison, out_dir: str | Path, scaling: Sequence[Comparison] = ()) -> List[Path]:
    """Summary table (config columns), long form, per-metric runs, Welch tests and fig2.

    ``scaling`` supplies comparisons at other node counts for fig2; ``cmp``
    itself is always included.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    summaries = cmp.summaries

    def emit(name: str, header: List[str], rows: Iterable[Sequence[Any]]) -> None:
        path = out / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        written.append(path)

    def cell(c: str, m: str) -> str:
        s = summaries.get(c, {}).get(m)
        if s is None:
            return ""
        return f"{_fmt(s.mean)} +/- {_fmt(s.sd if s.sd is not None else 0.0)}"

    emit("table2.csv", TABLE2_HEADER, ([m] + [cell(c, m) for c in TABLE2_HEADER[1:]] for m in METRICS))
    emit("table2_long.csv", TABLE2_LONG_HEADER,
         ([m, c, _fmt(s.mean), _fmt(s.sd), s.n] for m in METRICS for c in cmp.configs for s in [summaries[c][m]]))
    for m in METRICS:
        emit(f"metric_{m}.csv", METRIC_HEADER,
             ([rid, c, _fmt(vals[m])] for c in cmp.configs for rid, vals in cmp.values[c]))
    emit("welch.csv", WELCH_HEADER, ([m, a, b, _fmt(t), _fmt(df), _fmt(p)] for m, a, b, t, df, p in cmp.welch))
    by_size = {c.node_count: c for c in scaling}
    by_size[cmp.node_count] = cmp
    emit("fig2.csv", FIG2_HEADER, (
        [n, c, _fmt(summarize(by_size[n].series(c, "events_per_replay_second")).mean)]
        for n in sorted(by_size) for c in by_size[n].configs
    ))
    return written


def load_run(run_dir: str | Path) -> Tuple[EvidenceLog, Optional[EvidenceLog], List[GroundTruthLabel]]:
    from .scenario import read_labels

    run_dir = Path(run_dir)
    log = EvidenceLog.open(run_dir / "evidence")
    cf_dir = run_dir / "evidence_counterfactual"
    cf = EvidenceLog.open(cf_dir) if cf_dir.exists() else None
    return log, cf, read_labels(run_dir / "labels.jsonl")


OVERRIDE_CONTROL = "RT.OPS.OVERRIDE"


def labeled_resources(log: EvidenceLog, labels: Sequence[GroundTruthLabel]) -> List[LabeledResource]:
    """Per-resource evidence counts over the assessment window, labeled from the label file.

    Raw observations are counted (a record stands for ``duplicate_count``
    events): config sources feed C, runtime feeds T except manual overrides
    (M), and identity sources feed I.
    """
    end = log.meta()["assessment_end_ms"]
    counts: Dict[str, List[int]] = {}
    for r in log.records():
        if r.observed_at >= end:
            continue
        row = counts.setdefault(r.resource_id, [0, 0, 0, 0])
        if r.control_id == OVERRIDE_CONTROL:
            row[3] += r.duplicate_count
        elif r.source in CONFIG_SOURCES:
            row[0] += r.duplicate_count
        elif r.source is Source.IDENTITY:
            row[2] += r.duplicate_count
        else:
            row[1] += r.duplicate_count
    positive = {lab.resource_id for lab in labels}
    for rid in positive:
        counts.setdefault(rid, [0, 0, 0, 0])
    return [LabeledResource(rid, EvidenceCounts(*row), rid in positive) for rid, row in sorted(counts.items())]
