"""Identity-aware correlation: context, confidence, one action per event."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

from .adapters import normalize
from .errors import ConfigError, DomainError
from .evidence import EvidenceLog
from .findings import DEFAULT_DEDUP_WINDOW_MS, dedup
from .graph import Context, IdentityGraph, NodeKind, approved_op, neighbors
from .model import (
    CONFIG_SOURCES,
    ActionKind,
    EvidenceRecord,
    NormalizedEvent,
    PostCheck,
    Priority,
    Severity,
    Thresholds,
)
from .remediation import Mode, Orchestrator, Playbook, match

BASE_PRIORITY: Dict[Priority, float] = {
    Priority.INFORMATIONAL: 0.2,
    Priority.NOTICE: 0.4,
    Priority.WARNING: 0.6,
    Priority.ERROR: 0.8,
    Priority.CRITICAL: 1.0,
}
DOWNGRADE = 0.5
ESCALATION = 1.25

# replay-time cost of each pipeline stage, in milliseconds
STEP_COST_MS: Dict[str, int] = {
    "normalize": 1,
    "context": 2,
    "score": 1,
    "log": 1,
    "ticket": 5,
    "plan": 120,
    "patch": 40,
}

ENGINE_CONFIG_KEYS = (
    "tau_low",
    "tau_high",
    "dedup_window_ms",
    "freshness_s",
    "base_priority_map",
    "downgrade_factor",
    "escalation_factor",
)


@dataclass(frozen=True)
class EngineConfig:
    tau_low: float = 0.3
    tau_high: float = 0.7
    dedup_window_ms: int = DEFAULT_DEDUP_WINDOW_MS
    freshness_s: float = 3600
    base_priority_map: Mapping[Priority, float] = field(default_factory=lambda: dict(BASE_PRIORITY))
    downgrade_factor: float = DOWNGRADE
    escalation_factor: float = ESCALATION

    def __post_init__(self):
        Thresholds(self.tau_low, self.tau_high)
        if set(self.base_priority_map) != set(Priority):
            raise ConfigError("bad-config", "base_priority_map must cover every priority")
        if self.dedup_window_ms <= 0 or self.freshness_s < 0:
            raise ConfigError("bad-config", "dedup_window_ms must be positive and freshness_s non-negative")
        if not 0 <= self.downgrade_factor <= 1 or self.escalation_factor < 1:
            raise ConfigError("bad-config", "downgrade_factor must be in [0,1] and escalation_factor >= 1")

    @property
    def thresholds(self) -> Thresholds:
        return Thresholds(self.tau_low, self.tau_high)

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "EngineConfig":
        """Strict: every key required, unknown keys rejected."""
        if not isinstance(doc, Mapping):
            raise ConfigError("bad-config", "engine config must be a mapping")
        unknown = sorted(set(doc) - set(ENGINE_CONFIG_KEYS))
        missing = [k for k in ENGINE_CONFIG_KEYS if k not in doc]
        if unknown:
            raise ConfigError("bad-config", f"unknown keys: {', '.join(unknown)}")
        if missing:
            raise ConfigError("bad-config", f"missing keys: {', '.join(missing)}")
        try:
            base = {Priority.parse(k): float(v) for k, v in dict(doc["base_priority_map"]).items()}
            return cls(
                tau_low=float(doc["tau_low"]),
                tau_high=float(doc["tau_high"]),
                dedup_window_ms=int(doc["dedup_window_ms"]),
                freshness_s=float(doc["freshness_s"]),
                base_priority_map=base,
                downgrade_factor=float(doc["downgrade_factor"]),
                escalation_factor=float(doc["escalation_factor"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError("bad-config", str(exc)) from None

    def to_doc(self) -> Dict[str, Any]:
        return {
            "tau_low": self.tau_low,
            "tau_high": self.tau_high,
            "dedup_window_ms": self.dedup_window_ms,
            "freshness_s": self.freshness_s,
            "base_priority_map": {p.value: self.base_priority_map[p] for p in Priority},
            "downgrade_factor": self.downgrade_factor,
            "escalation_factor": self.escalation_factor,
        }


DEFAULT_CONFIG = EngineConfig()


@dataclass(frozen=True)
class ConfidenceInputs:
    evidence_confidence: float
    priority: Priority
    approved: bool = False
    correlated_config: bool = False

    def __post_init__(self):
        if not (0.0 <= self.evidence_confidence <= 1.0) or math.isnan(self.evidence_confidence):
            raise ValueError(f"evidence_confidence out of range: {self.evidence_confidence}")


def score(inp: ConfidenceInputs, config: EngineConfig = DEFAULT_CONFIG) -> float:
    if inp.approved:
        m = config.downgrade_factor
    elif inp.correlated_config:
        m = config.escalation_factor
    else:
        m = 1.0
    raw = config.base_priority_map[inp.priority] * inp.evidence_confidence * m
    return min(1.0, max(0.0, raw))


class Reason(enum.Enum):
    BELOW_TAU_LOW = "below_tau_low"
    AUTO_PATCH = "auto_patch"
    PLAN_REQUIRED = "plan_required"
    TICKET_FALLBACK = "ticket_fallback"


REASON_FOR = {
    ActionKind.LOG: Reason.BELOW_TAU_LOW,
    ActionKind.PATCH: Reason.AUTO_PATCH,
    ActionKind.PLAN: Reason.PLAN_REQUIRED,
    ActionKind.TICKET: Reason.TICKET_FALLBACK,
}


@dataclass(frozen=True)
class Decision:
    action: ActionKind
    conf: float
    reason: Reason
    playbook_id: Optional[str] = None

    def __post_init__(self):
        if REASON_FOR[self.action] is not self.reason:
            raise ValueError(f"reason {self.reason.value} does not fit action {self.action.value}")


def decide(
    e: NormalizedEvent,
    ctx: Optional[Context],
    conf: float,
    th: Thresholds,
    books: Iterable[Playbook],
) -> Decision:
    """Pure action choice. ``ctx`` is accepted for symmetry; all context enters through ``conf``."""
    if conf < th.tau_low:
        return Decision(ActionKind.LOG, conf, Reason.BELOW_TAU_LOW)
    matched = match(e, books)
    if conf >= th.tau_high and e.severity >= Severity.HIGH:
        for book in matched:
            if not book.destructive and not book.has_terraform:
                return Decision(ActionKind.PATCH, conf, Reason.AUTO_PATCH, book.id)
    for book in matched:
        if book.has_terraform:
            return Decision(ActionKind.PLAN, conf, Reason.PLAN_REQUIRED, book.id)
    return Decision(ActionKind.TICKET, conf, Reason.TICKET_FALLBACK)


def is_correlated(ctx: Context, control_id: str) -> bool:
    """Another open finding of at least medium severity sits on the same resource."""
    return any(c != control_id and sev >= Severity.MEDIUM for c, sev in ctx.open_findings_on_resource)


class CorrelationEngine:
    """Stateful driver: one evidence record per processed event.

    With ``identity=False`` every event gets a bare context: no approved
    operator downgrade and no correlated-finding escalation.

    Replay time is modelled as a single-server queue: an event starts at
    ``max(timestamp, busy_until)`` and finishes after the summed stage costs,
    so ``wrote_at`` never goes backwards.
    """

    def __init__(
        self,
        graph: IdentityGraph,
        log: EvidenceLog,
        *,
        orchestrator: Optional[Orchestrator] = None,
        books: Sequence[Playbook] = (),
        config: EngineConfig = DEFAULT_CONFIG,
        identity: bool = True,
    ):
        self.graph = graph
        self.identity = identity
        self.log = log
        self.orchestrator = orchestrator
        self.books = list(books)
        self.config = config
        self.open_findings: Dict[str, Dict[str, Severity]] = {}
        self.busy_until = 0
        self.processed = 0

    # open-finding bookkeeping -------------------------------------------
    def observe(self, resource_id: str, control_id: str, severity: Severity) -> None:
        if severity >= Severity.MEDIUM:
            self.open_findings.setdefault(resource_id, {})[control_id] = severity

    def resolve(self, resource_id: str, control_id: str) -> None:
        found = self.open_findings.get(resource_id)
        if found:
            found.pop(control_id, None)
            if not found:
                del self.open_findings[resource_id]

    def context(self, e: NormalizedEvent) -> Context:
        """Graph context for ``e``; bare when identity correlation is off."""
        if not self.identity:
            return Context.bare(e.resource_id)
        if e.resource_id in self.graph and self.graph.kind(e.resource_id) is NodeKind.RESOURCE:
            return neighbors(
                self.graph,
                e.subject_id,
                e.resource_id,
                now_ms=e.timestamp,
                open_findings=self.open_findings,
                freshness_s=self.config.freshness_s,
            )
        found = tuple(sorted(self.open_findings.get(e.resource_id, {}).items()))
        return Context.bare(e.resource_id, found)

    def evaluate(self, e: NormalizedEvent) -> Decision:
        ctx = self.context(e)
        inp = ConfidenceInputs(e.confidence, e.priority, approved_op(ctx), is_correlated(ctx, e.control_id))
        return decide(e, ctx, score(inp, self.config), self.config.thresholds, self.books)

    def process(self, raw: Mapping[str, Any] | NormalizedEvent, duplicate_count: int = 1) -> EvidenceRecord:
        e = normalize(raw)
        decision = self.evaluate(e)
        cost = STEP_COST_MS["normalize"] + STEP_COST_MS["context"] + STEP_COST_MS["score"]
        cost += STEP_COST_MS[decision.action.value]

        post_check = PostCheck.NOT_APPLICABLE
        token = plan_id = None
        messages: List[str] = []
        if decision.action in (ActionKind.PATCH, ActionKind.PLAN):
            post_check, token, plan_id, messages = self._remediate(e, decision)

        start = max(e.timestamp, self.busy_until)
        wrote_at = start + cost
        self.busy_until = wrote_at
        record = EvidenceRecord(
            event_id=e.event_id,
            action=decision.action,
            conf=decision.conf,
            latency_ms=wrote_at - e.timestamp,
            post_check=post_check,
            wrote_at=wrote_at,
            duplicate_count=duplicate_count,
            rollback_token=token,
            resource_id=e.resource_id,
            control_id=e.control_id,
            subject_id=e.subject_id,
            source=e.source,
            severity=e.severity,
            observed_at=e.timestamp,
            reason=decision.reason.value,
            playbook_id=decision.playbook_id,
            plan_id=plan_id,
        )
        self.log.append(record)
        if decision.action is ActionKind.LOG:
            self.log.append_info({"event_id": e.event_id, "control_id": e.control_id, "resource_id": e.resource_id, "conf": decision.conf})
        for msg in messages:
            self.log.append_info({"event_id": e.event_id, "message": msg})

        if e.source in CONFIG_SOURCES:
            self.observe(e.resource_id, e.control_id, e.severity)
        if post_check is PostCheck.PASSED:
            self.resolve(e.resource_id, e.control_id)
        self.processed += 1
        return record

    def _remediate(self, e: NormalizedEvent, decision: Decision):
        orch = self.orchestrator
        book = next((b for b in self.books if b.id == decision.playbook_id), None)
        if orch is None or book is None:
            return PostCheck.FAILED, None, None, []
        try:
            if decision.action is ActionKind.PATCH:
                out = orch.execute(book, e, Mode.APPLY, now_ms=e.timestamp)
                token = out.token.token_id if out.token else None
                return out.post_check, token, None, out.messages
            out = orch.execute(book, e, Mode.DRY_RUN, now_ms=e.timestamp)
            plan_id = out.plan.plan_id if out.plan else None
            return PostCheck.NOT_APPLICABLE, None, plan_id, out.messages
        except DomainError:
            return PostCheck.FAILED, None, None, []

    def process_batch(
        self,
        raws: Iterable[Mapping[str, Any] | NormalizedEvent],
        *,
        deduplicate: bool = True,
    ) -> List[EvidenceRecord]:
        """Normalize, group duplicates, then process in (timestamp, event_id) order."""
        events = [normalize(r) for r in raws]
        if deduplicate:
            groups = dedup(events, self.config.dedup_window_ms)
        else:
            groups = [(e, 1) for e in events]
        groups.sort(key=lambda pair: pair[0].sort_key)
        return [self.process(e, n) for e, n in groups]
