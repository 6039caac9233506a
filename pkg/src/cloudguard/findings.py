"""Configuration baseline checks.

Control profiles are YAML documents::

    name: baseline
    version: "1"
    policies:
      - control_id: K8S.PRIV.POD.PRIVILEGED
        severity: high
        applies_to: k8s/pod
        predicate:
          - {path: spec.securityContext.privileged, op: eq, value: true}
        fix_hint: set securityContext.privileged to false

A predicate is a conjunction of tests over dotted paths in a resource
document. Supported ops: ``eq``, ``ne``, ``exists`` (value true/false),
``in`` (value is a list) and ``cidr_eq``. A path that does not resolve is
"absent": it never equals anything, is never in a set, and satisfies
``ne`` and ``exists: false``.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import yaml

from .errors import NormalizationError, ProfileError
from .model import (
    CONTROL_ID_RE,
    FAMILIES,
    SEVERITY_TO_PRIORITY,
    Finding,
    NormalizedEvent,
    Severity,
    Source,
    validate_finding,
)

DEFAULT_CONFIDENCE = 0.9
DEFAULT_DEDUP_WINDOW_MS = 300_000
EMIT_AT = Severity.MEDIUM

_ABSENT = object()
_OPS = ("eq", "ne", "exists", "in", "cidr_eq")
_FAMILY_SOURCE = {"k8s": Source.LIVE_SCAN, "openstack": Source.LIVE_SCAN, "iac": Source.IAC_SCAN}


def lookup(doc: Mapping[str, Any], path: str) -> Any:
    node: Any = doc
    for part in path.split("."):
        if isinstance(node, Mapping) and part in node:
            node = node[part]
        else:
            return _ABSENT
    return node


def _same_cidr(a: Any, b: Any) -> bool:
    try:
        return ipaddress.ip_network(str(a), strict=False) == ipaddress.ip_network(str(b), strict=False)
    except ValueError:
        return False


@dataclass(frozen=True)
class Test:
    path: str
    op: str
    value: Any = None

    def holds(self, doc: Mapping[str, Any]) -> bool:
        got = lookup(doc, self.path)
        if self.op == "eq":
            return got is not _ABSENT and got == self.value and type(got) is type(self.value)
        if self.op == "ne":
            return got is _ABSENT or got != self.value or type(got) is not type(self.value)
        if self.op == "exists":
            return (got is not _ABSENT) == bool(self.value)
        if self.op == "in":
            return got is not _ABSENT and any(got == v and type(got) is type(v) for v in self.value)
        if self.op == "cidr_eq":
            return got is not _ABSENT and _same_cidr(got, self.value)
        raise ProfileError("invalid-profile", f"unknown predicate op {self.op!r}")


@dataclass(frozen=True)
class PolicyPredicate:
    tests: Tuple[Test, ...]

    def holds(self, doc: Mapping[str, Any]) -> bool:
        return all(t.holds(doc) for t in self.tests)

    def observed(self, doc: Mapping[str, Any]) -> Dict[str, Any]:
        out = {}
        for t in self.tests:
            got = lookup(doc, t.path)
            out[t.path] = None if got is _ABSENT else got
        return out


@dataclass(frozen=True)
class Policy:
    control_id: str
    severity: Severity
    family: str
    kind: Optional[str]
    predicate: PolicyPredicate
    fix_hint: Optional[str] = None
    confidence: float = DEFAULT_CONFIDENCE
    source: Optional[Source] = None

    def applies(self, doc: Mapping[str, Any]) -> bool:
        return doc.get("family") == self.family and (self.kind is None or doc.get("kind") == self.kind)


@dataclass(frozen=True)
class ControlProfile:
    name: str
    version: str
    policies: Tuple[Policy, ...] = field(default_factory=tuple)

    def policy(self, control_id: str) -> Optional[Policy]:
        for p in self.policies:
            if p.control_id == control_id:
                return p
        return None

    @property
    def covered_kinds(self) -> List[Tuple[str, Optional[str]]]:
        return sorted({(p.family, p.kind) for p in self.policies}, key=lambda x: (x[0], x[1] or ""))


def _parse_predicate(raw: Any, where: str) -> PolicyPredicate:
    if isinstance(raw, Mapping) and "all" in raw:
        raw = raw["all"]
    if isinstance(raw, Mapping):
        raw = [raw]
    if not isinstance(raw, list) or not raw:
        raise ProfileError("invalid-profile", f"{where}: predicate must be a non-empty list of tests")
    tests = []
    for t in raw:
        if not isinstance(t, Mapping) or "path" not in t or "op" not in t:
            raise ProfileError("invalid-profile", f"{where}: each test needs path and op")
        op = t["op"]
        if op not in _OPS:
            raise ProfileError("invalid-profile", f"{where}: unknown predicate op {op!r}")
        value = t.get("value", True if op == "exists" else None)
        if op == "in":
            if not isinstance(value, list):
                raise ProfileError("invalid-profile", f"{where}: 'in' needs a list value")
            value = tuple(value)
        tests.append(Test(str(t["path"]), op, value))
    return PolicyPredicate(tuple(tests))


def profile_from_doc(doc: Mapping[str, Any]) -> ControlProfile:
    if not isinstance(doc, Mapping) or "name" not in doc or "policies" not in doc:
        raise ProfileError("invalid-profile", "profile needs name and policies")
    seen = set()
    policies = []
    for i, p in enumerate(doc["policies"] or ()):
        where = f"policy {i}"
        cid = p.get("control_id") or p.get("control id")
        if not cid or not CONTROL_ID_RE.match(cid):
            raise ProfileError("invalid-profile", f"{where}: bad control_id {cid!r}")
        if cid in seen:
            raise ProfileError("invalid-profile", f"duplicate control_id {cid}")
        seen.add(cid)
        applies = str(p.get("applies_to", ""))
        family, _, kind = applies.partition("/")
        if family not in FAMILIES:
            raise ProfileError("invalid-profile", f"{where}: applies_to must name one of {FAMILIES}")
        try:
            severity = Severity.parse(p.get("severity"))
            source = Source(p["source"]) if p.get("source") else None
        except ValueError as exc:
            raise ProfileError("invalid-profile", f"{where}: {exc}") from None
        conf = float(p.get("confidence", DEFAULT_CONFIDENCE))
        if not 0.0 <= conf <= 1.0:
            raise ProfileError("invalid-profile", f"{where}: confidence out of range")
        policies.append(
            Policy(
                control_id=cid,
                severity=severity,
                family=family,
                kind=kind or None,
                predicate=_parse_predicate(p.get("predicate"), where),
                fix_hint=p.get("fix_hint"),
                confidence=conf,
                source=source,
            )
        )
    return ControlProfile(name=str(doc["name"]), version=str(doc.get("version", "0")), policies=tuple(policies))


def load_profile(name_or_path: str) -> ControlProfile:
    """Load a shipped profile by name (baseline, hardened, regulated) or a YAML file path."""
    if name_or_path in ("baseline", "hardened", "regulated"):
        text = resources.files("cloudguard.data.profiles").joinpath(f"{name_or_path}.yaml").read_text("utf-8")
    else:
        with open(name_or_path, encoding="utf-8") as fh:
            text = fh.read()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ProfileError("invalid-profile", str(exc)) from None
    return profile_from_doc(doc)


def check_policy(policy: Policy, doc: Mapping[str, Any]) -> Optional[Finding]:
    if not policy.applies(doc) or not policy.predicate.holds(doc):
        return None
    evidence = {"observed": policy.predicate.observed(doc), "kind": doc.get("kind", "")}
    modified_by = lookup(doc, "metadata.modified_by")
    if modified_by is not _ABSENT:
        evidence["subject"] = modified_by
    if doc.get("project"):
        evidence["project_id"] = doc["project"]
    return Finding(
        control_id=policy.control_id,
        resource_id=doc["resource_id"],
        severity=policy.severity,
        confidence=policy.confidence,
        source=policy.source or _FAMILY_SOURCE[policy.family],
        evidence=evidence,
        fix_hint=policy.fix_hint,
    )


def evaluate_profile(profile: ControlProfile, inventory: Iterable[Mapping[str, Any]]) -> List[Finding]:
    """One finding per (policy, violating document), ordered by (resource_id, control_id)."""
    out = []
    for doc in inventory:
        if not doc.get("resource_id") or doc.get("family") not in FAMILIES:
            raise ProfileError("invalid-profile", f"inventory document lacks resource_id/family: {doc!r}")
        for policy in profile.policies:
            f = check_policy(policy, doc)
            if f is not None:
                out.append(f)
    out.sort(key=lambda f: (f.resource_id, f.control_id))
    return out


# ---------------------------------------------------------------------------
# scanner-shaped rows
# ---------------------------------------------------------------------------

# control catalogue used when a scanner row does not carry its own severity
CONTROLS: Dict[str, Tuple[Severity, str]] = {
    "K8S.PRIV.POD.PRIVILEGED": (Severity.HIGH, "set spec.securityContext.privileged to false"),
    "K8S.POD.HOST-NETWORK": (Severity.MEDIUM, "set spec.hostNetwork to false"),
    "K8S.POD.HOSTPATH": (Severity.HIGH, "remove hostPath volumes"),
    "K8S.SA.TOKEN-OVERUSE": (Severity.MEDIUM, "scope or rotate the service-account token"),
    "K8S.RBAC.CLUSTER-ADMIN": (Severity.CRITICAL, "replace the cluster-admin binding with a scoped role"),
    "K8S.SVC.PUBLIC-LB": (Severity.HIGH, "restrict loadBalancerSourceRanges"),
    "K8S.INGRESS.NO-TLS": (Severity.MEDIUM, "add a TLS section to the ingress"),
    "OS.NET.DEFAULT-SG": (Severity.MEDIUM, "attach a restrictive security group"),
    "OS.NET.PUBLIC-NONSTD": (Severity.HIGH, "remove the public floating IP from the non-production project"),
    "OS.IAM.ROLE-ESCALATION": (Severity.HIGH, "revoke the escalated role assignment"),
    "OS.IAM.WEAK-APPCRED": (Severity.MEDIUM, "recreate the application credential with restrictions and expiry"),
    "IAC.NET.OPEN-CIDR": (Severity.MEDIUM, "narrow the ingress CIDR"),
    "OS.VOL.UNENCRYPTED": (Severity.MEDIUM, "migrate to an encrypted volume type"),
}

# admission-controller constraint names
ADMISSION_CONSTRAINTS = {
    "privileged-pods": "K8S.PRIV.POD.PRIVILEGED",
    "host-network": "K8S.POD.HOST-NETWORK",
    "host-path-volumes": "K8S.POD.HOSTPATH",
    "no-cluster-admin": "K8S.RBAC.CLUSTER-ADMIN",
    "ingress-tls": "K8S.INGRESS.NO-TLS",
    "restricted-loadbalancer": "K8S.SVC.PUBLIC-LB",
}
# IaC scanner check ids
IAC_CHECKS = {
    "CKV_OPENSTACK_2": "IAC.NET.OPEN-CIDR",
    "CKV_OPENSTACK_3": "IAC.NET.OPEN-CIDR",
    "CKV_OPENSTACK_VOL_1": "OS.VOL.UNENCRYPTED",
}
# custom OpenStack checks
OPENSTACK_CHECKS = {
    "default-secgroup": "OS.NET.DEFAULT-SG",
    "public-fip-nonprod": "OS.NET.PUBLIC-NONSTD",
    "weak-app-credential": "OS.IAM.WEAK-APPCRED",
    "unencrypted-volume": "OS.VOL.UNENCRYPTED",
}


def normalize_finding(raw: Mapping[str, Any], source: Source | str) -> Finding:
    """Map an admission denial, IaC scanner row or OpenStack check result to a Finding."""
    source = Source(source) if not isinstance(source, Source) else source
    if source is Source.ADMISSION:
        control = ADMISSION_CONSTRAINTS.get(raw.get("constraint", ""))
        resource = raw.get("object")
        evidence = {"constraint": raw.get("constraint"), "message": raw.get("message", "")}
    elif source is Source.IAC_SCAN:
        control = IAC_CHECKS.get(raw.get("check_id", ""))
        resource = raw.get("resource")
        evidence = {"check_id": raw.get("check_id"), "file": raw.get("file_path", "")}
    elif source in (Source.LIVE_SCAN, Source.IDENTITY):
        control = OPENSTACK_CHECKS.get(raw.get("check", ""))
        resource = raw.get("resource") or (f"project/{raw['project']}" if raw.get("project") else None)
        evidence = {"check": raw.get("check")}
        if raw.get("project"):
            evidence["project_id"] = raw["project"]
    else:
        raise NormalizationError("unmappable-row", f"runtime rows go through the event adapters, not {source.value}")
    if raw.get("user"):
        evidence["subject"] = raw["user"]
    if not resource:
        raise NormalizationError("unmappable-row", "row has no resource reference")
    if not control:
        raise NormalizationError("unmappable-row", f"no control mapping for row {dict(raw)!r}")
    severity, hint = CONTROLS[control]
    if raw.get("severity"):
        severity = Severity.parse(raw["severity"])
    f = Finding(
        control_id=control,
        resource_id=str(resource),
        severity=severity,
        confidence=float(raw.get("confidence", DEFAULT_CONFIDENCE)),
        source=source,
        evidence={k: v for k, v in evidence.items() if v is not None},
        fix_hint=hint,
    )
    problems = validate_finding(f)
    if problems:
        raise NormalizationError("unmappable-row", ", ".join(problems))
    return f


# ---------------------------------------------------------------------------
# gate and dedup
# ---------------------------------------------------------------------------


def finding_event(f: Finding, event_id: str, timestamp: int) -> NormalizedEvent:
    return NormalizedEvent(
        event_id=event_id,
        timestamp=timestamp,
        resource_id=f.resource_id,
        control_id=f.control_id,
        priority=SEVERITY_TO_PRIORITY[f.severity],
        severity=f.severity,
        source=f.source,
        subject_id=f.evidence.get("subject"),
        evidence=dict(f.evidence),
        confidence=f.confidence,
    )


def severity_gate(findings: Sequence[Finding], *, at_ms: int = 0, id_prefix: str = "cbe") -> List[NormalizedEvent]:
    """Events for the findings at or above medium; the rest stay stored only."""
    events = []
    for f in findings:
        if f.severity >= EMIT_AT:
            eid = f"{id_prefix}:{f.control_id}:{f.resource_id}"
            events.append(finding_event(f, eid, at_ms))
    return events


def dedup_key(e: NormalizedEvent, window_ms: int) -> Tuple[str, str, int]:
    return (e.resource_id, e.control_id, e.timestamp // window_ms)


def dedup(events: Sequence[NormalizedEvent], window_ms: int = DEFAULT_DEDUP_WINDOW_MS) -> List[Tuple[NormalizedEvent, int]]:
    """Collapse events sharing (resource, control, tumbling window) onto the earliest one.

    Sources are not part of the key, so an admission denial and a live-scan
    finding for the same control collapse together. Survivors keep their
    input order.
    """
    if window_ms <= 0:
        raise ValueError("window_ms must be positive")
    first: Dict[Tuple[str, str, int], int] = {}
    counts: List[int] = []
    survivors: List[NormalizedEvent] = []
    for e in events:
        key = dedup_key(e, window_ms)
        slot = first.get(key)
        if slot is None:
            first[key] = len(survivors)
            survivors.append(e)
            counts.append(1)
        else:
            if e.sort_key < survivors[slot].sort_key:
                survivors[slot] = e
            counts[slot] += 1
    return list(zip(survivors, counts))
