"""Source adapters: raw sensor/scanner events -> NormalizedEvent.

Every raw event is a mapping with ``adapter``, ``event_id`` and
``timestamp`` (replay milliseconds) plus adapter-specific fields.
"""

from __future__ import annotations

from typing import Any, Callable, Dict, Mapping, Tuple

from .errors import NormalizationError
from .findings import finding_event, normalize_finding
from .model import (
    PRIORITY_TO_SEVERITY,
    Finding,
    NormalizedEvent,
    Priority,
    Source,
    from_doc,
)

# runtime rule -> (control_id, evidence confidence)
RUNTIME_RULES: Dict[str, Tuple[str, float]] = {
    "TerminalShell": ("RT.SHELL.CONTAINER", 0.9),
    "CryptoMiner": ("RT.PROC.CRYPTO-MINER", 0.95),
    "ServiceAccountTokenOveruse": ("K8S.SA.TOKEN-OVERUSE", 0.9),
    "WriteBelowEtc": ("RT.FILE.WRITE-ETC", 0.8),
    "ReadSensitiveFile": ("RT.FILE.READ-SENSITIVE", 0.5),
    "ContactK8sAPIServer": ("RT.NET.K8S-API", 0.6),
    "PrivilegedContainer": ("RT.CONTAINER.PRIVILEGED", 0.8),
    "ManualOverride": ("RT.OPS.OVERRIDE", 0.5),
}

# keystone/neutron log events -> (control_id, priority, confidence)
OPENSTACK_LOG_EVENTS: Dict[str, Tuple[str, Priority, float]] = {
    "auth_failure": ("OS.IAM.AUTH-FAILURE", Priority.NOTICE, 0.6),
    "role_escalation": ("OS.IAM.ROLE-ESCALATION", Priority.ERROR, 0.9),
    "sg_change": ("OS.NET.SG-CHANGE", Priority.NOTICE, 0.6),
}


def _base(raw: Mapping[str, Any]) -> Tuple[str, int]:
    eid = raw.get("event_id")
    ts = raw.get("timestamp")
    if not eid or not isinstance(ts, int) or ts < 0:
        raise NormalizationError("unroutable-event", "raw event needs event_id and a non-negative integer timestamp")
    return str(eid), ts


def _falco(raw: Mapping[str, Any]) -> NormalizedEvent:
    eid, ts = _base(raw)
    rule = raw.get("rule")
    if rule not in RUNTIME_RULES:
        raise NormalizationError("unroutable-event", f"unknown runtime rule {rule!r}")
    pod = raw.get("pod")
    if not pod:
        raise NormalizationError("missing-resource", eid)
    resource = pod if "/" in pod else f"pod/{pod}"
    control, conf = RUNTIME_RULES[rule]
    priority = Priority.parse(raw.get("priority", "notice"))
    evidence = {"rule": rule}
    for key in ("namespace", "process", "command", "override"):
        if key in raw:
            evidence[key] = raw[key]
    return NormalizedEvent(
        event_id=eid,
        timestamp=ts,
        resource_id=resource,
        control_id=control,
        priority=priority,
        severity=PRIORITY_TO_SEVERITY[priority],
        source=Source.RUNTIME,
        subject_id=raw.get("user"),
        evidence=evidence,
        confidence=float(raw.get("confidence", conf)),
    )


def _openstack_log(raw: Mapping[str, Any]) -> NormalizedEvent:
    eid, ts = _base(raw)
    kind = raw.get("event")
    if kind not in OPENSTACK_LOG_EVENTS:
        raise NormalizationError("unroutable-event", f"unknown openstack log event {kind!r}")
    project = raw.get("project")
    if not project:
        raise NormalizationError("missing-resource", eid)
    control, priority, conf = OPENSTACK_LOG_EVENTS[kind]
    evidence = {"project_id": project, "service": raw.get("adapter")}
    for key in ("user", "role", "security_group"):
        if key in raw:
            evidence[key] = raw[key]
    return NormalizedEvent(
        event_id=eid,
        timestamp=ts,
        resource_id=f"project/{project}",
        control_id=control,
        priority=priority,
        severity=PRIORITY_TO_SEVERITY[priority],
        source=Source.IDENTITY if raw.get("adapter") == "keystone" else Source.RUNTIME,
        subject_id=raw.get("actor") or raw.get("user"),
        evidence=evidence,
        confidence=float(raw.get("confidence", conf)),
    )


def _cbe(raw: Mapping[str, Any]) -> NormalizedEvent:
    eid, ts = _base(raw)
    doc = raw.get("finding")
    if not isinstance(doc, Mapping):
        raise NormalizationError("unroutable-event", f"{eid}: cbe event without finding")
    if not doc.get("resource_id"):
        raise NormalizationError("missing-resource", eid)
    return finding_event(from_doc(Finding, doc), eid, ts)


def _scanner(source: Source) -> Callable[[Mapping[str, Any]], NormalizedEvent]:
    def adapt(raw: Mapping[str, Any]) -> NormalizedEvent:
        eid, ts = _base(raw)
        row = raw.get("row") or {}
        try:
            finding = normalize_finding(row, source)
        except NormalizationError as exc:
            code = "missing-resource" if "resource" in str(exc) else exc.code
            raise NormalizationError(code, f"{eid}: {exc}") from None
        return finding_event(finding, eid, ts)
    return adapt


ADAPTERS: Dict[str, Callable[[Mapping[str, Any]], NormalizedEvent]] = {
    "falco": _falco,
    "keystone": _openstack_log,
    "neutron": _openstack_log,
    "cbe": _cbe,
    "admission": _scanner(Source.ADMISSION),
    "iac": _scanner(Source.IAC_SCAN),
    "openstack_check": _scanner(Source.LIVE_SCAN),
    "identity_check": _scanner(Source.IDENTITY),
}


def normalize(raw: Mapping[str, Any] | NormalizedEvent) -> NormalizedEvent:
    if isinstance(raw, NormalizedEvent):
        return raw
    adapter = ADAPTERS.get(raw.get("adapter", "")) if isinstance(raw, Mapping) else None
    if adapter is None:
        raise NormalizationError("unroutable-event", f"no adapter claims {raw!r:.120}")
    return adapter(raw)
