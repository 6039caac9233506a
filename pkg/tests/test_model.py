from __future__ import annotations

import json
import math

import pytest
from hypothesis import given, strategies as st

from cloudguard.model import (
    ActionKind,
    EvidenceRecord,
    Finding,
    GrantTuple,
    NormalizedEvent,
    PostCheck,
    Priority,
    ScopeId,
    ScopeKind,
    Severity,
    Source,
    Thresholds,
    WeightVector,
    canonical_json,
    compare_severity,
    dumps,
    from_doc,
    loads,
    to_doc,
    validate_finding,
)


def test_severity_total_order():
    ordered = [Severity.INFO, Severity.LOW, Severity.MEDIUM, Severity.HIGH, Severity.CRITICAL]
    assert sorted(reversed(ordered)) == ordered
    for i, a in enumerate(ordered):
        for j, b in enumerate(ordered):
            assert compare_severity(a, b) == (i > j) - (i < j)


def test_enum_comparison_rejects_other_types():
    with pytest.raises(TypeError):
        Severity.HIGH < Priority.ERROR


@pytest.mark.parametrize("text, expected", [("HIGH", Severity.HIGH), (" medium ", Severity.MEDIUM), ("info", Severity.INFO)])
def test_severity_parse(text, expected):
    assert Severity.parse(text) is expected


def test_severity_parse_unknown():
    with pytest.raises(ValueError, match="unknown severity"):
        Severity.parse("severe")


def test_action_order_is_escalation_order():
    assert ActionKind.LOG < ActionKind.TICKET < ActionKind.PLAN < ActionKind.PATCH


def _finding(**kw):
    base = dict(control_id="K8S.POD.HOSTPATH", resource_id="pod/a/b", severity=Severity.HIGH,
                confidence=0.9, source=Source.LIVE_SCAN)
    base.update(kw)
    return Finding(**base)


def test_valid_finding_has_no_problems():
    assert validate_finding(_finding()) == []


@pytest.mark.parametrize(
    "override, problem",
    [
        ({"control_id": ""}, "missing-control"),
        ({"control_id": "lowercase.id"}, "bad-control-id"),
        ({"resource_id": ""}, "missing-resource"),
        ({"confidence": 1.5}, "confidence-out-of-range"),
        ({"confidence": -0.1}, "confidence-out-of-range"),
        ({"confidence": math.nan}, "confidence-out-of-range"),
        ({"severity": "high"}, "bad-severity"),
    ],
)
def test_invalid_findings(override, problem):
    assert problem in validate_finding(_finding(**override))


def test_grant_and_scope_validation():
    with pytest.raises(ValueError):
        ScopeId(ScopeKind.NAMESPACE, "")
    with pytest.raises(ValueError):
        GrantTuple("", "view", ScopeId(ScopeKind.NAMESPACE, "a"), "*", "get")
    assert str(ScopeId(ScopeKind.PROJECT, "p1")) == "project:p1"


def test_event_guards():
    with pytest.raises(ValueError):
        NormalizedEvent("", 0, "r", "C.X", Priority.ERROR, Severity.HIGH, Source.RUNTIME)
    with pytest.raises(ValueError):
        NormalizedEvent("e", -1, "r", "C.X", Priority.ERROR, Severity.HIGH, Source.RUNTIME)


def test_rollback_token_only_on_patch():
    with pytest.raises(ValueError):
        EvidenceRecord("e", ActionKind.TICKET, 0.5, 1, PostCheck.NOT_APPLICABLE, 1, rollback_token="rbk-1")
    with pytest.raises(ValueError):
        EvidenceRecord("e", ActionKind.LOG, 0.1, 1, PostCheck.NOT_APPLICABLE, 1, duplicate_count=0)


@pytest.mark.parametrize("weights", [(0.5, 0.5, 0.0, 0.1), (1.1, -0.1, 0.0, 0.0)])
def test_weight_vector_rejects(weights):
    with pytest.raises(ValueError):
        WeightVector(*weights)


def test_thresholds_must_be_ordered():
    with pytest.raises(ValueError):
        Thresholds(0.7, 0.3)
    assert Thresholds().tau_low == 0.3


records = st.builds(
    EvidenceRecord,
    event_id=st.text(min_size=1, max_size=12),
    action=st.sampled_from([ActionKind.LOG, ActionKind.TICKET, ActionKind.PLAN]),
    conf=st.floats(0, 1),
    latency_ms=st.integers(0, 10**6),
    post_check=st.sampled_from(list(PostCheck)),
    wrote_at=st.integers(0, 10**9),
    duplicate_count=st.integers(1, 50),
    resource_id=st.text(max_size=12),
    control_id=st.text(max_size=12),
    source=st.none() | st.sampled_from(list(Source)),
    severity=st.none() | st.sampled_from(list(Severity)),
)


@given(records)
def test_record_round_trip(rec):
    assert loads(EvidenceRecord, dumps(rec)) == rec


@given(records)
def test_canonical_form_is_stable(rec):
    text = dumps(rec)
    assert canonical_json(json.loads(text)) == text


def test_grant_round_trip():
    g = GrantTuple("alice", "admin", ScopeId(ScopeKind.PROJECT, "p1"), "*", "delete")
    assert from_doc(GrantTuple, to_doc(g)) == g


def test_from_doc_rejects_unknown_fields():
    doc = to_doc(EvidenceRecord("e", ActionKind.LOG, 0.1, 1, PostCheck.NOT_APPLICABLE, 1))
    doc["extra"] = 1
    with pytest.raises(ValueError, match="unknown fields"):
        from_doc(EvidenceRecord, doc)


def test_grants_differing_only_in_scope_kind_sort():
    a = GrantTuple("bob", "admin", ScopeId(ScopeKind.PROJECT, "p1"), "r", "delete")
    b = GrantTuple("bob", "admin", ScopeId(ScopeKind.DOMAIN, "p1"), "r", "delete")
    assert sorted([a, b]) == [b, a]
    assert ScopeId(ScopeKind.PROJECT, "a") < ScopeId(ScopeKind.PROJECT, "b")
