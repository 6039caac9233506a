from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st

from cloudguard.adapters import normalize
from cloudguard.errors import NormalizationError, ProfileError
from cloudguard.findings import (
    dedup,
    evaluate_profile,
    load_profile,
    normalize_finding,
    profile_from_doc,
    severity_gate,
)
from cloudguard.model import Finding, NormalizedEvent, Priority, Severity, Source, validate_finding

from oracles import dedup_oracle

PRIV_POD = {"resource_id": "pod/a/p1", "family": "k8s", "kind": "pod", "namespace": "a",
            "spec": {"securityContext": {"privileged": True}}}
CLEAN_POD = {"resource_id": "pod/a/p2", "family": "k8s", "kind": "pod", "namespace": "a",
             "spec": {"securityContext": {"privileged": False}}}
OPEN_RULE = {"resource_id": "iac/repo/rule-1", "family": "iac", "kind": "secgroup_rule", "project": "p1",
             "remote_ip_prefix": "0.0.0.0/0"}


@pytest.mark.parametrize("name", ["baseline", "hardened", "regulated"])
def test_shipped_profiles_load(name):
    prof = load_profile(name)
    assert prof.name == name
    ids = [p.control_id for p in prof.policies]
    assert len(ids) == len(set(ids))


def test_privileged_pod_finding():
    found = evaluate_profile(load_profile("baseline"), [PRIV_POD, CLEAN_POD])
    assert [(f.control_id, f.resource_id, f.severity) for f in found] == [
        ("K8S.PRIV.POD.PRIVILEGED", "pod/a/p1", Severity.HIGH)
    ]
    assert found[0].confidence == 0.9


def test_open_cidr_finding():
    found = evaluate_profile(load_profile("baseline"), [OPEN_RULE])
    assert [f.control_id for f in found] == ["IAC.NET.OPEN-CIDR"]


def test_cidr_equality_is_semantic():
    rule = dict(OPEN_RULE, remote_ip_prefix="0.0.0.0/00")
    assert len(evaluate_profile(load_profile("baseline"), [rule])) == 1
    for prefix in ("10.0.0.0/8", "not-a-cidr"):
        rule = dict(OPEN_RULE, remote_ip_prefix=prefix)
        assert evaluate_profile(load_profile("baseline"), [rule]) == []
    rule = dict(OPEN_RULE, remote_ip_prefix="0.0.0.1/0")  # host bits ignored
    assert len(evaluate_profile(load_profile("baseline"), [rule])) == 1


def test_empty_inventory():
    assert evaluate_profile(load_profile("baseline"), []) == []


def test_unknown_paths_are_absent():
    doc = {"resource_id": "pod/x/y", "family": "k8s", "kind": "pod"}
    assert evaluate_profile(load_profile("baseline"), [doc]) == []


def test_evaluation_order_insensitive():
    docs = [PRIV_POD, CLEAN_POD, OPEN_RULE, dict(PRIV_POD, resource_id="pod/a/p0")]
    prof = load_profile("hardened")
    expected = evaluate_profile(prof, docs)
    rng = random.Random(3)
    for _ in range(20):
        rng.shuffle(docs)
        assert evaluate_profile(prof, docs) == expected


@pytest.mark.parametrize(
    "doc",
    [
        {"name": "x", "policies": [
            {"control_id": "A.B", "severity": "low", "applies_to": "k8s/pod", "predicate": [{"path": "a", "op": "eq", "value": 1}]},
            {"control_id": "A.B", "severity": "low", "applies_to": "k8s/pod", "predicate": [{"path": "a", "op": "eq", "value": 1}]},
        ]},
        {"name": "x", "policies": [
            {"control_id": "A.B", "severity": "low", "applies_to": "k8s/pod", "predicate": [{"path": "a", "op": "regex", "value": 1}]},
        ]},
        {"name": "x", "policies": [
            {"control_id": "A.B", "severity": "low", "applies_to": "vmware", "predicate": [{"path": "a", "op": "eq", "value": 1}]},
        ]},
        {"policies": []},
    ],
)
def test_invalid_profiles(doc):
    with pytest.raises(ProfileError) as err:
        profile_from_doc(doc)
    assert err.value.code == "invalid-profile"


def test_admission_row():
    f = normalize_finding({"constraint": "privileged-pods", "object": "pod/p1"}, Source.ADMISSION)
    assert (f.control_id, f.resource_id, f.source) == ("K8S.PRIV.POD.PRIVILEGED", "pod/p1", Source.ADMISSION)
    assert validate_finding(f) == []


def test_openstack_check_row():
    f = normalize_finding({"check": "default-secgroup", "project": "p7"}, "live_scan")
    assert f.control_id == "OS.NET.DEFAULT-SG"
    assert f.resource_id == "project/p7"
    assert f.evidence["project_id"] == "p7"


def test_iac_row_without_resource():
    with pytest.raises(NormalizationError) as err:
        normalize_finding({"check_id": "CKV_OPENSTACK_2"}, Source.IAC_SCAN)
    assert err.value.code == "unmappable-row"


def test_unknown_constraint():
    with pytest.raises(NormalizationError):
        normalize_finding({"constraint": "nope", "object": "pod/p1"}, Source.ADMISSION)


def _finding(sev: Severity, rid: str = "r") -> Finding:
    return Finding("K8S.POD.HOSTPATH", rid, sev, 0.9, Source.LIVE_SCAN)


def test_severity_gate():
    events = severity_gate([_finding(Severity.LOW, "a"), _finding(Severity.MEDIUM, "b"), _finding(Severity.HIGH, "c")])
    assert [e.resource_id for e in events] == ["b", "c"]
    assert severity_gate([_finding(Severity.INFO)] * 3) == []
    (crit,) = severity_gate([_finding(Severity.CRITICAL)])
    assert crit.priority is Priority.CRITICAL


def _ev(eid, ts, rid="r1", control="C.ONE"):
    return NormalizedEvent(eid, ts, rid, control, Priority.WARNING, Severity.MEDIUM, Source.LIVE_SCAN)


def test_dedup_examples():
    five = [_ev(f"e{i}", 1000 + i) for i in range(5)]
    assert [(e.event_id, n) for e, n in dedup(five, 300_000)] == [("e0", 5)]
    two = [_ev("a", 0, rid="r1"), _ev("b", 0, rid="r2")]
    assert len(dedup(two, 300_000)) == 2
    adjacent = [_ev("a", 299_999), _ev("b", 300_000)]
    assert len(dedup(adjacent, 300_000)) == 2


def test_dedup_rejects_bad_window():
    with pytest.raises(ValueError):
        dedup([], 0)


event_lists = st.lists(
    st.builds(
        _ev,
        st.text("abcdef", min_size=1, max_size=4),
        st.integers(0, 2_000_000),
        st.sampled_from(["r1", "r2", "r3"]),
        st.sampled_from(["C.ONE", "C.TWO"]),
    ),
    max_size=60,
)


@settings(max_examples=300)
@given(event_lists, st.sampled_from([1, 1000, 300_000]))
def test_dedup_matches_grouping_oracle(events, window):
    got = dedup(events, window)
    assert [(e.event_id, n) for e, n in got] == dedup_oracle(events, window)
    assert sum(n for _, n in got) == len(events)


@given(event_lists)
def test_dedup_idempotent(events):
    once = [e for e, _ in dedup(events, 300_000)]
    twice = [e for e, _ in dedup(once, 300_000)]
    assert once == twice


def test_dedup_collapses_across_sources():
    a = normalize({"adapter": "admission", "event_id": "adm", "timestamp": 5,
                   "row": {"constraint": "privileged-pods", "object": "pod/a/p1"}})
    b = normalize({"adapter": "cbe", "event_id": "scan", "timestamp": 7,
                   "finding": {"control_id": "K8S.PRIV.POD.PRIVILEGED", "resource_id": "pod/a/p1",
                               "severity": "high", "confidence": 0.9, "source": "live_scan"}})
    assert [(e.event_id, n) for e, n in dedup([b, a], 300_000)] == [("adm", 2)]
