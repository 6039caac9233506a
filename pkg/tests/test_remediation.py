from __future__ import annotations

import copy
import json
import random

import pytest

from cloudguard.errors import PlaybookError, RemediationError
from cloudguard.findings import load_profile
from cloudguard.model import NormalizedEvent, PostCheck, Priority, Severity, Source, canonical_json
from cloudguard.remediation import (
    ActionStep,
    Approval,
    Mode,
    Orchestrator,
    Playbook,
    StateStore,
    load_playbooks,
    match,
    merge_patch,
    parse_playbook,
)

PRIV_POD_BOOK = """
when:
  source: cbe
  severity: high
  control id: K8S.PRIV.POD.PRIVILEGED
do:
  - type: k8s.patch
    target: {{ resource_id }}
    payload: { "spec": { "securityContext": { "privileged": false } } }
  - type: elastic.log
    message: "Privileged pod patched automatically"
"""

OPEN_SG_BOOK = """
when:
  source: cbe
  control id: OS.NET.PUBLIC-NONSTD
do:
  - type: terraform.apply
    module: network/restrictive
    vars:
      project: {{ project id }}
"""

POD = "pod/a/p1"


def _event(control="K8S.PRIV.POD.PRIVILEGED", rid=POD, sev=Severity.HIGH, source=Source.LIVE_SCAN, **kw):
    return NormalizedEvent("e1", 0, rid, control, Priority.ERROR, sev, source, **kw)


def _stores():
    live = StateStore({
        POD: {"resource_id": POD, "family": "k8s", "kind": "pod", "namespace": "a",
              "spec": {"securityContext": {"privileged": True}}},
        "fip/p1/ip-0": {"resource_id": "fip/p1/ip-0", "family": "openstack", "kind": "floating_ip",
                        "project": "p1", "public": True, "env": "dev"},
        "server/p1/vm-0": {"resource_id": "server/p1/vm-0", "family": "openstack", "kind": "server",
                           "project": "p1", "security_group": "default"},
    })
    declared = StateStore({k: live.get(k) for k in ("fip/p1/ip-0", "server/p1/vm-0")})
    return live, declared


# -- parsing -----------------------------------------------------------------

def test_parse_k8s_book():
    book = parse_playbook(PRIV_POD_BOOK)
    assert book.when == {"source": "cbe", "severity": "high", "control_id": "K8S.PRIV.POD.PRIVILEGED"}
    patch, log = book.do
    assert patch.type == "k8s.patch" and patch.target == "{{ resource_id }}"
    assert patch.payload == {"spec": {"securityContext": {"privileged": False}}}
    assert log.message == "Privileged pod patched automatically"
    assert not book.destructive and not book.has_terraform


def test_parse_openstack_book():
    book = parse_playbook(OPEN_SG_BOOK)
    assert book.when == {"source": "cbe", "control_id": "OS.NET.PUBLIC-NONSTD"}
    (step,) = book.do
    assert step.module == "network/restrictive"
    assert step.vars == {"project": "{{ project_id }}"}
    assert book.has_terraform


def test_missing_do():
    with pytest.raises(PlaybookError) as err:
        parse_playbook("when:\n  source: cbe\n")
    assert err.value.code == "parse-error"


def test_yaml_error_has_position():
    with pytest.raises(PlaybookError) as err:
        parse_playbook("when:\n  source: [cbe\ndo: []\n")
    assert err.value.code == "parse-error" and err.value.line is not None


def test_unknown_step_type():
    with pytest.raises(PlaybookError) as err:
        parse_playbook("when: {source: cbe}\ndo:\n  - type: shell.exec\n")
    assert err.value.code == "unknown-step-type"


def test_unknown_template_variable():
    text = "when: {source: cbe}\ndo:\n  - type: k8s.patch\n    target: {{ cluster name }}\n    payload: {a: 1}\n"
    with pytest.raises(PlaybookError) as err:
        parse_playbook(text)
    assert err.value.code == "unknown-template-variable"


def test_shipped_books_parse():
    books = load_playbooks()
    assert [b.id for b in books] == sorted(b.id for b in books)
    assert {b.id for b in books} >= {"k8s-privileged-pod", "os-public-nonstd"}


# -- matching ------------------------------------------------------------------

def test_match_rules():
    k8s = parse_playbook("id: b\n" + PRIV_POD_BOOK)
    assert match(_event(), [k8s]) == [k8s]
    assert match(_event(sev=Severity.MEDIUM), [k8s]) == []
    assert match(_event(source=Source.RUNTIME), [k8s]) == []
    twin = parse_playbook("id: a\n" + PRIV_POD_BOOK)
    assert [b.id for b in match(_event(), [k8s, twin])] == ["a", "b"]


# -- execution -----------------------------------------------------------------

def test_patch_apply_and_rollback():
    live, declared = _stores()
    orch = Orchestrator(live, declared, load_profile("baseline"))
    original = copy.deepcopy(live.get(POD))
    out = orch.execute(parse_playbook(PRIV_POD_BOOK), _event(), Mode.APPLY)
    assert live.get(POD)["spec"]["securityContext"]["privileged"] is False
    assert out.post_check is PostCheck.PASSED
    assert out.messages == ["Privileged pod patched automatically"]
    restored = orch.rollback(out.token)
    assert restored == original
    with pytest.raises(RemediationError) as err:
        orch.rollback(out.token)
    assert err.value.code == "already-redeemed"


def test_rollback_after_delete():
    live, declared = _stores()
    orch = Orchestrator(live, declared)
    out = orch.execute(parse_playbook(PRIV_POD_BOOK), _event(), Mode.APPLY)
    live.delete(POD)
    with pytest.raises(RemediationError) as err:
        orch.rollback(out.token)
    assert err.value.code == "resource-missing"


def test_dry_run_is_pure():
    live, declared = _stores()
    orch = Orchestrator(live, declared)
    before = (live.digest(), declared.digest())
    out = orch.execute(parse_playbook(PRIV_POD_BOOK), _event(), Mode.DRY_RUN)
    assert (live.digest(), declared.digest()) == before
    assert out.diffs == [(f"{POD}:spec.securityContext.privileged", True, False)]


def test_terraform_needs_approval_and_dry_run():
    live, declared = _stores()
    orch = Orchestrator(live, declared)
    book = parse_playbook(OPEN_SG_BOOK)
    e = _event("OS.NET.PUBLIC-NONSTD", "fip/p1/ip-0", evidence={"project_id": "p1"})
    before = (live.digest(), declared.digest())
    with pytest.raises(RemediationError) as err:
        orch.execute(book, e, Mode.APPLY, approval=False)
    assert err.value.code == "approval-required"
    with pytest.raises(RemediationError) as err:
        orch.execute(book, e, Mode.APPLY, approval=True)
    assert err.value.code == "no-prior-dry-run"
    assert (live.digest(), declared.digest()) == before

    dry = orch.execute(book, e, Mode.DRY_RUN)
    assert dry.plan.approval is Approval.PENDING and not dry.plan.applied
    assert dry.plan.diff == (("fip/p1/ip-0:public", True, False),)
    done = orch.execute(book, e, Mode.APPLY, approval=True)
    assert done.plan.applied and done.plan.approval is Approval.APPROVED
    for path, _, after in done.plan.diff:
        rid, field = path.split(":")
        assert live.get(rid)[field] == declared.get(rid)[field] == after


def test_plan_approval_flow():
    live, declared = _stores()
    orch = Orchestrator(live, declared)
    e = _event("OS.NET.PUBLIC-NONSTD", "fip/p1/ip-0", evidence={"project_id": "p1"})
    plan = orch.execute(parse_playbook(OPEN_SG_BOOK), e, Mode.DRY_RUN).plan
    with pytest.raises(RemediationError):
        orch.apply_plan(plan.plan_id)
    orch.approve(plan.plan_id)
    applied = orch.apply_plan(plan.plan_id)
    assert applied.applied and live.get("fip/p1/ip-0")["public"] is False
    assert orch.pending_plans() == []


def test_template_unresolved():
    live, declared = _stores()
    orch = Orchestrator(live, declared)
    e = _event("OS.NET.PUBLIC-NONSTD", "nowhere")
    book = parse_playbook(OPEN_SG_BOOK)
    with pytest.raises(RemediationError) as err:
        orch.execute(book, e, Mode.DRY_RUN)
    assert err.value.code == "template-unresolved"


def test_target_not_found():
    live, declared = _stores()
    with pytest.raises(RemediationError) as err:
        Orchestrator(live, declared).execute(parse_playbook(PRIV_POD_BOOK), _event(rid="pod/a/ghost"), Mode.APPLY)
    assert err.value.code == "target-not-found"


# -- merge patch ---------------------------------------------------------------

# the worked examples from RFC 7396 appendix A
RFC_CASES = [
    ({"a": "b"}, {"a": "c"}, {"a": "c"}),
    ({"a": "b"}, {"b": "c"}, {"a": "b", "b": "c"}),
    ({"a": "b"}, {"a": None}, {}),
    ({"a": "b", "b": "c"}, {"a": None}, {"b": "c"}),
    ({"a": ["b"]}, {"a": "c"}, {"a": "c"}),
    ({"a": "c"}, {"a": ["b"]}, {"a": ["b"]}),
    ({"a": {"b": "c"}}, {"a": {"b": "d", "c": None}}, {"a": {"b": "d"}}),
    ({"a": [{"b": "c"}]}, {"a": [1]}, {"a": [1]}),
    (["a", "b"], ["c", "d"], ["c", "d"]),
    ({"a": "b"}, ["c"], ["c"]),
    ({"a": "foo"}, None, None),
    ({"a": "foo"}, "bar", "bar"),
    ({"e": None}, {"a": 1}, {"e": None, "a": 1}),
    ([1, 2], {"a": "b", "c": None}, {"a": "b"}),
    ({}, {"a": {"bb": {"ccc": None}}}, {"a": {"bb": {}}}),
]


@pytest.mark.parametrize("target, patch, expected", RFC_CASES)
def test_merge_patch_rfc_examples(target, patch, expected):
    snapshot = copy.deepcopy(target)
    assert merge_patch(target, patch) == expected
    assert target == snapshot


# -- properties ----------------------------------------------------------------

SAFE_PATCHES = [
    {"spec": {"securityContext": {"privileged": False}}},
    {"spec": {"hostNetwork": False}},
    {"spec": {"securityContext": {"runAsNonRoot": True, "allowPrivilegeEscalation": False}}},
]
UNSAFE_PATCHES = [
    {"spec": {"hostPath": None}},
    {"spec": {"type": "ClusterIP"}},
    {"spec": {"securityContext": {"privileged": True}}},
    {"metadata": {"labels": {"x": "y"}}},
]
TF_STEPS = [
    ActionStep("terraform.apply", module="network/restrictive", vars={"project": "p1"}),
    ActionStep("terraform.apply", module="network/secgroup-restrict", vars={"server": "server/p1/vm-0"}),
]


def _random_book(rng: random.Random, i: int) -> Playbook:
    steps = []
    for _ in range(rng.randint(1, 3)):
        r = rng.random()
        if r < 0.35:
            steps.append(ActionStep("k8s.patch", target="{{ resource_id }}", payload=rng.choice(SAFE_PATCHES)))
        elif r < 0.65:
            steps.append(ActionStep("k8s.patch", target="{{ resource_id }}", payload=rng.choice(UNSAFE_PATCHES)))
        elif r < 0.85:
            steps.append(rng.choice(TF_STEPS))
        else:
            steps.append(ActionStep("elastic.log", message="note"))
    return Playbook(f"pb-{i}", {"source": "cbe"}, tuple(steps))


def gating_violations(trials: int = 1000, seed: int = 99):
    """Count gating failures; also report how many trials exercised each path."""
    rng = random.Random(seed)
    violations = guarded_cases = mutating_cases = 0
    for i in range(trials):
        live, declared = _stores()
        writes = []
        live.hooks.append(lambda rid, doc: writes.append(("live", rid)))
        declared.hooks.append(lambda rid, doc: writes.append(("declared", rid)))
        orch = Orchestrator(live, declared)
        book = _random_book(rng, i)
        approval = rng.random() < 0.5
        if rng.random() < 0.5:
            orch.execute(book, _event(), Mode.DRY_RUN)
            violations += writes != []
        guarded = book.destructive or book.has_terraform
        try:
            orch.execute(book, _event(), Mode.APPLY, approval=approval)
        except RemediationError as exc:
            violations += not guarded or exc.code not in ("approval-required", "no-prior-dry-run")
        if guarded and not approval:
            guarded_cases += 1
            violations += writes != []
        mutating_cases += bool(writes)
    return violations, guarded_cases, mutating_cases


def test_gating_soundness_randomized():
    violations, guarded_cases, mutating_cases = gating_violations()
    assert violations == 0
    assert guarded_cases > 100 and mutating_cases > 100


def _random_doc(rng: random.Random, depth: int = 0):
    doc = {}
    for _ in range(rng.randint(0, 4)):
        key = rng.choice("abcdef")
        if depth < 3 and rng.random() < 0.35:
            doc[key] = _random_doc(rng, depth + 1)
        else:
            doc[key] = rng.choice([True, False, 0, 7, -1.5, "x", "", [1, 2], [], None])
    return doc


def round_trip_mismatches(trials: int = 1000, seed: int = 2024) -> int:
    rng = random.Random(seed)
    bad = 0
    for i in range(trials):
        doc = _random_doc(rng)
        doc["resource_id"] = POD
        live = StateStore({POD: doc})
        original_text = canonical_json(live.get(POD))
        orch = Orchestrator(live)
        patch = _random_doc(rng) or {"z": 1}
        book = Playbook(f"pb-{i}", {"source": "cbe"}, (ActionStep("k8s.patch", target="{{ resource_id }}", payload=patch),))
        if book.destructive:
            orch.execute(book, _event(), Mode.DRY_RUN)
        out = orch.execute(book, _event(), Mode.APPLY, approval=True)
        bad += live.get(POD) != merge_patch(json.loads(original_text), patch)
        orch.rollback(out.token)
        bad += canonical_json(live.get(POD)) != original_text
    return bad


def test_patch_rollback_round_trip_randomized():
    assert round_trip_mismatches() == 0
