from __future__ import annotations

import random

import pytest

from cloudguard.errors import GraphError
from cloudguard.graph import (
    Context,
    EdgeKind,
    NodeKind,
    PlatformSnapshot,
    add_parts,
    approved_op,
    empty_graph,
    ingest_inventory,
    ingest_snapshot,
    neighbors,
    record_activity,
    who_can,
)
from cloudguard.model import GrantTuple, ScopeId, ScopeKind, Severity

from oracles import who_can_oracle

VERBS = ("get", "list", "create", "delete", "patch")
CONTAINER_KINDS = (NodeKind.NAMESPACE, NodeKind.PROJECT, NodeKind.DOMAIN, NodeKind.CLUSTER)


def random_graph(rng: random.Random, max_nodes: int = 50):
    n_sub, n_role, n_res, n_cont = (rng.randint(1, 10) for _ in range(4))
    while n_sub + n_role + n_res + n_cont > max_nodes:
        n_cont -= 1
    subjects = [f"s{i}" for i in range(n_sub)]
    roles = [f"role{i}" for i in range(n_role)]
    resources = [f"res{i}" for i in range(n_res)]
    conts = [f"c{i}" for i in range(max(n_cont, 0))]
    nodes = [(s, NodeKind.SUBJECT, {}) for s in subjects]
    for r in roles:
        verbs = ("*",) if rng.random() < 0.15 else tuple(sorted(rng.sample(VERBS, rng.randint(1, 3))))
        kinds = ("*",) if rng.random() < 0.6 else (rng.choice(("pod", "vm")),)
        nodes.append((r, NodeKind.ROLE, {"verbs": verbs, "kinds": kinds}))
    nodes += [(r, NodeKind.RESOURCE, {"kind": rng.choice(("pod", "vm"))}) for r in resources]
    nodes += [(c, rng.choice(CONTAINER_KINDS), {}) for c in conts]
    edges = []
    for s in subjects:
        for r in rng.sample(roles, rng.randint(0, min(3, len(roles)))):
            edges.append((s, r, EdgeKind.GRANTS, {}))
    targets = conts + resources
    for r in roles:
        for t in rng.sample(targets, rng.randint(0, min(2, len(targets)))):
            edges.append((r, t, EdgeKind.SCOPE, {}))
    for _ in range(rng.randint(0, 2 * len(targets))):
        u, v = rng.choice(targets), rng.choice(conts + resources)
        if u != v:
            kind = EdgeKind.OWNERSHIP if u in resources else EdgeKind.SCOPE
            edges.append((u, v, kind, {}))
    # activity edges must never confer permission
    for _ in range(rng.randint(0, 3)):
        edges.append((rng.choice(subjects), rng.choice(resources), EdgeKind.RECENT_ACTIVITY, {"at_ms": 0}))
    return add_parts(empty_graph(), nodes, edges), resources


def random_graph_cases(count: int = 1000, seed: int = 1234):
    """``count`` random graphs, each with one (action, resource) query."""
    rng = random.Random(seed)
    for _ in range(count):
        g, resources = random_graph(rng)
        yield g, [(rng.choice(VERBS), rng.choice(resources))]


def test_who_can_matches_oracle_on_random_graphs():
    checked = nonempty = 0
    for g, queries in random_graph_cases():
        assert len(g) <= 50
        for action, res in queries:
            got = who_can(g, action, res)
            assert got == who_can_oracle(g, action, res)
            checked += 1
            nonempty += bool(got)
    assert checked == 1000
    assert nonempty > 200  # the generator must exercise non-trivial answers


def cross_platform_graph():
    k8s = PlatformSnapshot("k8s", (
        {"kind": "RoleBinding", "subject": "bob", "role": "view", "namespace": "team"},
    ))
    openstack = PlatformSnapshot("openstack", (
        {"kind": "domain", "name": "d1"},
        {"kind": "project", "name": "p1", "domain": "d1"},
        {"kind": "role_assignment", "subject": "bob", "role": "admin", "project": "p1"},
    ))
    g, _ = ingest_snapshot(empty_graph(), k8s)
    g, _ = ingest_snapshot(g, openstack)
    docs = [
        {"resource_id": "r1", "family": "openstack", "kind": "server", "project": "p1"},
        {"resource_id": "pod/team/web", "family": "k8s", "kind": "pod", "namespace": "team"},
    ]
    return ingest_inventory(g, docs)


def cross_platform_fixture_holds() -> bool:
    g = cross_platform_graph()
    return (
        "bob" in who_can(g, "delete", "r1")
        and who_can(g, "delete", "r1") == who_can_oracle(g, "delete", "r1")
        # the Kubernetes view alone shows bob as read-only
        and who_can(g, "get", "pod/team/web") == {"bob"}
        and who_can(g, "delete", "pod/team/web") == set()
    )


def test_cross_platform_over_privilege_is_visible():
    g = cross_platform_graph()
    assert "bob" in who_can(g, "delete", "r1")
    assert who_can(g, "delete", "r1") == who_can_oracle(g, "delete", "r1")
    assert who_can(g, "get", "pod/team/web") == {"bob"}
    assert who_can(g, "delete", "pod/team/web") == set()
    assert cross_platform_fixture_holds()


def test_project_admin_fixture():
    g = add_parts(
        empty_graph(),
        [("alice", NodeKind.SUBJECT, {}), ("admin", NodeKind.ROLE, {"verbs": ("delete",), "kinds": ("*",)}),
         ("project:p1", NodeKind.PROJECT, {}), ("r1", NodeKind.RESOURCE, {})],
        [("alice", "admin", EdgeKind.GRANTS, {}), ("admin", "project:p1", EdgeKind.SCOPE, {}),
         ("r1", "project:p1", EdgeKind.OWNERSHIP, {})],
    )
    assert who_can(g, "delete", "r1") == {"alice"} == who_can_oracle(g, "delete", "r1")


def test_empty_grants():
    g = add_parts(empty_graph(), [("r1", NodeKind.RESOURCE, {})])
    assert who_can(g, "get", "r1") == set()


def test_unknown_resource():
    with pytest.raises(GraphError) as err:
        who_can(empty_graph(), "get", "nope")
    assert err.value.code == "unknown-resource"


def test_cluster_admin_expansion():
    snap = PlatformSnapshot("k8s", ({"kind": "ClusterRoleBinding", "subject": "alice", "role": "cluster-admin"},))
    g, added = ingest_snapshot(empty_graph(), snap)
    assert GrantTuple("alice", "cluster-admin", ScopeId(ScopeKind.CLUSTER, "cluster"), "*", "*") in added
    g = ingest_inventory(g, [{"resource_id": "pod/x/y", "family": "k8s", "kind": "pod", "namespace": "x"}])
    assert who_can(g, "anything", "pod/x/y") == {"alice"}


def test_ingest_idempotent_and_generations():
    snap = PlatformSnapshot("openstack", (
        {"kind": "project", "name": "p1"},
        {"kind": "role_assignment", "subject": "u", "role": "member", "project": "p1"},
    ))
    g1, added1 = ingest_snapshot(empty_graph(), snap)
    g2, added2 = ingest_snapshot(g1, snap)
    assert added1 and added2 == []
    assert g2.generation == g1.generation + 1
    assert g1.same_content(g2)


def test_empty_snapshot_changes_nothing():
    g, added = ingest_snapshot(empty_graph(), PlatformSnapshot("k8s"))
    assert added == [] and len(g) == 0


@pytest.mark.parametrize(
    "snap, code",
    [
        (PlatformSnapshot("vmware"), "unknown-platform"),
        (PlatformSnapshot("k8s", ({"kind": "RoleBinding", "role": "view", "namespace": "n"},)), "malformed-record"),
        (PlatformSnapshot("k8s", ({"kind": "RoleBinding", "subject": "a", "role": "wizard", "namespace": "n"},)), "malformed-record"),
        (PlatformSnapshot("openstack", ({"kind": "role_assignment", "subject": "a", "role": "admin"},)), "malformed-record"),
    ],
)
def test_ingest_errors(snap, code):
    with pytest.raises(GraphError) as err:
        ingest_snapshot(empty_graph(), snap)
    assert err.value.code == code


def test_snapshot_isolation():
    g0 = cross_platform_graph()
    before = who_can(g0, "delete", "r1")
    ingest_snapshot(g0, PlatformSnapshot("openstack", (
        {"kind": "role_assignment", "subject": "eve", "role": "admin", "project": "p1"},
    )))
    assert who_can(g0, "delete", "r1") == before


def test_platform_symmetry():
    """The same grant shape gives the same answer whichever adapter produced it."""
    k8s = PlatformSnapshot("k8s", ({"kind": "RoleBinding", "subject": "u", "role": "admin", "namespace": "n"},))
    g, _ = ingest_snapshot(empty_graph(), k8s)
    g = ingest_inventory(g, [{"resource_id": "a", "family": "k8s", "kind": "pod", "namespace": "n"}])
    os_ = PlatformSnapshot("openstack", ({"kind": "project", "name": "n"},
                                         {"kind": "role_assignment", "subject": "u", "role": "member", "project": "n"}))
    h, _ = ingest_snapshot(empty_graph(), os_)
    h = ingest_inventory(h, [{"resource_id": "a", "family": "openstack", "kind": "pod", "project": "n"}])
    for verb in ("get", "create", "update"):
        assert who_can(g, verb, "a") == who_can(h, verb, "a") == {"u"}


def test_neighbors_isolated_resource():
    g = add_parts(empty_graph(), [("r1", NodeKind.RESOURCE, {})])
    ctx = neighbors(g, None, "r1")
    assert ctx.nodes == {"r1"} and not ctx.approved_operator and not approved_op(ctx)


def _operator_graph():
    g = add_parts(empty_graph(), [("ops", NodeKind.SUBJECT, {"approved_operator": True}), ("r1", NodeKind.RESOURCE, {})])
    return record_activity(g, [("ops", "r1", 10_000)])


def test_approved_operator_freshness():
    g = _operator_graph()
    assert approved_op(neighbors(g, "ops", "r1", now_ms=10_000 + 3_600_000))
    assert not approved_op(neighbors(g, "ops", "r1", now_ms=10_000 + 3_600_001))
    assert not approved_op(neighbors(g, "ops", "r1", now_ms=9_999))
    assert not approved_op(neighbors(g, None, "r1"))


def test_unapproved_subject_with_activity():
    g = add_parts(empty_graph(), [("dev", NodeKind.SUBJECT, {}), ("r1", NodeKind.RESOURCE, {})])
    g = record_activity(g, [("dev", "r1", 0)])
    assert not approved_op(neighbors(g, "dev", "r1", now_ms=0))


def test_open_findings_in_context():
    g = _operator_graph()
    ctx = neighbors(g, None, "r1", open_findings={"r1": {"K8S.POD.HOST-NETWORK": Severity.MEDIUM}})
    assert ctx.open_findings_on_resource == (("K8S.POD.HOST-NETWORK", Severity.MEDIUM),)


def test_neighbourhood_radius_two():
    g = cross_platform_graph()
    ctx = neighbors(g, "bob", "r1")
    # r1 -> project -> domain, bob -> role -> scope
    assert {"r1", "project:p1", "domain:d1", "bob"} <= ctx.nodes
    assert all(len(e) == 3 for e in ctx.edges)


def test_neighbors_independent_of_insertion_order():
    rng = random.Random(7)
    g, resources = random_graph(rng)
    nodes = [(n, g.kind(n), dict(g.attrs(n))) for n in g.nodes()]
    edges = [(u, v, k, dict(a)) for u, v, k, a in g.edges()]
    rng.shuffle(nodes)
    rng.shuffle(edges)
    h = add_parts(empty_graph(), nodes, edges)
    for r in resources:
        a, b = neighbors(g, "s0", r), neighbors(h, "s0", r)
        assert (a.nodes, a.edges, a.approved_operator) == (b.nodes, b.edges, b.approved_operator)


def test_bare_context():
    ctx = Context.bare("x")
    assert ctx.nodes == {"x"} and ctx.edges == frozenset() and not approved_op(ctx)


def test_self_loop_grant_rejected():
    with pytest.raises(GraphError):
        add_parts(empty_graph(), [("a", NodeKind.SUBJECT, {})], [("a", "a", EdgeKind.GRANTS, {})])
