"""Identity-resource graph.

Kubernetes RBAC records and OpenStack Keystone records are folded into one
typed graph. A binding becomes ``subject -grants-> role@scope -scope-> X``
and every resource hangs off its namespace or project through an
``ownership`` edge; namespaces and projects in turn point at their cluster
or domain with a ``scope`` edge. A subject can act on a resource when some
role it holds is scoped to the resource or to one of its containers.

Graphs are immutable: every ingest returns a new graph with a higher
``generation``, so readers holding an older graph see a stable snapshot.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from .errors import GraphError
from .model import GrantTuple, ScopeId, ScopeKind, Severity


class NodeKind(enum.Enum):
    SUBJECT = "subject"
    ROLE = "role"
    RESOURCE = "resource"
    NAMESPACE = "namespace"
    PROJECT = "project"
    DOMAIN = "domain"
    CLUSTER = "cluster"


class EdgeKind(enum.Enum):
    GRANTS = "grants"
    OWNERSHIP = "ownership"
    SCOPE = "scope"
    RECENT_ACTIVITY = "recent_activity"


CONTAINMENT = (EdgeKind.OWNERSHIP, EdgeKind.SCOPE)
CLUSTER_NODE = "cluster"
WILDCARD = "*"

# role -> (verbs, resource kinds); fixture data, not Keystone/Kubernetes semantics
K8S_ROLES: Dict[str, Tuple[Tuple[str, ...], Tuple[str, ...]]] = {
    "cluster-admin": (("*",), ("*",)),
    "admin": (("create", "delete", "get", "list", "patch", "update", "watch"), ("*",)),
    "edit": (("create", "delete", "get", "list", "patch", "update", "watch"), ("*",)),
    "view": (("get", "list", "watch"), ("*",)),
}
OPENSTACK_ROLES: Dict[str, Tuple[Tuple[str, ...], Tuple[str, ...]]] = {
    "admin": (("*",), ("*",)),
    "member": (("create", "get", "list", "update"), ("*",)),
    "reader": (("get", "list"), ("*",)),
}
DEFAULT_ROLE_TABLES = {"k8s": K8S_ROLES, "openstack": OPENSTACK_ROLES}

EdgeKey = Tuple[str, str, EdgeKind]


def ns_node(name: str) -> str:
    return f"ns:{name}"


def project_node(name: str) -> str:
    return f"project:{name}"


def domain_node(name: str) -> str:
    return f"domain:{name}"


def role_node(platform: str, role: str, scope_node: str) -> str:
    return f"role:{platform}:{role}@{scope_node}"


_SCOPE_KINDS = {
    NodeKind.NAMESPACE: ScopeKind.NAMESPACE,
    NodeKind.PROJECT: ScopeKind.PROJECT,
    NodeKind.DOMAIN: ScopeKind.DOMAIN,
    NodeKind.CLUSTER: ScopeKind.CLUSTER,
}


@dataclass(frozen=True)
class PlatformSnapshot:
    platform: str
    records: Tuple[Mapping[str, Any], ...] = ()
    # overrides the shipped role -> verbs table for this platform
    role_verbs: Optional[Mapping[str, Tuple[Sequence[str], Sequence[str]]]] = None


class IdentityGraph:
    """Immutable typed graph. Build new generations with the module functions."""

    def __init__(self):
        self.generation = 0
        self._kinds: Dict[str, NodeKind] = {}
        self._attrs: Dict[str, Dict[str, Any]] = {}
        self._edges: Dict[EdgeKey, Dict[str, Any]] = {}
        self._out: Dict[str, Dict[EdgeKind, Set[str]]] = {}
        self._in: Dict[str, Dict[EdgeKind, Set[str]]] = {}
        self._grants: Set[GrantTuple] = set()

    # -- read API -----------------------------------------------------------

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._kinds

    def __len__(self) -> int:
        return len(self._kinds)

    def kind(self, node_id: str) -> NodeKind:
        return self._kinds[node_id]

    def attrs(self, node_id: str) -> Mapping[str, Any]:
        return self._attrs.get(node_id, {})

    def nodes(self, kind: Optional[NodeKind] = None) -> List[str]:
        return sorted(n for n, k in self._kinds.items() if kind is None or k is kind)

    def edges(self, kind: Optional[EdgeKind] = None) -> List[Tuple[str, str, EdgeKind, Mapping[str, Any]]]:
        out = [(u, v, k, a) for (u, v, k), a in self._edges.items() if kind is None or k is kind]
        out.sort(key=lambda e: (e[0], e[1], e[2].value))
        return out

    def edge_attrs(self, u: str, v: str, kind: EdgeKind) -> Optional[Mapping[str, Any]]:
        return self._edges.get((u, v, kind))

    def successors(self, node_id: str, kind: EdgeKind) -> FrozenSet[str]:
        return frozenset(self._out.get(node_id, {}).get(kind, ()))

    def predecessors(self, node_id: str, kind: EdgeKind) -> FrozenSet[str]:
        return frozenset(self._in.get(node_id, {}).get(kind, ()))

    @property
    def grants(self) -> FrozenSet[GrantTuple]:
        return frozenset(self._grants)

    def same_content(self, other: "IdentityGraph") -> bool:
        """Equality ignoring the generation counter."""
        return (
            self._kinds == other._kinds
            and self._attrs == other._attrs
            and self._edges == other._edges
            and self._grants == other._grants
        )

    # -- copy-on-write helpers ---------------------------------------------

    def _fork(self) -> "IdentityGraph":
        g = IdentityGraph()
        g.generation = self.generation + 1
        g._kinds = dict(self._kinds)
        g._attrs = {n: dict(a) for n, a in self._attrs.items()}
        g._edges = {k: dict(a) for k, a in self._edges.items()}
        g._out = {n: {k: set(s) for k, s in m.items()} for n, m in self._out.items()}
        g._in = {n: {k: set(s) for k, s in m.items()} for n, m in self._in.items()}
        g._grants = set(self._grants)
        return g

    def _node(self, node_id: str, kind: NodeKind, /, **attrs) -> None:
        if not node_id:
            raise GraphError("malformed-record", "empty node id")
        seen = self._kinds.get(node_id)
        if seen is not None and seen is not kind:
            raise GraphError("malformed-record", f"node {node_id!r} is {seen.value}, not {kind.value}")
        self._kinds[node_id] = kind
        if attrs:
            self._attrs.setdefault(node_id, {}).update(attrs)

    def _edge(self, u: str, v: str, kind: EdgeKind, /, **attrs) -> None:
        if u not in self._kinds or v not in self._kinds:
            raise GraphError("malformed-record", f"edge {u!r}->{v!r} references a missing node")
        if kind is EdgeKind.GRANTS and u == v:
            raise GraphError("malformed-record", f"self-loop grant on {u!r}")
        self._edges.setdefault((u, v, kind), {}).update(attrs)
        self._out.setdefault(u, {}).setdefault(kind, set()).add(v)
        self._in.setdefault(v, {}).setdefault(kind, set()).add(u)


def empty_graph() -> IdentityGraph:
    return IdentityGraph()


def add_parts(
    g: IdentityGraph,
    nodes: Iterable[Tuple[str, NodeKind, Mapping[str, Any]]] = (),
    edges: Iterable[Tuple[str, str, EdgeKind, Mapping[str, Any]]] = (),
) -> IdentityGraph:
    """Low-level builder: new generation with the given nodes and edges added."""
    out = g._fork()
    for node_id, kind, attrs in nodes:
        out._node(node_id, kind, **dict(attrs))
    for u, v, kind, attrs in edges:
        out._edge(u, v, kind, **dict(attrs))
    return out


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------


def _require(rec: Mapping[str, Any], index: int, *keys: str) -> None:
    for key in keys:
        value = rec.get(key)
        if not isinstance(value, str) or not value:
            raise GraphError("malformed-record", f"record {index}: missing {key!r}")


def _ensure_namespace(g: IdentityGraph, name: str) -> str:
    g._node(CLUSTER_NODE, NodeKind.CLUSTER)
    node = ns_node(name)
    g._node(node, NodeKind.NAMESPACE)
    g._edge(node, CLUSTER_NODE, EdgeKind.SCOPE)
    return node


def _ensure_project(g: IdentityGraph, name: str, domain: Optional[str] = None) -> str:
    node = project_node(name)
    g._node(node, NodeKind.PROJECT)
    if domain:
        g._node(domain_node(domain), NodeKind.DOMAIN)
        g._edge(node, domain_node(domain), EdgeKind.SCOPE)
    return node


def _bind(
    g: IdentityGraph,
    platform: str,
    subject: str,
    role: str,
    scope_node: str,
    table: Mapping[str, Tuple[Sequence[str], Sequence[str]]],
    index: int,
) -> List[GrantTuple]:
    if role not in table:
        raise GraphError("malformed-record", f"record {index}: unknown {platform} role {role!r}")
    verbs, kinds = table[role]
    rnode = role_node(platform, role, scope_node)
    g._node(subject, NodeKind.SUBJECT)
    g._node(rnode, NodeKind.ROLE, platform=platform, role=role, verbs=tuple(sorted(verbs)), kinds=tuple(sorted(kinds)))
    g._edge(subject, rnode, EdgeKind.GRANTS)
    g._edge(rnode, scope_node, EdgeKind.SCOPE)
    scope = ScopeId(_SCOPE_KINDS[g.kind(scope_node)], scope_node.split(":", 1)[-1])
    tuples = []
    for verb in sorted(verbs):
        for kind in sorted(kinds):
            resource = WILDCARD if kind == WILDCARD else f"{kind}/*"
            tuples.append(GrantTuple(subject, role, scope, resource, verb))
    return tuples


def _subject_attrs(rec: Mapping[str, Any], platform: str) -> Dict[str, Any]:
    attrs: Dict[str, Any] = {f"on_{platform}": True}
    if "approved_operator" in rec:
        attrs["approved_operator"] = bool(rec["approved_operator"])
    return attrs


def _ingest_k8s(g: IdentityGraph, records, table) -> List[GrantTuple]:
    produced: List[GrantTuple] = []
    for i, rec in enumerate(records):
        kind = rec.get("kind")
        if kind == "ClusterRoleBinding":
            _require(rec, i, "subject", "role")
            g._node(CLUSTER_NODE, NodeKind.CLUSTER)
            g._node(rec["subject"], NodeKind.SUBJECT, **_subject_attrs(rec, "k8s"))
            produced += _bind(g, "k8s", rec["subject"], rec["role"], CLUSTER_NODE, table, i)
        elif kind == "RoleBinding":
            _require(rec, i, "subject", "role", "namespace")
            ns = _ensure_namespace(g, rec["namespace"])
            g._node(rec["subject"], NodeKind.SUBJECT, **_subject_attrs(rec, "k8s"))
            produced += _bind(g, "k8s", rec["subject"], rec["role"], ns, table, i)
        elif kind == "ServiceAccount":
            _require(rec, i, "subject", "namespace")
            _ensure_namespace(g, rec["namespace"])
            g._node(rec["subject"], NodeKind.SUBJECT, namespace=rec["namespace"], **_subject_attrs(rec, "k8s"))
        elif kind == "User":
            _require(rec, i, "subject")
            g._node(rec["subject"], NodeKind.SUBJECT, **_subject_attrs(rec, "k8s"))
        else:
            raise GraphError("malformed-record", f"record {i}: unknown k8s record kind {kind!r}")
    return produced


def _ingest_openstack(g: IdentityGraph, records, table) -> List[GrantTuple]:
    produced: List[GrantTuple] = []
    for i, rec in enumerate(records):
        kind = rec.get("kind")
        if kind == "domain":
            _require(rec, i, "name")
            g._node(domain_node(rec["name"]), NodeKind.DOMAIN)
        elif kind == "project":
            _require(rec, i, "name")
            _ensure_project(g, rec["name"], rec.get("domain"))
        elif kind == "user":
            _require(rec, i, "subject")
            attrs = _subject_attrs(rec, "openstack")
            if rec.get("domain"):
                attrs["domain"] = rec["domain"]
            g._node(rec["subject"], NodeKind.SUBJECT, **attrs)
        elif kind == "role_assignment":
            _require(rec, i, "subject", "role")
            if rec.get("project"):
                scope = _ensure_project(g, rec["project"], rec.get("domain"))
            elif rec.get("domain"):
                scope = domain_node(rec["domain"])
                g._node(scope, NodeKind.DOMAIN)
            else:
                raise GraphError("malformed-record", f"record {i}: role assignment without project or domain")
            g._node(rec["subject"], NodeKind.SUBJECT, **_subject_attrs(rec, "openstack"))
            produced += _bind(g, "openstack", rec["subject"], rec["role"], scope, table, i)
        elif kind == "application_credential":
            _require(rec, i, "subject", "credential", "project")
            roles = rec.get("roles") or ()
            if not roles:
                raise GraphError("malformed-record", f"record {i}: credential without roles")
            cred = f"appcred:{rec['credential']}"
            g._node(rec["subject"], NodeKind.SUBJECT, **_subject_attrs(rec, "openstack"))
            g._node(cred, NodeKind.SUBJECT, owner=rec["subject"], on_openstack=True,
                    unrestricted=bool(rec.get("unrestricted", False)))
            scope = _ensure_project(g, rec["project"], rec.get("domain"))
            for role in sorted(roles):
                produced += _bind(g, "openstack", cred, role, scope, table, i)
        else:
            raise GraphError("malformed-record", f"record {i}: unknown openstack record kind {kind!r}")
    return produced


def ingest_snapshot(g: IdentityGraph, s: PlatformSnapshot) -> Tuple[IdentityGraph, List[GrantTuple]]:
    """Fold one platform snapshot into a new graph generation.

    Returns the new graph and the grant tuples that were not present before,
    sorted. Re-ingesting the same snapshot adds nothing.
    """
    if s.platform not in DEFAULT_ROLE_TABLES:
        raise GraphError("unknown-platform", repr(s.platform))
    table = dict(DEFAULT_ROLE_TABLES[s.platform])
    if s.role_verbs:
        table.update(s.role_verbs)
    out = g._fork()
    if s.platform == "k8s":
        produced = _ingest_k8s(out, s.records, table)
    else:
        produced = _ingest_openstack(out, s.records, table)
    added = sorted(set(produced) - g._grants)
    out._grants.update(produced)
    return out, added


def ingest_inventory(g: IdentityGraph, docs: Iterable[Mapping[str, Any]]) -> IdentityGraph:
    """Add resource nodes and their ownership edges.

    Each document needs ``resource_id`` and ``family`` and one of
    ``namespace`` (k8s) or ``project`` (openstack, iac).
    """
    out = g._fork()
    for i, doc in enumerate(docs):
        rid = doc.get("resource_id")
        if not rid:
            raise GraphError("malformed-record", f"document {i}: missing resource_id")
        family = doc.get("family")
        out._node(rid, NodeKind.RESOURCE, family=family, kind=doc.get("kind", ""))
        if family == "k8s" and doc.get("namespace"):
            out._edge(rid, _ensure_namespace(out, doc["namespace"]), EdgeKind.OWNERSHIP)
        elif doc.get("project"):
            out._edge(rid, _ensure_project(out, doc["project"], doc.get("domain")), EdgeKind.OWNERSHIP)
        elif family == "k8s":
            out._node(CLUSTER_NODE, NodeKind.CLUSTER)
            out._edge(rid, CLUSTER_NODE, EdgeKind.OWNERSHIP)
    return out


def record_activity(g: IdentityGraph, activity: Iterable[Tuple[str, str, int]]) -> IdentityGraph:
    """Add or refresh ``recent_activity`` edges; the newest timestamp wins."""
    out = g._fork()
    for subject, resource, at_ms in activity:
        if resource not in out._kinds:
            raise GraphError("unknown-resource", resource)
        out._node(subject, NodeKind.SUBJECT)
        prev = out._edges.get((subject, resource, EdgeKind.RECENT_ACTIVITY), {}).get("at_ms", -1)
        out._edge(subject, resource, EdgeKind.RECENT_ACTIVITY, at_ms=max(prev, int(at_ms)))
    return out


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------


def containers(g: IdentityGraph, resource: str) -> Set[str]:
    """The resource plus every namespace/project/domain/cluster above it."""
    seen = {resource}
    stack = [resource]
    while stack:
        node = stack.pop()
        out = g._out.get(node, {})
        for kind in CONTAINMENT:
            for nxt in out.get(kind, ()):
                if g._kinds[nxt] is NodeKind.ROLE or nxt in seen:
                    continue
                seen.add(nxt)
                stack.append(nxt)
    return seen


def _permits(attrs: Mapping[str, Any], action: str, resource_kind: str) -> bool:
    verbs = attrs.get("verbs", ())
    kinds = attrs.get("kinds", (WILDCARD,))
    return (WILDCARD in verbs or action in verbs) and (WILDCARD in kinds or resource_kind in kinds)


def who_can(g: IdentityGraph, action: str, resource: str) -> Set[str]:
    """Subjects holding a role that permits ``action`` on ``resource``, on any platform."""
    if g._kinds.get(resource) is not NodeKind.RESOURCE:
        raise GraphError("unknown-resource", resource)
    rkind = g._attrs.get(resource, {}).get("kind", "")
    subjects: Set[str] = set()
    for holder in containers(g, resource):
        for role in g._in.get(holder, {}).get(EdgeKind.SCOPE, ()):
            if g._kinds[role] is not NodeKind.ROLE:
                continue
            if _permits(g._attrs.get(role, {}), action, rkind):
                subjects.update(g._in.get(role, {}).get(EdgeKind.GRANTS, ()))
    return subjects


@dataclass(frozen=True)
class Context:
    """Identity context around one event.

    ``nodes`` and ``edges`` (everything within ``radius`` hops of the
    resource or the subject) are materialised on first access only; the
    flags are computed eagerly.
    """

    resource_node: str
    subject_node: Optional[str] = None
    approved_operator: bool = False
    open_findings_on_resource: Tuple[Tuple[str, Severity], ...] = field(default_factory=tuple)
    graph: Optional["IdentityGraph"] = field(default=None, repr=False, compare=False)
    radius: int = 2

    @classmethod
    def bare(cls, resource: str, open_findings: Tuple[Tuple[str, Severity], ...] = ()) -> "Context":
        """Context with no graph knowledge at all."""
        return cls(resource_node=resource, open_findings_on_resource=tuple(open_findings))

    @cached_property
    def _neighbourhood(self) -> Tuple[FrozenSet[str], FrozenSet[Tuple[str, str, str]]]:
        nodes: Set[str] = {self.resource_node}
        edges: Set[Tuple[str, str, str]] = set()
        if self.graph is not None:
            _ball(self.graph, self.resource_node, self.radius, nodes, edges)
            if self.subject_node is not None:
                _ball(self.graph, self.subject_node, self.radius, nodes, edges)
        return frozenset(nodes), frozenset(edges)

    @property
    def nodes(self) -> FrozenSet[str]:
        return self._neighbourhood[0]

    @property
    def edges(self) -> FrozenSet[Tuple[str, str, str]]:
        return self._neighbourhood[1]


def _ball(g: IdentityGraph, anchor: str, radius: int, nodes: Set[str], edges: Set[Tuple[str, str, str]]) -> None:
    frontier = [anchor]
    dist = {anchor: 0}
    nodes.add(anchor)
    while frontier:
        nxt = []
        for node in frontier:
            d = dist[node]
            if d >= radius:
                continue
            for kind, targets in g._out.get(node, {}).items():
                for t in targets:
                    edges.add((node, t, kind.value))
                    if t not in dist:
                        dist[t] = d + 1
                        nodes.add(t)
                        nxt.append(t)
            for kind, sources in g._in.get(node, {}).items():
                for s in sources:
                    edges.add((s, node, kind.value))
                    if s not in dist:
                        dist[s] = d + 1
                        nodes.add(s)
                        nxt.append(s)
        frontier = nxt


def neighbors(
    g: IdentityGraph,
    subject: Optional[str],
    resource: str,
    *,
    now_ms: Optional[int] = None,
    open_findings: Optional[Mapping[str, Mapping[str, Severity]]] = None,
    freshness_s: float = 3600,
    radius: int = 2,
) -> Context:
    """Everything within ``radius`` hops of either anchor, plus derived flags.

    A subject counts as an approved operator for this resource when it carries
    ``approved_operator`` and has touched the resource within ``freshness_s``
    before ``now_ms``. With ``now_ms=None`` any recorded activity counts.
    """
    if g._kinds.get(resource) is not NodeKind.RESOURCE:
        raise GraphError("unknown-resource", resource)
    subject_node = subject if subject and g._kinds.get(subject) is NodeKind.SUBJECT else None
    approved = False
    if subject_node is not None and g._attrs.get(subject_node, {}).get("approved_operator"):
        act = g._edges.get((subject_node, resource, EdgeKind.RECENT_ACTIVITY))
        if act is not None:
            if now_ms is None:
                approved = True
            else:
                age = now_ms - act.get("at_ms", -1)
                approved = 0 <= age <= freshness_s * 1000
    found: Tuple[Tuple[str, Severity], ...] = ()
    if open_findings:
        found = tuple(sorted(open_findings.get(resource, {}).items()))
    return Context(
        resource_node=resource,
        subject_node=subject_node,
        approved_operator=approved,
        open_findings_on_resource=found,
        graph=g,
        radius=radius,
    )


def approved_op(ctx: Context) -> bool:
    return ctx.subject_node is not None and ctx.approved_operator
