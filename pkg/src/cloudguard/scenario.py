"""Synthetic environment, labeled fault injection and the benign stream.

An :class:`Inventory` holds the live resource documents, the two platform
identity snapshots, operator activity and the raw event stream for the
assessment window. :func:`inject` plants labeled violations on a copy.
"""

from __future__ import annotations

import copy
import enum
import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Tuple

from .errors import ScenarioError
from .findings import check_policy, load_profile
from .model import canonical_json, to_doc

ASSESSMENT_MS = 120_000
DAY_MS = 86_400_000
KUBE_PROXY_SA = "system:serviceaccount:kube-system:kube-proxy"
OPERATORS = ("ops-1", "ops-2", "ops-3", "ops-4")
TOOLBOX = "toolbox"

SCALES = {"desk": 50, "50": 50, "100": 100, "200": 200}


@dataclass(frozen=True)
class InventorySpec:
    node_count: int = 50
    projects: int = 32
    pods_per_node: int = 25
    iac_repos: int = 18
    user_role_assignments: int = 96
    seed: int = 0
    namespaces: int = 16
    domains: int = 4
    eps_budget: int = 3500
    eps_divisor: int = 100

    def __post_init__(self):
        for name in ("node_count", "projects", "pods_per_node", "iac_repos", "user_role_assignments",
                     "namespaces", "domains", "eps_budget", "eps_divisor"):
            if getattr(self, name) < 1:
                raise ScenarioError("bad-spec", f"{name} must be >= 1")

    @property
    def eps(self) -> float:
        return self.eps_budget / self.eps_divisor

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "InventorySpec":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ScenarioError("bad-spec", f"unknown fields: {sorted(unknown)}")
        return cls(**dict(doc))


@dataclass
class Inventory:
    spec: InventorySpec
    docs: Dict[str, Dict[str, Any]]
    snapshots: Dict[str, List[Dict[str, Any]]]
    activity: List[Tuple[str, str, int]]
    events: List[Dict[str, Any]]

    def declared_ids(self) -> List[str]:
        """Terraform-managed documents: everything on the OpenStack and IaC side."""
        return sorted(r for r, d in self.docs.items() if d["family"] in ("openstack", "iac"))

    def to_doc(self) -> Dict[str, Any]:
        return {
            "spec": to_doc(self.spec),
            "docs": self.docs,
            "snapshots": self.snapshots,
            "activity": [list(a) for a in self.activity],
            "events": self.events,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Inventory":
        return cls(
            spec=InventorySpec.from_doc(doc["spec"]),
            docs={k: dict(v) for k, v in doc["docs"].items()},
            snapshots={k: list(v) for k, v in doc["snapshots"].items()},
            activity=[(a[0], a[1], int(a[2])) for a in doc["activity"]],
            events=list(doc["events"]),
        )

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_doc()).encode("utf-8")).hexdigest()

    def copy(self) -> "Inventory":
        return Inventory(self.spec, copy.deepcopy(self.docs), copy.deepcopy(self.snapshots),
                         list(self.activity), copy.deepcopy(self.events))


def _pod(rid: str, ns: str, name: str, node: str, app: str, modified_by: str, host_network: bool = False) -> Dict[str, Any]:
    return {
        "resource_id": rid,
        "family": "k8s",
        "kind": "pod",
        "namespace": ns,
        "node": node,
        "labels": {"app": app},
        "metadata": {"name": name, "modified_by": modified_by},
        "spec": {
            "hostNetwork": host_network,
            "securityContext": {"privileged": False, "runAsNonRoot": True},
            "serviceAccountName": "app",
        },
    }


def _sa(ns: str, name: str) -> str:
    return f"system:serviceaccount:{ns}:{name}"


def generate_inventory(spec: InventorySpec) -> Inventory:
    """Deterministic in ``spec`` (including its seed)."""
    rng = random.Random(spec.seed)
    docs: Dict[str, Dict[str, Any]] = {}
    namespaces = [f"ns-{i:02d}" for i in range(spec.namespaces)]
    users = [f"dev-{i:02d}" for i in range((spec.user_role_assignments + 1) // 2)]

    # -- kubernetes -------------------------------------------------------
    total = spec.node_count * spec.pods_per_node
    proxies = min(total, max(3, spec.node_count // 10))
    toolboxes = min(len(namespaces), total - proxies)
    for i in range(proxies):
        rid = f"pod/kube-system/kube-proxy-{i:03d}"
        docs[rid] = _pod(rid, "kube-system", f"kube-proxy-{i:03d}", f"node-{i % spec.node_count:03d}",
                         "kube-proxy", KUBE_PROXY_SA, host_network=True)
    for i in range(toolboxes):
        ns = namespaces[i]
        rid = f"pod/{ns}/toolbox-0"
        docs[rid] = _pod(rid, ns, "toolbox-0", f"node-{i % spec.node_count:03d}", TOOLBOX, _sa(ns, "deployer"))
    for i in range(total - proxies - toolboxes):
        ns = namespaces[i % len(namespaces)]
        name = f"app-{i:05d}"
        rid = f"pod/{ns}/{name}"
        app = ("web", "api", "worker", "cache")[i % 4]
        docs[rid] = _pod(rid, ns, name, f"node-{i % spec.node_count:03d}", app, _sa(ns, "deployer"))
    for ns in namespaces:
        for k in range(4):
            rid = f"svc/{ns}/svc-{k}"
            svc_spec: Dict[str, Any] = {"type": "ClusterIP"}
            if k == 3:
                svc_spec = {"type": "LoadBalancer", "loadBalancerSourceRanges": ["10.0.0.0/8"]}
            docs[rid] = {"resource_id": rid, "family": "k8s", "kind": "service", "namespace": ns,
                         "metadata": {"name": f"svc-{k}", "modified_by": _sa(ns, "deployer")}, "spec": svc_spec}
        for k in range(2):
            rid = f"ingress/{ns}/ing-{k}"
            docs[rid] = {"resource_id": rid, "family": "k8s", "kind": "ingress", "namespace": ns,
                         "metadata": {"name": f"ing-{k}", "modified_by": _sa(ns, "deployer")},
                         "spec": {"tls": [{"hosts": [f"ing-{k}.{ns}.example.internal"]}]}}
    for name, role, subject in (("ops-admin", "admin", "ops"), ("view-all", "view", "system:authenticated")):
        rid = f"crb/{name}"
        docs[rid] = {"resource_id": rid, "family": "k8s", "kind": "clusterrolebinding", "roleRef": role,
                     "subjects": [subject], "metadata": {"name": name, "modified_by": "ops-1"}}

    k8s: List[Dict[str, Any]] = []
    for op in OPERATORS:
        k8s.append({"kind": "User", "subject": op, "approved_operator": True})
        k8s.append({"kind": "ClusterRoleBinding", "subject": op, "role": "admin"})
    k8s.append({"kind": "ServiceAccount", "subject": KUBE_PROXY_SA, "namespace": "kube-system", "approved_operator": True})
    k8s.append({"kind": "ClusterRoleBinding", "subject": KUBE_PROXY_SA, "role": "view"})
    for ns in namespaces:
        for sa in ("app", "deployer"):
            k8s.append({"kind": "ServiceAccount", "subject": _sa(ns, sa), "namespace": ns})
        k8s.append({"kind": "RoleBinding", "subject": _sa(ns, "deployer"), "role": "edit", "namespace": ns})
    for i, user in enumerate(users):
        k8s.append({"kind": "User", "subject": user})
        k8s.append({"kind": "RoleBinding", "subject": user, "role": "edit", "namespace": namespaces[i % len(namespaces)]})

    # -- openstack ----------------------------------------------------------
    domains = [f"dom-{i}" for i in range(spec.domains)]
    projects = [f"proj-{i:02d}" for i in range(spec.projects)]
    envs = {p: ("prod" if i % 3 == 0 else "nonprod") for i, p in enumerate(projects)}
    openstack: List[Dict[str, Any]] = [{"kind": "domain", "name": d} for d in domains]
    for i, p in enumerate(projects):
        dom = domains[i % len(domains)]
        env = envs[p]
        openstack.append({"kind": "project", "name": p, "domain": dom})
        base = {"family": "openstack", "project": p, "domain": dom, "env": env}
        docs[f"project/{p}"] = {"resource_id": f"project/{p}", "kind": "project", "description": f"{env} workloads", **base}
        for k in range(2):
            for rid, kind, extra in (
                (f"server/{p}/vm-{k}", "server", {"security_group": "restricted"}),
                (f"fip/{p}/fip-{k}", "floating_ip", {"public": env == "prod" and k == 0}),
                (f"volume/{p}/vol-{k}", "volume", {"encrypted": True}),
            ):
                docs[rid] = {"resource_id": rid, "kind": kind, **base, **extra,
                             "metadata": {"modified_by": "terraform"}}
        owner = users[i % len(users)]
        cred = f"{p}-cred"
        docs[f"appcred/{cred}"] = {"resource_id": f"appcred/{cred}", "kind": "application_credential",
                                   "owner": owner, "unrestricted": False, **base,
                                   "metadata": {"modified_by": owner}}
        openstack.append({"kind": "application_credential", "subject": owner, "credential": cred,
                          "project": p, "domain": dom, "roles": ["member"]})
    for op in OPERATORS:
        openstack.append({"kind": "user", "subject": op, "approved_operator": True})
        openstack.append({"kind": "role_assignment", "subject": op, "role": "admin", "domain": domains[0]})
    remaining = spec.user_role_assignments
    for i, user in enumerate(users):
        openstack.append({"kind": "user", "subject": user, "domain": domains[i % len(domains)]})
        for j, role in enumerate(("member", "reader")):
            if remaining == 0:
                break
            p = projects[(i + 7 * j) % len(projects)]
            openstack.append({"kind": "role_assignment", "subject": user, "role": role, "project": p})
            remaining -= 1

    # -- iac ----------------------------------------------------------------
    for r in range(spec.iac_repos):
        repo = f"repo-{r:02d}"
        p = projects[r % len(projects)]
        for k in range(4):
            rid = f"tf/{repo}/openstack_networking_secgroup_rule_v2.r{k}"
            docs[rid] = {"resource_id": rid, "family": "iac", "kind": "secgroup_rule", "project": p,
                         "repo": repo, "remote_ip_prefix": f"10.{r}.{k}.0/24", "port": 443 + k,
                         "metadata": {"modified_by": "terraform"}}

    docs = {k: docs[k] for k in sorted(docs)}
    toolbox_pods = sorted(r for r, d in docs.items() if d["kind"] == "pod" and d["labels"]["app"] == TOOLBOX)
    proxy_pods = sorted(r for r, d in docs.items() if d["kind"] == "pod" and d["namespace"] == "kube-system")
    activity = [(op, pod, 0) for op in OPERATORS for pod in toolbox_pods]
    activity += [(KUBE_PROXY_SA, pod, 0) for pod in proxy_pods]
    events = _benign_stream(spec, rng, docs, toolbox_pods, proxy_pods, users, projects)
    return Inventory(spec, docs, {"k8s": k8s, "openstack": openstack}, activity, events)


_BENIGN_RULES = ("ReadSensitiveFile", "ContactK8sAPIServer", "WriteBelowEtc")
_BENIGN_MIX = (
    ("info", 0.701),
    ("notice", 0.15),
    ("override", 0.08),
    ("auth_failure", 0.05),
    ("approved_shell", 0.018),
    ("stray_shell", 0.001),
)


def _benign_stream(spec, rng, docs, toolbox_pods, proxy_pods, users, projects) -> List[Dict[str, Any]]:
    """Background traffic for the assessment window, paced at the EPS budget."""
    n = int(round(spec.eps * ASSESSMENT_MS / 1000))
    pods = [r for r, d in docs.items() if d["kind"] == "pod" and d["namespace"] != "kube-system"]
    kinds = [k for k, _ in _BENIGN_MIX]
    weights = [w for _, w in _BENIGN_MIX]
    stamps = sorted(rng.randrange(0, ASSESSMENT_MS) for _ in range(n))
    events = []
    for i, ts in enumerate(stamps):
        kind = rng.choices(kinds, weights)[0]
        eid = f"bg:{i:06d}"
        if kind in ("info", "notice"):
            pod = rng.choice(pods)
            events.append({"adapter": "falco", "event_id": eid, "timestamp": ts, "pod": pod,
                           "rule": rng.choice(_BENIGN_RULES), "priority": "informational" if kind == "info" else "notice",
                           "user": _sa(docs[pod]["namespace"], "app"), "confidence": 0.5})
        elif kind == "override":
            pod = rng.choice(pods)
            events.append({"adapter": "falco", "event_id": eid, "timestamp": ts, "pod": pod, "rule": "ManualOverride",
                           "priority": "informational", "user": rng.choice(OPERATORS), "override": f"ovr-{i:06d}"})
        elif kind == "auth_failure":
            events.append({"adapter": "keystone", "event_id": eid, "timestamp": ts, "event": "auth_failure",
                           "project": rng.choice(projects), "user": rng.choice(users), "confidence": 0.5})
        elif toolbox_pods:
            user = rng.choice(OPERATORS) if kind == "approved_shell" else rng.choice(users)
            events.append({"adapter": "falco", "event_id": eid, "timestamp": ts, "pod": rng.choice(toolbox_pods),
                           "rule": "TerminalShell", "priority": "warning", "user": user, "process": "bash"})
    # the live scanner sees kube-proxy's host networking; it is expected
    policy = load_profile("baseline").policy("K8S.POD.HOST-NETWORK")
    for i, pod in enumerate(proxy_pods):
        finding = check_policy(policy, docs[pod])
        events.append({"adapter": "cbe", "event_id": f"bg:kp:{i:04d}", "timestamp": rng.randrange(0, ASSESSMENT_MS),
                       "finding": to_doc(finding)})
    events.sort(key=lambda e: (e["timestamp"], e["event_id"]))
    return events


# ---------------------------------------------------------------------------
# injection
# ---------------------------------------------------------------------------


class InjectionClass(enum.Enum):
    PRIVILEGED_POD = "privileged_pod"
    HOST_NETWORK_POD = "host_network_pod"
    HOSTPATH_MOUNT = "hostpath_mount"
    SA_TOKEN_OVERUSE = "sa_token_overuse"
    CLUSTER_ADMIN_BINDING = "cluster_admin_binding"
    PUBLIC_LOAD_BALANCER = "public_load_balancer"
    OPEN_INGRESS_NO_TLS = "open_ingress_no_tls"
    DEFAULT_OS_SECGROUP = "default_os_secgroup"
    PUBLIC_FLOATING_IP_NONPROD = "public_floating_ip_nonprod"
    KEYSTONE_ROLE_ESCALATION = "keystone_role_escalation"
    WEAK_APP_CREDENTIAL = "weak_app_credential"
    IAC_OPEN_CIDR = "iac_open_cidr"
    UNENCRYPTED_VOLUME = "unencrypted_volume"
    SUSPICIOUS_SHELL_OR_MINER = "suspicious_shell_or_miner"


@dataclass(frozen=True)
class ClassInfo:
    control_id: str
    channel: str  # k8s_config | iac | openstack | runtime
    pool: str
    recurs: bool = False


CLASS_INFO: Dict[InjectionClass, ClassInfo] = {
    InjectionClass.PRIVILEGED_POD: ClassInfo("K8S.PRIV.POD.PRIVILEGED", "k8s_config", "pod"),
    InjectionClass.HOST_NETWORK_POD: ClassInfo("K8S.POD.HOST-NETWORK", "k8s_config", "pod"),
    InjectionClass.HOSTPATH_MOUNT: ClassInfo("K8S.POD.HOSTPATH", "k8s_config", "pod"),
    InjectionClass.SA_TOKEN_OVERUSE: ClassInfo("K8S.SA.TOKEN-OVERUSE", "runtime", "pod", recurs=True),
    InjectionClass.CLUSTER_ADMIN_BINDING: ClassInfo("K8S.RBAC.CLUSTER-ADMIN", "k8s_config", "user"),
    InjectionClass.PUBLIC_LOAD_BALANCER: ClassInfo("K8S.SVC.PUBLIC-LB", "k8s_config", "service"),
    InjectionClass.OPEN_INGRESS_NO_TLS: ClassInfo("K8S.INGRESS.NO-TLS", "k8s_config", "ingress"),
    InjectionClass.DEFAULT_OS_SECGROUP: ClassInfo("OS.NET.DEFAULT-SG", "openstack", "server"),
    InjectionClass.PUBLIC_FLOATING_IP_NONPROD: ClassInfo("OS.NET.PUBLIC-NONSTD", "openstack", "nonprod_fip"),
    InjectionClass.KEYSTONE_ROLE_ESCALATION: ClassInfo("OS.IAM.ROLE-ESCALATION", "openstack", "project"),
    InjectionClass.WEAK_APP_CREDENTIAL: ClassInfo("OS.IAM.WEAK-APPCRED", "openstack", "appcred"),
    InjectionClass.IAC_OPEN_CIDR: ClassInfo("IAC.NET.OPEN-CIDR", "iac", "tf_rule"),
    InjectionClass.UNENCRYPTED_VOLUME: ClassInfo("OS.VOL.UNENCRYPTED", "openstack", "volume"),
    InjectionClass.SUSPICIOUS_SHELL_OR_MINER: ClassInfo("RT.SHELL.CONTAINER", "runtime", "pod", recurs=True),
}
ALL_CLASSES: Tuple[InjectionClass, ...] = tuple(InjectionClass)
CONFIG_ONLY_CLASSES = frozenset(c for c, i in CLASS_INFO.items() if i.channel in ("k8s_config", "iac")) | frozenset(
    {InjectionClass.DEFAULT_OS_SECGROUP, InjectionClass.PUBLIC_FLOATING_IP_NONPROD, InjectionClass.UNENCRYPTED_VOLUME}
)
OPENSTACK_ONLY_CLASSES = frozenset(c for c, i in CLASS_INFO.items() if i.channel == "openstack")
RUNTIME_RULE_FOR = {
    InjectionClass.SA_TOKEN_OVERUSE: "ServiceAccountTokenOveruse",
    InjectionClass.SUSPICIOUS_SHELL_OR_MINER: "TerminalShell",
}
_ADMISSION_FOR = {
    InjectionClass.PRIVILEGED_POD: "privileged-pods",
    InjectionClass.HOST_NETWORK_POD: "host-network",
    InjectionClass.HOSTPATH_MOUNT: "host-path-volumes",
    InjectionClass.CLUSTER_ADMIN_BINDING: "no-cluster-admin",
    InjectionClass.PUBLIC_LOAD_BALANCER: "restricted-loadbalancer",
    InjectionClass.OPEN_INGRESS_NO_TLS: "ingress-tls",
}
_OPENSTACK_CHECK_FOR = {
    InjectionClass.DEFAULT_OS_SECGROUP: ("openstack_check", "default-secgroup"),
    InjectionClass.PUBLIC_FLOATING_IP_NONPROD: ("openstack_check", "public-fip-nonprod"),
    InjectionClass.UNENCRYPTED_VOLUME: ("openstack_check", "unencrypted-volume"),
    InjectionClass.WEAK_APP_CREDENTIAL: ("identity_check", "weak-app-credential"),
}
CONFIG_ECHO_MS = 30_000  # the live scanner re-reports a config change this much later
RUNTIME_BURST = 3


@dataclass(frozen=True)
class GroundTruthLabel:
    event_id: str
    cls: InjectionClass
    resource_id: str
    injected_at: int

    @property
    def control_id(self) -> str:
        return CLASS_INFO[self.cls].control_id

    def to_doc(self) -> Dict[str, Any]:
        return {"event_id": self.event_id, "class": self.cls.value, "resource_id": self.resource_id,
                "control_id": self.control_id, "injected_at": self.injected_at}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "GroundTruthLabel":
        return cls(doc["event_id"], InjectionClass(doc["class"]), doc["resource_id"], int(doc["injected_at"]))


def write_labels(path: str | Path, labels: Sequence[GroundTruthLabel]) -> None:
    """Write-once: refuses to overwrite an existing label file."""
    try:
        with open(path, "x", encoding="utf-8") as fh:
            for lab in labels:
                fh.write(canonical_json(lab.to_doc()) + "\n")
    except FileExistsError:
        raise ScenarioError("labels-exist", f"{path} already exists; label files are write-once") from None


def read_labels(path: str | Path) -> List[GroundTruthLabel]:
    with open(path, encoding="utf-8") as fh:
        return [GroundTruthLabel.from_doc(json.loads(line)) for line in fh if line.strip()]


def _pools(inv: Inventory) -> Dict[str, List[str]]:
    docs = inv.docs
    by_kind: Dict[str, List[str]] = {}
    for rid, d in docs.items():
        by_kind.setdefault(d["kind"], []).append(rid)
    pods = [r for r in by_kind.get("pod", []) if docs[r]["namespace"] != "kube-system" and docs[r]["labels"]["app"] != TOOLBOX]
    users = sorted({rec["subject"] for rec in inv.snapshots.get("k8s", []) if rec["kind"] == "User" and rec["subject"] not in OPERATORS})
    return {
        "pod": pods,
        "user": users,
        "service": [r for r in by_kind.get("service", []) if docs[r]["spec"].get("type") != "LoadBalancer"],
        "ingress": by_kind.get("ingress", []),
        "server": by_kind.get("server", []),
        "nonprod_fip": [r for r in by_kind.get("floating_ip", []) if docs[r]["env"] != "prod"],
        "project": by_kind.get("project", []),
        "appcred": by_kind.get("application_credential", []),
        "tf_rule": by_kind.get("secgroup_rule", []),
        "volume": by_kind.get("volume", []),
    }


def _set(doc: Dict[str, Any], path: str, value: Any) -> None:
    node = doc
    parts = path.split(".")
    for key in parts[:-1]:
        node = node.setdefault(key, {})
    if value is None:
        node.pop(parts[-1], None)
    else:
        node[parts[-1]] = value


_MUTATIONS: Dict[InjectionClass, Tuple[Tuple[str, Any], ...]] = {
    InjectionClass.PRIVILEGED_POD: (("spec.securityContext.privileged", True),),
    InjectionClass.HOST_NETWORK_POD: (("spec.hostNetwork", True),),
    InjectionClass.HOSTPATH_MOUNT: (("spec.hostPath", {"path": "/var/run/docker.sock"}),),
    InjectionClass.PUBLIC_LOAD_BALANCER: (("spec.type", "LoadBalancer"), ("spec.loadBalancerSourceRanges", None)),
    InjectionClass.OPEN_INGRESS_NO_TLS: (("spec.tls", None),),
    InjectionClass.DEFAULT_OS_SECGROUP: (("security_group", "default"),),
    InjectionClass.PUBLIC_FLOATING_IP_NONPROD: (("public", True),),
    InjectionClass.WEAK_APP_CREDENTIAL: (("unrestricted", True),),
    InjectionClass.IAC_OPEN_CIDR: (("remote_ip_prefix", "0.0.0.0/0"),),
    InjectionClass.UNENCRYPTED_VOLUME: (("encrypted", False),),
}


def inject(
    inv: Inventory,
    classes: Sequence[InjectionClass | str],
    count_per_class: int,
    seed: int,
    *,
    approved_injectors: bool = False,
) -> Tuple[Inventory, List[GroundTruthLabel]]:
    """Plant ``count_per_class`` labeled violations per class on a copy of ``inv``.

    Targets are drawn without replacement from the class's pool, and pod
    targets are distinct across all pod classes. Each injection emits its
    label event first; config classes get a later live-scan echo and
    runtime classes a short burst, all of which the dedup stage folds back
    onto the label event. With ``approved_injectors`` every change is made
    by an approved operator with fresh activity on the target.
    """
    if count_per_class < 0:
        raise ScenarioError("bad-count", "count_per_class must be >= 0")
    classes = [InjectionClass(c) for c in classes]
    out = inv.copy()
    if count_per_class == 0 or not classes:
        return out, []
    rng = random.Random(f"inject:{seed}")
    pools = _pools(inv)
    pod_needed = count_per_class * sum(1 for c in classes if CLASS_INFO[c].pool == "pod")
    if len(pools["pod"]) < pod_needed:
        raise ScenarioError("class-target-exhausted", f"need {pod_needed} pods, inventory has {len(pools['pod'])}")
    pod_draw = rng.sample(pools["pod"], pod_needed)
    profile = load_profile("baseline")
    labels: List[GroundTruthLabel] = []
    extra_k8s: List[Dict[str, Any]] = []
    extra_os: List[Dict[str, Any]] = []
    users = pools["user"] or ["intruder"]

    for cls in classes:
        info = CLASS_INFO[cls]
        if info.pool == "pod":
            targets, pod_draw = pod_draw[:count_per_class], pod_draw[count_per_class:]
        else:
            pool = pools[info.pool]
            if len(pool) < count_per_class:
                raise ScenarioError("class-target-exhausted",
                                    f"{cls.value} needs {count_per_class} targets, pool {info.pool} has {len(pool)}")
            targets = rng.sample(pool, count_per_class)
        for i, target in enumerate(targets):
            eid = f"inj:{cls.value}:{i:02d}"
            at = rng.randrange(1_000, 100_000)
            # draw both so the two fixture variants share targets and timestamps
            operator, user = rng.choice(OPERATORS), rng.choice(users)
            who = operator if approved_injectors else user
            rid = target
            if cls is InjectionClass.CLUSTER_ADMIN_BINDING:
                rid = f"crb/escalate-{target}"
                out.docs[rid] = {"resource_id": rid, "family": "k8s", "kind": "clusterrolebinding",
                                 "roleRef": "cluster-admin", "subjects": [target],
                                 "metadata": {"name": f"escalate-{target}", "modified_by": who}}
                extra_k8s.append({"kind": "ClusterRoleBinding", "subject": target, "role": "cluster-admin"})
            elif cls is InjectionClass.KEYSTONE_ROLE_ESCALATION:
                extra_os.append({"kind": "role_assignment", "subject": who, "role": "admin",
                                 "project": out.docs[rid]["project"]})
            elif cls in _MUTATIONS:
                doc = out.docs[rid]
                for path, value in _MUTATIONS[cls]:
                    _set(doc, path, value)
                doc.setdefault("metadata", {})["modified_by"] = who
            if approved_injectors:
                out.activity.append((who, rid, at - 1_000))
            out.events.extend(_injection_events(cls, eid, at, rid, who, out.docs, profile))
            labels.append(GroundTruthLabel(eid, cls, rid, at))

    out.docs = {k: out.docs[k] for k in sorted(out.docs)}
    out.snapshots["k8s"] = out.snapshots["k8s"] + extra_k8s
    out.snapshots["openstack"] = out.snapshots["openstack"] + extra_os
    out.events.sort(key=lambda e: (e["timestamp"], e["event_id"]))
    return out, labels


def _injection_events(cls, eid, at, rid, who, docs, profile) -> List[Dict[str, Any]]:
    info = CLASS_INFO[cls]
    if info.channel == "runtime":
        ns = docs[rid]["namespace"]
        user = _sa(ns, "app") if cls is InjectionClass.SA_TOKEN_OVERUSE else who
        return [
            {"adapter": "falco", "event_id": eid if k == 0 else f"{eid}:b{k}", "timestamp": at + 1_000 * k,
             "pod": rid, "rule": RUNTIME_RULE_FOR[cls], "priority": "warning", "user": user}
            for k in range(RUNTIME_BURST)
        ]
    if cls is InjectionClass.KEYSTONE_ROLE_ESCALATION:
        return [{"adapter": "keystone", "event_id": eid, "timestamp": at, "event": "role_escalation",
                 "project": docs[rid]["project"], "actor": who, "role": "admin"}]
    if cls in _ADMISSION_FOR:
        first = {"adapter": "admission", "event_id": eid, "timestamp": at,
                 "row": {"constraint": _ADMISSION_FOR[cls], "object": rid, "user": who}}
    elif cls is InjectionClass.IAC_OPEN_CIDR:
        first = {"adapter": "iac", "event_id": eid, "timestamp": at,
                 "row": {"check_id": "CKV_OPENSTACK_2", "resource": rid, "user": who,
                         "file_path": f"{docs[rid]['repo']}/main.tf"}}
    else:
        adapter, check = _OPENSTACK_CHECK_FOR[cls]
        first = {"adapter": adapter, "event_id": eid, "timestamp": at,
                 "row": {"check": check, "resource": rid, "project": docs[rid]["project"], "user": who}}
    finding = check_policy(profile.policy(info.control_id), docs[rid])
    echo = {"adapter": "cbe", "event_id": f"{eid}:scan", "timestamp": at + CONFIG_ECHO_MS, "finding": to_doc(finding)}
    return [first, echo]


def channel_of(raw: Mapping[str, Any]) -> str:
    """Which source family a raw event belongs to."""
    adapter = raw.get("adapter")
    if adapter == "falco":
        return "runtime"
    if adapter in ("keystone", "neutron", "openstack_check", "identity_check"):
        return "openstack"
    if adapter == "admission":
        return "k8s_config"
    if adapter == "iac":
        return "iac"
    if adapter == "cbe":
        return channel_of_control(raw["finding"]["control_id"])
    return "unknown"


def channel_of_control(control_id: str) -> str:
    prefix = control_id.split(".", 1)[0]
    return {"K8S": "k8s_config", "OS": "openstack", "IAC": "iac", "RT": "runtime"}.get(prefix, "unknown")


def spec_for_scale(scale: str | int, seed: int = 0) -> InventorySpec:
    key = str(scale)
    if key not in SCALES:
        raise ScenarioError("bad-scale", f"scale must be one of {sorted(SCALES)}")
    return InventorySpec(node_count=SCALES[key], seed=seed)


__all__ = [
    "ALL_CLASSES",
    "ASSESSMENT_MS",
    "CLASS_INFO",
    "CONFIG_ONLY_CLASSES",
    "DAY_MS",
    "GroundTruthLabel",
    "InjectionClass",
    "Inventory",
    "InventorySpec",
    "OPENSTACK_ONLY_CLASSES",
    "channel_of",
    "generate_inventory",
    "inject",
    "read_labels",
    "write_labels",
]
