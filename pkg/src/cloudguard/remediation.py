"""Guarded remediation against simulated live and declared state.

Playbooks are YAML ``when``/``do`` documents::

    id: k8s-privileged-pod
    when:
      source: cbe
      severity: high
      control_id: K8S.PRIV.POD.PRIVILEGED
    do:
      - type: k8s.patch
        target: {{ resource_id }}
        payload: { "spec": { "securityContext": { "privileged": false } } }
      - type: elastic.log
        message: "Privileged pod patched automatically"

``k8s.patch`` is a JSON merge patch on the live document. ``terraform.apply``
runs a registered module against the declared-state store and, once
approved, writes the result to both declared and live state. Anything
destructive or terraform-backed needs a dry run first and an approval flag.
"""

from __future__ import annotations

import copy
import enum
import hashlib
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import yaml

from .errors import PlaybookError, RemediationError
from .findings import ControlProfile, check_policy
from .model import CONFIG_SOURCES, NormalizedEvent, PostCheck, Severity, Source, canonical_json

STEP_TYPES = ("k8s.patch", "terraform.apply", "elastic.log")
TEMPLATE_VARS = ("resource_id", "project_id")
_TEMPLATE_RE = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z_ ]*?)\s*\}\}")
_PLACEHOLDER_RE = re.compile(r"__tpl_([a-z_]+)__")
_WHEN_KEYS = ("source", "severity", "control_id")

# field -> the value that hardens it; patches setting only these are safe to auto-apply
HARDENING_FIELDS = {
    "privileged": False,
    "allowPrivilegeEscalation": False,
    "hostNetwork": False,
    "hostPID": False,
    "hostIPC": False,
    "readOnlyRootFilesystem": True,
    "runAsNonRoot": True,
    "automountServiceAccountToken": False,
}

SOURCE_ALIASES = {
    "cbe": CONFIG_SOURCES | {Source.IDENTITY},
    "rtm": frozenset({Source.RUNTIME}),
    "ias": frozenset({Source.IDENTITY}),
}


class Mode(enum.Enum):
    DRY_RUN = "dry_run"
    APPLY = "apply"


class Approval(enum.Enum):
    PENDING = "pending"
    APPROVED = "approved"
    REJECTED = "rejected"


# ---------------------------------------------------------------------------
# playbooks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionStep:
    type: str
    target: Optional[str] = None
    payload: Optional[Mapping[str, Any]] = None
    module: Optional[str] = None
    vars: Mapping[str, Any] = field(default_factory=dict)
    message: Optional[str] = None


@dataclass(frozen=True)
class Playbook:
    id: str
    when: Mapping[str, Any]
    do: Tuple[ActionStep, ...]

    @property
    def has_terraform(self) -> bool:
        return any(s.type == "terraform.apply" for s in self.do)

    @property
    def destructive(self) -> bool:
        return any(step_is_destructive(s) for s in self.do)


def _leaves(payload: Mapping[str, Any]) -> Iterable[Tuple[str, Any]]:
    for key, value in payload.items():
        if isinstance(value, Mapping) and value:
            yield from _leaves(value)
        else:
            yield key, value


def step_is_destructive(step: ActionStep) -> bool:
    """Deletes, grant removal and reachability narrowing are destructive.

    A merge patch is safe only when every leaf sets a known hardening field to
    its hardened value. Terraform steps are judged by their module.
    """
    if step.type == "k8s.patch":
        for key, value in _leaves(step.payload or {}):
            if key not in HARDENING_FIELDS or value is not HARDENING_FIELDS[key]:
                return True
        return False
    if step.type == "terraform.apply":
        module = MODULES.get(step.module or "")
        return module is None or module.narrows
    return False


def _canon_template(match: re.Match) -> str:
    name = match.group(1).strip().replace(" ", "_")
    return f"__tpl_{name}__"


def _restore_templates(node: Any) -> Any:
    if isinstance(node, str):
        for name in _PLACEHOLDER_RE.findall(node):
            if name not in TEMPLATE_VARS:
                raise PlaybookError("unknown-template-variable", name)
        return _PLACEHOLDER_RE.sub(lambda m: "{{ " + m.group(1) + " }}", node)
    if isinstance(node, Mapping):
        return {k: _restore_templates(v) for k, v in node.items()}
    if isinstance(node, list):
        return [_restore_templates(v) for v in node]
    return node


def _parse_step(raw: Any, index: int) -> ActionStep:
    if not isinstance(raw, Mapping) or "type" not in raw:
        raise PlaybookError("parse-error", f"step {index} needs a type")
    kind = raw["type"]
    if kind not in STEP_TYPES:
        raise PlaybookError("unknown-step-type", repr(kind))
    if kind == "k8s.patch":
        if not isinstance(raw.get("payload"), Mapping) or not raw.get("target"):
            raise PlaybookError("parse-error", f"step {index}: k8s.patch needs target and a mapping payload")
        return ActionStep(kind, target=str(raw["target"]), payload=raw["payload"])
    if kind == "terraform.apply":
        if not raw.get("module"):
            raise PlaybookError("parse-error", f"step {index}: terraform.apply needs module")
        variables = raw.get("vars") or {}
        if not isinstance(variables, Mapping):
            raise PlaybookError("parse-error", f"step {index}: vars must be a mapping")
        return ActionStep(kind, module=str(raw["module"]), vars=dict(variables))
    if not raw.get("message"):
        raise PlaybookError("parse-error", f"step {index}: elastic.log needs message")
    return ActionStep(kind, message=str(raw["message"]))


def parse_playbook(text: str) -> Playbook:
    """Parse a playbook document.

    ``control id`` and ``control_id`` are both accepted, as are
    ``{{ project id }}`` and ``{{ project_id }}``; both canonicalize to the
    underscore form. Templates may appear unquoted.
    """
    prepared = _TEMPLATE_RE.sub(_canon_template, text)
    try:
        doc = yaml.safe_load(prepared)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            raise PlaybookError("parse-error", str(getattr(exc, "problem", exc)), mark.line + 1, mark.column + 1) from None
        raise PlaybookError("parse-error", str(exc)) from None
    if not isinstance(doc, Mapping):
        raise PlaybookError("parse-error", "playbook must be a mapping")
    doc = _restore_templates(doc)
    when = doc.get("when")
    steps = doc.get("do")
    if not isinstance(when, Mapping) or not when:
        raise PlaybookError("parse-error", "missing or empty when:")
    if not isinstance(steps, list) or not steps:
        raise PlaybookError("parse-error", "missing or empty do:")
    cond: Dict[str, Any] = {}
    for key, value in when.items():
        key = str(key).replace(" ", "_")
        if key not in _WHEN_KEYS:
            raise PlaybookError("parse-error", f"unknown when-condition {key!r}")
        cond[key] = str(value)
    if "severity" in cond:
        try:
            Severity.parse(cond["severity"])
        except ValueError as exc:
            raise PlaybookError("parse-error", str(exc)) from None
    do = tuple(_parse_step(s, i) for i, s in enumerate(steps))
    book_id = doc.get("id")
    if not book_id:
        digest = hashlib.sha256(canonical_json({"when": cond, "do": steps}).encode()).hexdigest()
        book_id = f"pb-{digest[:10]}"
    return Playbook(id=str(book_id), when=cond, do=do)


def load_playbooks(paths: Sequence[str] = ()) -> List[Playbook]:
    """Shipped playbooks when ``paths`` is empty, else the given files."""
    books = []
    if paths:
        for p in paths:
            with open(p, encoding="utf-8") as fh:
                books.append(parse_playbook(fh.read()))
    else:
        folder = resources.files("cloudguard.data.playbooks")
        for entry in sorted(folder.iterdir(), key=lambda e: e.name):
            if entry.name.endswith(".yaml"):
                books.append(parse_playbook(entry.read_text("utf-8")))
    return sorted(books, key=lambda b: b.id)


def _source_matches(wanted: str, actual: Source) -> bool:
    if wanted in SOURCE_ALIASES:
        return actual in SOURCE_ALIASES[wanted]
    return wanted == actual.value


def book_matches(book: Playbook, e: NormalizedEvent) -> bool:
    w = book.when
    if "control_id" in w and w["control_id"] != e.control_id:
        return False
    if "severity" in w and e.severity < Severity.parse(w["severity"]):
        return False
    if "source" in w and not _source_matches(w["source"], e.source):
        return False
    return True


def match(e: NormalizedEvent, books: Iterable[Playbook]) -> List[Playbook]:
    """Every book whose when-clause holds for ``e``, ordered by id."""
    return sorted((b for b in books if book_matches(b, e)), key=lambda b: b.id)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


def merge_patch(target: Any, patch: Any) -> Any:
    """JSON merge patch (RFC 7396); never mutates its inputs."""
    if not isinstance(patch, Mapping):
        return copy.deepcopy(patch)
    result = copy.deepcopy(dict(target)) if isinstance(target, Mapping) else {}
    for key, value in patch.items():
        if value is None:
            result.pop(key, None)
        else:
            result[key] = merge_patch(result.get(key), value)
    return result


def flatten(doc: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    out = {}
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if isinstance(value, Mapping) and value:
            out.update(flatten(value, path + "."))
        else:
            out[path] = value
    return out


def diff_docs(rid: str, before: Mapping[str, Any], after: Mapping[str, Any]) -> List[Tuple[str, Any, Any]]:
    a, b = flatten(before), flatten(after)
    return [(f"{rid}:{p}", a.get(p), b.get(p)) for p in sorted(set(a) | set(b)) if a.get(p) != b.get(p) or (p in a) != (p in b)]


class StateStore:
    """Single-writer document store; write hooks see every mutation."""

    def __init__(self, docs: Optional[Mapping[str, Mapping[str, Any]]] = None):
        self._docs: Dict[str, Dict[str, Any]] = {k: copy.deepcopy(dict(v)) for k, v in (docs or {}).items()}
        self._versions: Dict[str, int] = {k: 0 for k in self._docs}
        self.hooks: List[Callable[[str, Optional[Mapping[str, Any]]], None]] = []

    def __contains__(self, rid: str) -> bool:
        return rid in self._docs

    def __len__(self) -> int:
        return len(self._docs)

    def get(self, rid: str) -> Optional[Mapping[str, Any]]:
        return self._docs.get(rid)

    def version(self, rid: str) -> int:
        return self._versions.get(rid, -1)

    def ids(self) -> List[str]:
        return sorted(self._docs)

    def docs(self) -> List[Mapping[str, Any]]:
        return [self._docs[k] for k in sorted(self._docs)]

    def put(self, rid: str, doc: Mapping[str, Any]) -> None:
        for hook in self.hooks:
            hook(rid, doc)
        self._docs[rid] = copy.deepcopy(dict(doc))
        self._versions[rid] = self._versions.get(rid, -1) + 1

    def delete(self, rid: str) -> None:
        for hook in self.hooks:
            hook(rid, None)
        self._docs.pop(rid, None)
        self._versions[rid] = self._versions.get(rid, -1) + 1

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self._docs).encode()).hexdigest()

    def snapshot(self) -> Dict[str, Dict[str, Any]]:
        return copy.deepcopy(self._docs)


# ---------------------------------------------------------------------------
# simulated terraform modules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Module:
    name: str
    narrows: bool
    plan: Callable[[Mapping[str, Any], StateStore], Dict[str, Dict[str, Any]]]


def _need(variables: Mapping[str, Any], key: str, module: str) -> str:
    value = variables.get(key)
    if not value:
        raise RemediationError("template-unresolved", f"{module} needs var {key!r}")
    return str(value)


def _restrict_project_fips(variables, declared: StateStore):
    project = _need(variables, "project", "network/restrictive")
    changes = {}
    found = False
    for rid in declared.ids():
        doc = declared.get(rid)
        if doc.get("project") != project:
            continue
        found = True
        if doc.get("kind") == "floating_ip" and doc.get("public") is True and doc.get("env") != "prod":
            changes[rid] = {"public": False}
    if not found:
        raise RemediationError("target-not-found", f"no declared resources in project {project}")
    return changes


def _single_target(variables, declared: StateStore, key: str, module: str, patch: Dict[str, Any]):
    rid = _need(variables, key, module)
    if rid not in declared:
        raise RemediationError("target-not-found", rid)
    return {rid: patch}


MODULES: Dict[str, Module] = {
    "network/restrictive": Module("network/restrictive", True, _restrict_project_fips),
    "network/secgroup-restrict": Module(
        "network/secgroup-restrict", True,
        lambda v, d: _single_target(v, d, "server", "network/secgroup-restrict", {"security_group": "restricted"}),
    ),
    "network/restrict-cidr": Module(
        "network/restrict-cidr", True,
        lambda v, d: _single_target(v, d, "rule", "network/restrict-cidr", {"remote_ip_prefix": "10.0.0.0/8"}),
    ),
}


# ---------------------------------------------------------------------------
# orchestrator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RollbackToken:
    token_id: str
    resource_id: str
    pre_state: Mapping[str, Any]
    issued_at: int


@dataclass(frozen=True)
class PlanArtifact:
    plan_id: str
    book_id: str
    module: str
    vars: Mapping[str, Any]
    diff: Tuple[Tuple[str, Any, Any], ...]
    target: str
    event_id: str
    created_at: int
    approval: Approval = Approval.PENDING
    applied: bool = False

    def to_doc(self) -> Dict[str, Any]:
        return {
            "plan_id": self.plan_id,
            "book_id": self.book_id,
            "module": self.module,
            "vars": dict(self.vars),
            "diff": [list(d) for d in self.diff],
            "target": self.target,
            "event_id": self.event_id,
            "created_at": self.created_at,
            "approval": self.approval.value,
            "applied": self.applied,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "PlanArtifact":
        return cls(
            plan_id=doc["plan_id"],
            book_id=doc["book_id"],
            module=doc["module"],
            vars=dict(doc["vars"]),
            diff=tuple(tuple(d) for d in doc["diff"]),
            target=doc["target"],
            event_id=doc["event_id"],
            created_at=int(doc["created_at"]),
            approval=Approval(doc["approval"]),
            applied=bool(doc["applied"]),
        )


@dataclass
class Outcome:
    book_id: str
    mode: Mode
    steps_run: List[str] = field(default_factory=list)
    diffs: List[Tuple[str, Any, Any]] = field(default_factory=list)
    tokens: List[RollbackToken] = field(default_factory=list)
    plan: Optional[PlanArtifact] = None
    post_check: PostCheck = PostCheck.NOT_APPLICABLE
    messages: List[str] = field(default_factory=list)

    @property
    def token(self) -> Optional[RollbackToken]:
        return self.tokens[0] if self.tokens else None


def _resolve(value: Any, env: Mapping[str, Optional[str]]) -> Any:
    if isinstance(value, str):
        def sub(m: re.Match) -> str:
            name = m.group(1).strip().replace(" ", "_")
            got = env.get(name)
            if not got:
                raise RemediationError("template-unresolved", name)
            return got
        return _TEMPLATE_RE.sub(sub, value)
    if isinstance(value, Mapping):
        return {k: _resolve(v, env) for k, v in value.items()}
    if isinstance(value, list):
        return [_resolve(v, env) for v in value]
    return value


class Orchestrator:
    """Executes matched playbooks against a live store and a declared store."""

    def __init__(
        self,
        live: StateStore,
        declared: Optional[StateStore] = None,
        profile: Optional[ControlProfile] = None,
        books: Iterable[Playbook] = (),
    ):
        self.live = live
        self.declared = declared if declared is not None else StateStore()
        self.profile = profile
        self.books: Dict[str, Playbook] = {b.id: b for b in books}
        self.tokens: Dict[str, RollbackToken] = {}
        self.redeemed: Set[str] = set()
        self.plans: Dict[str, PlanArtifact] = {}
        self._dry_runs: Set[Tuple[str, str]] = set()
        self._plan_index: Dict[Tuple[str, str], str] = {}
        self._seq = 0

    def _next(self, prefix: str) -> str:
        self._seq += 1
        return f"{prefix}-{self._seq:06d}"

    def _env(self, e: NormalizedEvent) -> Dict[str, Optional[str]]:
        project = e.evidence.get("project_id") if e.evidence else None
        if not project:
            doc = self.live.get(e.resource_id) or self.declared.get(e.resource_id) or {}
            project = doc.get("project")
        return {"resource_id": e.resource_id, "project_id": project}

    def post_check(self, e: NormalizedEvent) -> PostCheck:
        policy = self.profile.policy(e.control_id) if self.profile else None
        doc = self.live.get(e.resource_id)
        if policy is None or doc is None:
            return PostCheck.NOT_APPLICABLE
        return PostCheck.FAILED if check_policy(policy, doc) is not None else PostCheck.PASSED

    def execute(
        self,
        book: Playbook,
        e: NormalizedEvent,
        mode: Mode = Mode.DRY_RUN,
        approval: bool = False,
        now_ms: int = 0,
    ) -> Outcome:
        """Run ``book`` for event ``e``.

        Every step is resolved and planned before anything is written, so a
        failing step leaves both stores untouched.
        """
        mode = Mode(mode)
        key = (book.id, e.resource_id)
        if mode is Mode.APPLY and (book.destructive or book.has_terraform):
            if not approval:
                raise RemediationError("approval-required", book.id)
            if key not in self._dry_runs:
                raise RemediationError("no-prior-dry-run", book.id)
        env = self._env(e)
        out = Outcome(book_id=book.id, mode=mode)
        patches: List[Tuple[str, Dict[str, Any]]] = []
        terraform: List[Tuple[str, Dict[str, Any], Dict[str, Dict[str, Any]]]] = []
        for step in book.do:
            if step.type == "k8s.patch":
                target = _resolve(step.target, env)
                doc = self.live.get(target)
                if doc is None:
                    raise RemediationError("target-not-found", target)
                after = merge_patch(doc, _resolve(step.payload, env))
                out.diffs += diff_docs(target, doc, after)
                patches.append((target, after))
            elif step.type == "terraform.apply":
                module = MODULES.get(step.module)
                if module is None:
                    raise RemediationError("target-not-found", f"module {step.module}")
                variables = _resolve(dict(step.vars), env)
                changes = module.plan(variables, self.declared)
                for rid in sorted(changes):
                    before = self.declared.get(rid)
                    out.diffs += diff_docs(rid, before, merge_patch(before, changes[rid]))
                terraform.append((step.module, variables, changes))
            else:
                out.messages.append(_resolve(step.message, env))
            out.steps_run.append(step.type)

        if mode is Mode.DRY_RUN:
            self._dry_runs.add(key)
            for module, variables, changes in terraform:
                out.plan = self._record_plan(book, e, module, variables, out.diffs, now_ms)
            return out

        for target, after in patches:
            pre = self.live.get(target)
            token = RollbackToken(self._next("rbk"), target, copy.deepcopy(dict(pre)), now_ms)
            self.live.put(target, after)
            self.tokens[token.token_id] = token
            out.tokens.append(token)
        for module, variables, changes in terraform:
            plan = self._record_plan(book, e, module, variables, out.diffs, now_ms)
            plan = replace(plan, approval=Approval.APPROVED)
            self._write_changes(changes)
            plan = replace(plan, applied=True)
            self.plans[plan.plan_id] = plan
            out.plan = plan
        out.post_check = self.post_check(e)
        return out

    def _record_plan(self, book, e, module, variables, diffs, now_ms) -> PlanArtifact:
        key = (book.id, e.resource_id)
        existing = self._plan_index.get(key)
        if existing and not self.plans[existing].applied:
            plan = replace(self.plans[existing], diff=tuple(diffs), vars=dict(variables))
        else:
            plan = PlanArtifact(
                plan_id=self._next("plan"),
                book_id=book.id,
                module=module,
                vars=dict(variables),
                diff=tuple(diffs),
                target=e.resource_id,
                event_id=e.event_id,
                created_at=now_ms,
            )
            self._plan_index[key] = plan.plan_id
        self.plans[plan.plan_id] = plan
        return plan

    def _write_changes(self, changes: Mapping[str, Mapping[str, Any]]) -> None:
        for rid in sorted(changes):
            declared = merge_patch(self.declared.get(rid), changes[rid])
            self.declared.put(rid, declared)
            live_before = self.live.get(rid) or {}
            self.live.put(rid, merge_patch(live_before, changes[rid]))

    def pending_plans(self) -> List[PlanArtifact]:
        return [p for _, p in sorted(self.plans.items()) if p.approval is Approval.PENDING]

    def approve(self, plan_id: str) -> PlanArtifact:
        plan = self._plan(plan_id)
        plan = replace(plan, approval=Approval.APPROVED)
        self.plans[plan_id] = plan
        return plan

    def reject(self, plan_id: str) -> PlanArtifact:
        plan = replace(self._plan(plan_id), approval=Approval.REJECTED)
        self.plans[plan_id] = plan
        return plan

    def apply_plan(self, plan_id: str) -> PlanArtifact:
        """Apply an approved plan, recomputing its module against declared state."""
        plan = self._plan(plan_id)
        if plan.approval is not Approval.APPROVED:
            raise RemediationError("approval-required", plan_id)
        if plan.applied:
            return plan
        module = MODULES.get(plan.module)
        if module is None:
            raise RemediationError("target-not-found", f"module {plan.module}")
        self._write_changes(module.plan(plan.vars, self.declared))
        plan = replace(plan, applied=True)
        self.plans[plan_id] = plan
        return plan

    def _plan(self, plan_id: str) -> PlanArtifact:
        if plan_id not in self.plans:
            raise RemediationError("target-not-found", f"plan {plan_id}")
        return self.plans[plan_id]

    def rollback(self, token: RollbackToken | str) -> Mapping[str, Any]:
        """Restore the pre-patch document; each token works once."""
        token_id = token if isinstance(token, str) else token.token_id
        tok = self.tokens.get(token_id)
        if tok is None:
            raise RemediationError("target-not-found", f"token {token_id}")
        if token_id in self.redeemed:
            raise RemediationError("already-redeemed", token_id)
        if tok.resource_id not in self.live:
            raise RemediationError("resource-missing", tok.resource_id)
        self.live.put(tok.resource_id, tok.pre_state)
        self.redeemed.add(token_id)
        return self.live.get(tok.resource_id)
