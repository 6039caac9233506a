"""Shared records and enums.

Everything here is an immutable value. Records serialize to a canonical
JSON document (sorted keys, compact separators, UTF-8) via :func:`to_doc`
and parse back with :func:`from_doc`.
"""

from __future__ import annotations

import enum
import functools
import json
import math
import re
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional, Tuple, Type, TypeVar

CONTROL_ID_RE = re.compile(r"^[A-Z0-9]+(\.[A-Z0-9-]+)+$")
FAMILIES = ("k8s", "openstack", "iac")
_RANKS: Dict[Any, int] = {}


class _Ordered(enum.Enum):
    """Enum whose declaration order is the comparison order."""

    def _rank(self) -> int:
        rank = _RANKS.get(self)
        if rank is None:
            for i, member in enumerate(type(self)):
                _RANKS[member] = i
            rank = _RANKS[self]
        return rank

    def __lt__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self._rank() < other._rank()

    def __le__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self._rank() <= other._rank()

    def __gt__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self._rank() > other._rank()

    def __ge__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self._rank() >= other._rank()

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown {cls.__name__.lower()}: {value!r}") from None


class Severity(_Ordered):
    INFO = "info"
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    CRITICAL = "critical"


class Priority(_Ordered):
    INFORMATIONAL = "informational"
    NOTICE = "notice"
    WARNING = "warning"
    ERROR = "error"
    CRITICAL = "critical"


class Source(enum.Enum):
    ADMISSION = "admission"
    IAC_SCAN = "iac_scan"
    LIVE_SCAN = "live_scan"
    RUNTIME = "runtime"
    IDENTITY = "identity"


CONFIG_SOURCES = frozenset({Source.ADMISSION, Source.IAC_SCAN, Source.LIVE_SCAN})


class ActionKind(_Ordered):
    # declaration order doubles as "how active" an action is
    LOG = "log"
    TICKET = "ticket"
    PLAN = "plan"
    PATCH = "patch"


class PostCheck(enum.Enum):
    PASSED = "passed"
    FAILED = "failed"
    NOT_APPLICABLE = "not_applicable"


class ScopeKind(enum.Enum):
    NAMESPACE = "namespace"
    PROJECT = "project"
    DOMAIN = "domain"
    CLUSTER = "cluster"


# config-sourced findings borrow the runtime priority scale
SEVERITY_TO_PRIORITY = {
    Severity.INFO: Priority.INFORMATIONAL,
    Severity.LOW: Priority.NOTICE,
    Severity.MEDIUM: Priority.WARNING,
    Severity.HIGH: Priority.ERROR,
    Severity.CRITICAL: Priority.CRITICAL,
}
PRIORITY_TO_SEVERITY = {v: k for k, v in SEVERITY_TO_PRIORITY.items()}


def compare_severity(a: Severity, b: Severity) -> int:
    """Three-way comparison: -1, 0 or 1."""
    return (a > b) - (a < b)


@functools.total_ordering
@dataclass(frozen=True)
class ScopeId:
    kind: ScopeKind
    name: str

    def __post_init__(self):
        if not self.name:
            raise ValueError("scope name must be non-empty")

    def __lt__(self, other: "ScopeId") -> bool:
        if not isinstance(other, ScopeId):
            return NotImplemented
        return (self.kind.value, self.name) < (other.kind.value, other.name)

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.name}"


@dataclass(frozen=True, order=True)
class GrantTuple:
    subject: str
    role: str
    scope: ScopeId
    resource: str
    action: str

    def __post_init__(self):
        for name in ("subject", "role", "resource", "action"):
            if not getattr(self, name):
                raise ValueError(f"grant {name} must be non-empty")


@dataclass(frozen=True)
class Finding:
    control_id: str
    resource_id: str
    severity: Severity
    confidence: float
    source: Source
    evidence: Mapping[str, Any] = field(default_factory=dict)
    fix_hint: Optional[str] = None


def validate_finding(f: Finding) -> List[str]:
    """Return every schema violation; an empty list means the finding is valid."""
    problems = []
    if not f.control_id:
        problems.append("missing-control")
    elif not CONTROL_ID_RE.match(f.control_id):
        problems.append("bad-control-id")
    if not f.resource_id:
        problems.append("missing-resource")
    if not isinstance(f.severity, Severity):
        problems.append("bad-severity")
    if not isinstance(f.source, Source):
        problems.append("bad-source")
    c = f.confidence
    if not isinstance(c, (int, float)) or math.isnan(c) or not 0.0 <= c <= 1.0:
        problems.append("confidence-out-of-range")
    if not isinstance(f.evidence, Mapping):
        problems.append("bad-evidence")
    return problems


@dataclass(frozen=True)
class NormalizedEvent:
    event_id: str
    timestamp: int
    resource_id: str
    control_id: str
    priority: Priority
    severity: Severity
    source: Source
    subject_id: Optional[str] = None
    evidence: Mapping[str, Any] = field(default_factory=dict)
    # scalar evidence strength handed to score(); not part of the raw event
    confidence: float = 1.0

    def __post_init__(self):
        if not self.event_id:
            raise ValueError("event_id must be non-empty")
        if self.timestamp < 0:
            raise ValueError("timestamp must be >= 0")

    @property
    def sort_key(self) -> Tuple[int, str]:
        return (self.timestamp, self.event_id)


@dataclass(frozen=True)
class EvidenceRecord:
    event_id: str
    action: ActionKind
    conf: float
    latency_ms: int
    post_check: PostCheck
    wrote_at: int
    duplicate_count: int = 1
    rollback_token: Optional[str] = None
    # join columns so that a record can be analysed without the raw event
    resource_id: str = ""
    control_id: str = ""
    subject_id: Optional[str] = None
    source: Optional[Source] = None
    severity: Optional[Severity] = None
    observed_at: int = 0
    reason: str = ""
    playbook_id: Optional[str] = None
    plan_id: Optional[str] = None

    def __post_init__(self):
        if self.duplicate_count < 1:
            raise ValueError("duplicate_count must be >= 1")
        if self.rollback_token is not None and self.action is not ActionKind.PATCH:
            raise ValueError("rollback_token only accompanies executed patches")


@dataclass(frozen=True)
class WeightVector:
    w_c: float
    w_t: float
    w_i: float
    w_m: float

    def __post_init__(self):
        parts = self.as_tuple()
        if any(not 0.0 <= w <= 1.0 for w in parts):
            raise ValueError(f"weights must lie in [0, 1]: {parts}")
        if abs(sum(parts) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {sum(parts)!r}")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.w_c, self.w_t, self.w_i, self.w_m)


REFERENCE_WEIGHTS = WeightVector(0.35, 0.30, 0.25, 0.10)


@dataclass(frozen=True)
class Thresholds:
    tau_low: float = 0.3
    tau_high: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.tau_low < self.tau_high <= 1.0:
            raise ValueError(f"need 0 <= tau_low < tau_high <= 1, got {self.tau_low}, {self.tau_high}")


# ---------------------------------------------------------------------------
# canonical documents
# ---------------------------------------------------------------------------

T = TypeVar("T")


_SCALARS = (str, int, float, bool, type(None))


def _encode(value: Any) -> Any:
    if isinstance(value, _SCALARS):
        return value
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, ScopeId):
        return {"kind": value.kind.value, "name": value.name}
    if hasattr(value, "__dataclass_fields__"):
        return to_doc(value)
    if isinstance(value, dict) or isinstance(value, Mapping):
        return {str(k): _encode(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    return value


def to_doc(obj: Any) -> Dict[str, Any]:
    """Plain-dict form of a record, field names as declared."""
    return {f.name: _encode(getattr(obj, f.name)) for f in fields(obj)}


_ENUM_FIELDS: Dict[str, Type[enum.Enum]] = {
    "severity": Severity,
    "priority": Priority,
    "source": Source,
    "action": ActionKind,
    "post_check": PostCheck,
}


def from_doc(cls: Type[T], doc: Mapping[str, Any]) -> T:
    """Inverse of :func:`to_doc` for the records in this module."""
    types = {f.name: str(f.type) for f in fields(cls)}
    unknown = set(doc) - set(types)
    if unknown:
        raise ValueError(f"unknown fields for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        enum_cls = _ENUM_FIELDS.get(name)
        if enum_cls is not None and value is not None and enum_cls.__name__ in types[name]:
            value = enum_cls(value)
        elif name == "scope":
            value = ScopeId(ScopeKind(value["kind"]), value["name"])
        elif name == "evidence":
            value = dict(value)
        kwargs[name] = value
    return cls(**kwargs)


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def dumps(obj: Any) -> str:
    """Canonical text form of a record or plain document."""
    if hasattr(obj, "__dataclass_fields__"):
        obj = to_doc(obj)
    return canonical_json(obj)


def loads(cls: Type[T], text: str) -> T:
    return from_doc(cls, json.loads(text))
