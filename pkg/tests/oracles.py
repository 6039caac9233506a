"""Brute-force reference implementations used by the tests.

Each oracle recomputes its answer from public data by the most direct
method available, sharing no code with the implementation under test.
"""

from __future__ import annotations

from fractions import Fraction
from itertools import product
from typing import Dict, Iterable, List, Sequence, Set, Tuple

from cloudguard.graph import EdgeKind, IdentityGraph, NodeKind
from cloudguard.model import ActionKind, Severity


# -- who_can ---------------------------------------------------------------

def who_can_oracle(g: IdentityGraph, action: str, resource: str) -> Set[str]:
    """Enumerate every simple containment path out of ``resource``.

    A subject qualifies when it grants a role whose scope edge lands on any
    node reachable that way and whose verb/kind lists allow the action.
    """
    kinds = {n: g.kind(n) for n in g.nodes()}
    out: Dict[str, List[str]] = {}
    role_scopes: Dict[str, Set[str]] = {}
    grants: Dict[str, Set[str]] = {}
    for u, v, kind, _ in g.edges():
        if kind in (EdgeKind.OWNERSHIP, EdgeKind.SCOPE) and kinds[u] is not NodeKind.ROLE and kinds[v] is not NodeKind.ROLE:
            out.setdefault(u, []).append(v)
        if kind is EdgeKind.SCOPE and kinds[u] is NodeKind.ROLE:
            role_scopes.setdefault(u, set()).add(v)
        if kind is EdgeKind.GRANTS:
            grants.setdefault(v, set()).add(u)

    reached = set()

    def walk(path: List[str]) -> None:
        reached.add(path[-1])
        for nxt in out.get(path[-1], ()):
            if nxt not in path:
                walk(path + [nxt])

    walk([resource])
    rkind = g.attrs(resource).get("kind", "")
    found = set()
    for role, scopes in role_scopes.items():
        attrs = g.attrs(role)
        verbs, rkinds = attrs.get("verbs", ()), attrs.get("kinds", ("*",))
        if not ("*" in verbs or action in verbs) or not ("*" in rkinds or rkind in rkinds):
            continue
        if scopes & reached:
            found |= grants.get(role, set())
    return found


# -- decide ----------------------------------------------------------------

BOOK_CLASSES = ("none", "safe_patch", "destructive", "terraform", "safe_and_terraform")


def decide_oracle(conf: float, severity: Severity, book_class: str, tau_low: float, tau_high: float) -> ActionKind:
    """Decision table written out case by case."""
    if conf < tau_low:
        return ActionKind.LOG
    high = severity in (Severity.HIGH, Severity.CRITICAL)
    has_safe = book_class in ("safe_patch", "safe_and_terraform")
    has_tf = book_class in ("terraform", "safe_and_terraform")
    if conf >= tau_high and high and has_safe:
        return ActionKind.PATCH
    if has_tf:
        return ActionKind.PLAN
    return ActionKind.TICKET


# -- dedup -----------------------------------------------------------------

def dedup_oracle(events: Sequence, window_ms: int) -> List[Tuple[str, int]]:
    """(surviving event_id, group size) per group, groups in first-seen order."""
    groups: Dict[Tuple[str, str, int], List] = {}
    for e in events:
        groups.setdefault((e.resource_id, e.control_id, e.timestamp // window_ms), []).append(e)
    return [(min(g, key=lambda e: (e.timestamp, e.event_id)).event_id, len(g)) for g in groups.values()]


# -- calibration -----------------------------------------------------------

def all_twentieths() -> Iterable[Tuple[int, int, int, int]]:
    for a, b, c in product(range(21), repeat=3):
        if a + b + c <= 20:
            yield (a, b, c, 20 - a - b - c)


def confusion_oracle(weights: Tuple[int, int, int, int], rows, caps: Tuple[int, ...], theta: Fraction):
    """Exact (tp, fp, fn, tn) with risk computed in rationals."""
    tp = fp = fn = tn = 0
    for counts, label in rows:
        norm = [min(Fraction(n, cap), Fraction(1)) for n, cap in zip(counts, caps)]
        r = sum(Fraction(w, 20) * x for w, x in zip(weights, norm))
        pred = r >= theta
        if pred and label:
            tp += 1
        elif pred:
            fp += 1
        elif label:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def f1_fpr(tp: int, fp: int, fn: int) -> Tuple[Fraction, Fraction]:
    f1 = Fraction(2 * tp, 2 * tp + fp + fn) if tp else Fraction(0)
    fpr = Fraction(fp, tp + fp) if tp + fp else Fraction(0)
    return f1, fpr


def calibrate_oracle(rows, caps, theta: Fraction, fpr_cap: Fraction):
    best = None
    any_feasible = False
    scored = []
    for w in all_twentieths():
        tp, fp, fn, _ = confusion_oracle(w, rows, caps, theta)
        f1, fpr = f1_fpr(tp, fp, fn)
        scored.append((w, f1, fpr))
        any_feasible |= fpr <= fpr_cap
    pool = [s for s in scored if s[2] <= fpr_cap] if any_feasible else scored
    for w, f1, fpr in pool:
        key = (-f1, fpr, w)
        if best is None or key < best[0]:
            best = (key, w, f1, fpr)
    return best[1], best[2], best[3], any_feasible
