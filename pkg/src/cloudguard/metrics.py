"""Evaluation metrics, run summaries and Welch's t-test."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

from .errors import MetricError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def recall(self) -> float:
        pos = self.tp + self.fn
        return self.tp / pos if pos else 0.0


def fpr(c: ConfusionCounts) -> float:
    """False-positive rate FP / (TP + FP), in percent."""
    denom = c.tp + c.fp
    if denom == 0:
        raise MetricError("undefined-denominator", "no alerts raised")
    return 100.0 * c.fp / denom


def incident_reduction(e_before: float, e_after: float) -> float:
    if e_before <= 0:
        raise MetricError("zero-baseline", f"e_before must be positive, got {e_before}")
    return 100.0 * (e_before - e_after) / e_before


def events_per_100_nodes(events: int, node_count: int) -> float:
    if node_count <= 0:
        raise MetricError("zero-nodes", "node_count must be positive")
    return events * 100.0 / node_count


def coverage(checked_families: int, declared_families: int) -> float:
    if declared_families <= 0:
        raise MetricError("zero-declared", "no declared families")
    if checked_families > declared_families:
        raise MetricError("checked-exceeds-declared", f"{checked_families} > {declared_families}")
    return 100.0 * checked_families / declared_families


def cost_reduction(c_cnapp: float, c_open: float) -> float:
    if c_cnapp <= 0:
        raise MetricError("zero-reference-cost", "reference cost must be positive")
    return 100.0 * (c_cnapp - c_open) / c_cnapp


@dataclass(frozen=True)
class RunSummary:
    metric: str
    values: Tuple[float, ...]
    mean: float
    sd: Optional[float]
    n: int


def summarize(runs: Sequence[float], metric: str = "") -> RunSummary:
    if not runs:
        raise MetricError("empty-input", "nothing to summarize")
    values = tuple(float(v) for v in runs)
    mean = math.fsum(values) / len(values)
    sd = statistics.stdev(values) if len(values) >= 2 else None
    return RunSummary(metric, values, mean, sd, len(values))


# -- Student t tail via the regularized incomplete beta -------------------

def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b) (modified Lentz)."""
    tiny = 1e-300
    c, d = 1.0, 1.0 - (a + b) * x / (a + 1.0)
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2))
        for coef in (num, -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0))):
            d = 1.0 + coef * d
            d = 1.0 / (d if abs(d) > tiny else tiny)
            c = 1.0 + coef / c
            c = c if abs(c) > tiny else tiny
            delta = c * d
            h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = a * math.log(x) + b * math.log1p(-x) - (math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    t2 = t * t
    if t2 < df:
        # near zero df / (df + t^2) rounds to 1; the complement keeps the digits
        return 1.0 - betainc(0.5, df / 2.0, t2 / (df + t2))
    return min(1.0, betainc(df / 2.0, 0.5, df / (df + t2)))


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float

    def __iter__(self):
        return iter((self.t, self.df, self.p))


def welch_t(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    """Two-sided Welch t-test with Welch-Satterthwaite degrees of freedom."""
    if len(a) < 2 or len(b) < 2:
        raise MetricError("insufficient-samples", "each sample needs at least two values")
    ma, mb = statistics.fmean(a), statistics.fmean(b)
    va, vb = statistics.variance(a), statistics.variance(b)
    sa, sb = va / len(a), vb / len(b)
    se2 = sa + sb
    if se2 == 0:
        if ma == mb:
            raise MetricError("insufficient-samples", "both samples constant and equal")
        t = math.copysign(math.inf, ma - mb)
        return WelchResult(t, float(len(a) + len(b) - 2), 0.0)
    t = (ma - mb) / math.sqrt(se2)
    df = se2 * se2 / (sa * sa / (len(a) - 1) + sb * sb / (len(b) - 1))
    return WelchResult(t, df, t_two_sided_p(t, df))
