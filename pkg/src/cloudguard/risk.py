"""Per-resource risk, security score and grid-search weight calibration."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CalibrationError
from .model import WeightVector, canonical_json

GRID_STEPS = 20  # weights are integer twentieths
Quad = Tuple[float, float, float, float]


@dataclass(frozen=True)
class EvidenceCounts:
    config: int = 0
    runtime: int = 0
    identity: int = 0
    overrides: int = 0

    def __post_init__(self):
        for v in self.as_tuple():
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"counts must be non-negative integers, got {v!r}")

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.config, self.runtime, self.identity, self.overrides)


@dataclass(frozen=True)
class NormalizationCaps:
    config: int = 10
    runtime: int = 10
    identity: int = 10
    overrides: int = 10

    def __post_init__(self):
        for v in self.as_tuple():
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"caps must be integers >= 1, got {v!r}")

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.config, self.runtime, self.identity, self.overrides)


DEFAULT_CAPS = NormalizationCaps()


@dataclass(frozen=True)
class LabeledResource:
    resource_id: str
    counts: EvidenceCounts
    label: bool


def normalize_counts(c: EvidenceCounts, caps: NormalizationCaps = DEFAULT_CAPS) -> Quad:
    return tuple(min(n / cap, 1.0) for n, cap in zip(c.as_tuple(), caps.as_tuple()))  # type: ignore[return-value]


def risk(norm: Sequence[float], w: WeightVector) -> float:
    return math.fsum(wi * xi for wi, xi in zip(w.as_tuple(), norm))


def security_score(risk_value: float) -> float:
    if not 0.0 <= risk_value <= 1.0:
        raise ValueError(f"risk out of range: {risk_value}")
    return 100.0 * (1.0 - risk_value)


def simplex_grid(steps: int = GRID_STEPS) -> np.ndarray:
    """All compositions of ``steps`` into four non-negative parts, lexicographic."""
    rows = [
        (a, b, c, steps - a - b - c)
        for a in range(steps + 1)
        for b in range(steps + 1 - a)
        for c in range(steps + 1 - a - b)
    ]
    return np.array(rows, dtype=np.int64)


def _exact_theta(theta: float | Fraction) -> Fraction:
    # floats are read as the decimal they print as, so 0.3 means 3/10
    return theta if isinstance(theta, Fraction) else Fraction(repr(float(theta)))


def _scaled_features(data: Sequence[LabeledResource], caps: NormalizationCaps) -> Tuple[np.ndarray, int]:
    """Normalized features times L (the lcm of the caps), as exact integers."""
    lcm = math.lcm(*caps.as_tuple())
    feats = np.array(
        [[min(n * (lcm // cap), lcm) for n, cap in zip(r.counts.as_tuple(), caps.as_tuple())] for r in data],
        dtype=np.int64,
    )
    return feats, lcm


@dataclass(frozen=True)
class GridPoint:
    weights: Tuple[int, int, int, int]  # twentieths
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def f1(self) -> Fraction:
        denom = 2 * self.tp + self.fp + self.fn
        return Fraction(2 * self.tp, denom) if denom and self.tp else Fraction(0)

    @property
    def fpr(self) -> Fraction:
        predicted = self.tp + self.fp
        return Fraction(self.fp, predicted) if predicted else Fraction(0)


def evaluate_grid(
    data: Sequence[LabeledResource],
    caps: NormalizationCaps = DEFAULT_CAPS,
    theta: float | Fraction = 0.5,
    grid: Optional[np.ndarray] = None,
) -> List[GridPoint]:
    """Confusion counts for every weight vector, with exact integer comparisons."""
    if grid is None:
        grid = simplex_grid()
    feats, lcm = _scaled_features(data, caps)
    cut = math.ceil(_exact_theta(theta) * GRID_STEPS * lcm)
    labels = np.array([r.label for r in data], dtype=bool)
    predicted = (grid @ feats.T) >= cut  # vectors x resources
    tp = (predicted & labels).sum(axis=1)
    fp = (predicted & ~labels).sum(axis=1)
    fn = (~predicted & labels).sum(axis=1)
    tn = (~predicted & ~labels).sum(axis=1)
    return [
        GridPoint(tuple(int(x) for x in grid[i]), int(tp[i]), int(fp[i]), int(fn[i]), int(tn[i]))
        for i in range(len(grid))
    ]


@dataclass(frozen=True)
class CalibrationResult:
    weights: WeightVector
    f1: float
    fpr: float
    theta: float
    feasible: bool
    grid_size: int
    digest: str

    def to_doc(self) -> Dict[str, object]:
        return {
            "weights": list(self.weights.as_tuple()),
            "f1": self.f1,
            "fpr": self.fpr,
            "theta": self.theta,
            "feasible": self.feasible,
            "grid_size": self.grid_size,
            "digest": self.digest,
        }


def dataset_digest(data: Sequence[LabeledResource]) -> str:
    rows = sorted([r.resource_id, list(r.counts.as_tuple()), r.label] for r in data)
    return hashlib.sha256(canonical_json(rows).encode("utf-8")).hexdigest()


def weights_from_twentieths(w: Sequence[int]) -> WeightVector:
    return WeightVector(*(x / GRID_STEPS for x in w))


def calibrate_weights(
    data: Sequence[LabeledResource],
    caps: NormalizationCaps = DEFAULT_CAPS,
    theta: float = 0.5,
    fpr_cap: float = 0.05,
    grid: Optional[np.ndarray] = None,
) -> CalibrationResult:
    """Best-F1 vector with FPR <= fpr_cap.

    Ties go to the lower FPR, then to the lexicographically smallest vector.
    When no vector meets the cap, the best-F1 vector overall is returned with
    ``feasible=False``.
    """
    if not data:
        raise CalibrationError("empty-data", "no labeled resources")
    labels = {r.label for r in data}
    if labels != {True, False}:
        raise CalibrationError("empty-data-class", "calibration needs both positive and negative resources")
    if not 0 < theta < 1:
        raise CalibrationError("bad-theta", f"theta must be in (0,1), got {theta}")
    points = evaluate_grid(data, caps, theta, grid)
    cap = Fraction(repr(float(fpr_cap)))

    def rank(p: GridPoint):
        return (-p.f1, p.fpr, p.weights)

    feasible = [p for p in points if p.fpr <= cap]
    best = min(feasible or points, key=rank)
    return CalibrationResult(
        weights=weights_from_twentieths(best.weights),
        f1=float(best.f1),
        fpr=float(best.fpr),
        theta=theta,
        feasible=bool(feasible),
        grid_size=len(points),
        digest=dataset_digest(data),
    )
