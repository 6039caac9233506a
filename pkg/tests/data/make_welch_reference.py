"""Regenerate welch_reference.json. Needs scipy; the tests themselves do not."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy import stats


def pairs():
    yield [1.0, 2.0, 3.0, 4.0, 5.0], [2.0, 3.0, 4.0, 5.0, 6.0]
    yield [1.0, 3.0], [2.0, 7.0]
    rng = np.random.default_rng(20240611)
    while True:
        na, nb = (int(x) for x in rng.integers(2, 31, size=2))
        scale_a, scale_b = rng.uniform(0.1, 20.0, size=2)
        shift = rng.normal(0.0, 5.0)
        a = rng.normal(50.0, scale_a, size=na)
        b = rng.normal(50.0 + shift, scale_b, size=nb)
        yield [round(float(x), 6) for x in a], [round(float(x), 6) for x in b]


def main() -> None:
    cases = []
    for a, b in pairs():
        res = stats.ttest_ind(a, b, equal_var=False)
        va, vb = np.var(a, ddof=1) / len(a), np.var(b, ddof=1) / len(b)
        df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
        cases.append({"a": a, "b": b, "t": float(res.statistic), "df": float(df), "p": float(res.pvalue)})
        if len(cases) == 20:
            break
    out = Path(__file__).with_name("welch_reference.json")
    out.write_text(json.dumps({"generator": "scipy.stats.ttest_ind(equal_var=False)", "cases": cases}, indent=1) + "\n")


if __name__ == "__main__":
    main()
