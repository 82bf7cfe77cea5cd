"""End-to-end acceptance runs, one bundled scenario per criterion.

Each test runs the scenario exactly as ``stochquant run`` would and prints
one PASS/FAIL line (uncaptured) with the verdict count and the wall time
against the criterion's runtime budget.
"""
import time

import pytest

from stochquant.runner import run_scenario
from stochquant.scenario import load

# (number, title, bundled scenario, runtime budget in seconds or None)
CRITERIA = [
    (1, "deviation law", "deviation-law", 5),
    (2, "Born-rule equivariance", "sho-born-rule-refinement", 120),
    (3, "fluctuation scaling", "fluctuation-scaling", 120),
    (4, "classical limit", "classical-limit", 120),
    (5, "information balance", "information-balance", 60),
    (6, "uncertainty relation", "uncertainty", 60),
    (7, "operator-average equality", "operator-averages", 60),
    (8, "locality", "locality", 300),
    (9, "solver cross-validation", "solver-crossval", None),
    (10, "determinism", "determinism", None),
]


@pytest.mark.slow
@pytest.mark.parametrize("number,title,name,budget", CRITERIA,
                         ids=[f"{c[0]:02d}-{c[2]}" for c in CRITERIA])
def test_criterion(number, title, name, budget, tmp_path, capsys):
    t0 = time.perf_counter()
    res = run_scenario(load(name), tmp_path / name)
    wall = time.perf_counter() - t0
    failed = [v.name for v in res.verdicts if not v.passed]
    in_budget = budget is None or wall < budget
    ok = res.exit_code == 0 and in_budget
    limit = "" if budget is None else f" (budget {budget} s)"
    line = (f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: "
            f"{len(res.verdicts) - len(failed)}/{len(res.verdicts)} verdicts, "
            f"exit {res.exit_code}, {wall:.1f} s{limit}")
    if failed:
        line += "; failing: " + ", ".join(failed)
    if res.manifest.get("diagnostics"):
        line += "; " + str(res.manifest["diagnostics"]).strip().splitlines()[-1]
    with capsys.disabled():
        print("\n" + line)
    assert res.exit_code == 0, line
    assert in_budget, line
