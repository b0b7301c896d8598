"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run it alone with ``pytest tests/test_acceptance.py -v`` or as a script,
``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import criteria  # noqa: E402

SIZES = {"1": 1000, "4": 500, "5": 200, "7": 500, "8": 200, "10": 300}

RUNNERS = {
    "1": lambda: criteria.c1_membership(range(SIZES["1"])),
    "2": criteria.c2_split_brain,
    "3": criteria.c3_join_atomicity,
    "4": lambda: criteria.c4_glup(range(SIZES["4"])),
    "5": lambda: criteria.c5_detection(range(SIZES["5"])),
    "6": criteria.c6_quorum,
    "7": lambda: criteria.c7_dependencies(range(SIZES["7"])),
    "8": lambda: criteria.c8_pull(range(SIZES["8"])),
    "9": criteria.c9_failback,
    "10": lambda: criteria.c10_database(range(SIZES["10"])),
}

_done: dict[str, criteria.Outcome] = {}


def outcome(num: str) -> criteria.Outcome:
    if num not in _done:
        _done[num] = RUNNERS[num]()
    return _done[num]


def determinism() -> criteria.Outcome:
    out = criteria.Outcome("11 determinism")
    for num in RUNNERS:
        for key, first in outcome(num).digests.items():
            again = criteria.digest(criteria.RERUN[num](key))
            out.runs += 1
            if again != first:
                out.fail(f"criterion {num} instance {key!r}: trace differs on rerun")
    return out


def _report(capsys, result: criteria.Outcome) -> None:
    with capsys.disabled():
        print("\n" + result.line())
    assert result.ok, "\n".join(result.failures[:20])


@pytest.mark.parametrize("num", list(RUNNERS))
def test_criterion(num, capsys):
    _report(capsys, outcome(num))


def test_criterion_11_determinism(capsys):
    _report(capsys, determinism())


if __name__ == "__main__":
    results = [outcome(n) for n in RUNNERS] + [determinism()]
    for r in results:
        print(r.line())
    sys.exit(0 if all(r.ok for r in results) else 1)
