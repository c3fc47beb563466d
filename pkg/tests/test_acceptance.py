"""Acceptance gate: every primary criterion at its stated tolerance.

Each test prints a single ``[PASS]``/``[FAIL] criterion N ...`` line, both
live and again in the terminal summary. Criteria 7 and 9 train dozens of
models and dominate the runtime.
"""
import pytest

from clfi.validation import CRITERIA

from conftest import CRITERION_LINES


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number, capsys):
    res = CRITERIA[number]()
    CRITERION_LINES.append(res.line())
    with capsys.disabled():
        print("\n" + res.line(), flush=True)
    assert res.passed, res.line()
