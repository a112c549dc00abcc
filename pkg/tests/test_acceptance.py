"""Acceptance suite: one test per criterion, each within its runtime budget."""

import pytest

from toolbottleneck.acceptance import CRITERIA, run_criterion


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number, capsys):
    res = run_criterion(number)
    with capsys.disabled():
        print("\n" + res.line())
    assert res.passed, res.line()
