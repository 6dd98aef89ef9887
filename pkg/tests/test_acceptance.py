"""Acceptance suite: every primary criterion at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -s`` to see one PASS/FAIL line per criterion.
"""

import pytest

from wavepmp.verify import CRITERIA


@pytest.mark.parametrize("check", CRITERIA, ids=[c.__name__.removeprefix("check_") for c in CRITERIA])
def test_criterion(check):
    result = check()
    print(result.line())
    assert result.passed, result.detail
