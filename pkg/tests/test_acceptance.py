"""One test per acceptance criterion, at full scale.

Each result line is printed as it completes and repeated in the terminal
summary (see ``conftest.pytest_terminal_summary``). Criteria 8 and 9 train
nine speculators between them and take roughly an hour on one core.
"""

import pytest

from treespec.checks import SUITES, run_suite

RESULTS: dict[int, str] = {}


def _run(cid):
    res = run_suite(cid, quick=False)
    RESULTS[cid] = res.line()
    print(res.line())
    assert res.passed, res.line()


@pytest.mark.parametrize("cid", [c for c in sorted(SUITES) if c not in (8, 9)])
def test_criterion(cid):
    _run(cid)


@pytest.mark.slow
@pytest.mark.parametrize("cid", [8, 9])
def test_criterion_training(cid):
    _run(cid)
