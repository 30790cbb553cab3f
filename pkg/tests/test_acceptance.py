"""The twelve acceptance criteria at their stated tolerances.

Each criterion prints one ``[PASS]``/``[FAIL]`` line; the lines are repeated
in the terminal summary (see conftest.py) so they survive output capture.
"""

import pytest

from srlab import acceptance

RESULTS: dict[int, acceptance.Criterion] = {}


@pytest.mark.slow
@pytest.mark.parametrize("number", sorted(acceptance.CRITERIA))
def test_criterion(number):
    c = acceptance.run_criterion(number, seed=0)
    RESULTS[number] = c
    print(c.line())
    assert c.passed, f"{c.line()}\n{c.metrics}"
