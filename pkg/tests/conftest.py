from __future__ import annotations

import numpy as np
import pytest

from tatonnement.field import AppendixParams, make_appendix_field, make_linear_field, make_quadratic_potential_field

SQRT3_2 = np.sqrt(3.0) / 2.0


@pytest.fixture
def well_k0():
    return make_appendix_field(AppendixParams(1.0, 1.0, 0.0))


@pytest.fixture
def well_k05():
    return make_appendix_field(AppendixParams(1.0, 1.0, 0.5))


@pytest.fixture
def bowl():
    return make_quadratic_potential_field(2)


@pytest.fixture
def contracting():
    return make_linear_field(-np.eye(2))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
