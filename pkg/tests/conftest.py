import pytest

from jumplp.dual import StateGrid, solve_hjb
from jumplp.generator import build_quadrature
from jumplp.model import REGISTRY, build_problem


@pytest.fixture(scope="session")
def problems():
    return {name: build_problem({"problem": {"name": name}}) for name in REGISTRY}


@pytest.fixture(scope="session")
def quads(problems):
    return {name: build_quadrature(p.levy) for name, p in problems.items()}


@pytest.fixture(scope="session")
def lq_jump(problems):
    return problems["lq_jump"]


@pytest.fixture(scope="session")
def hjb401(problems, quads):
    """Default-grid HJB solutions for the LQ-family problems."""
    return {
        name: solve_hjb(problems[name], StateGrid.for_problem(problems[name], 401), quad=quads[name])
        for name in ("lq", "lq_jump", "lq_jump_asym")
    }


_CRITERIA = []


@pytest.fixture
def record_criterion():
    """Print and keep one ``PASS``/``FAIL`` line per acceptance criterion."""

    def record(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _CRITERIA.append(line)
        print(line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
