import numpy as np
import pytest

from abreuflow import build_grid, field_from_function, unit_simplex, unit_square
from abreuflow.field import perturbation

SQUARE_TEXT = "# unit square\n1 0 0\n0 1 0\n-1 0 -1\n0 -1 -1\n"
SIMPLEX_TEXT = "1 0 0\n0 1 0\n-1 -1 -1\n"


@pytest.fixture(scope="session")
def square():
    return unit_square()


@pytest.fixture(scope="session")
def simplex():
    return unit_simplex()


@pytest.fixture(scope="session")
def square64(square):
    return field_from_function(build_grid(square, 1 / 64))


@pytest.fixture(scope="session")
def square32(square):
    return field_from_function(build_grid(square, 1 / 32))


@pytest.fixture(scope="session")
def sine32(square):
    return field_from_function(build_grid(square, 1 / 32), perturbation("sine", 1e-2))


@pytest.fixture(scope="session")
def flat32(square):
    return field_from_function(build_grid(square, 1 / 32), base="flat")


@pytest.fixture
def poly_files(tmp_path):
    sq = tmp_path / "square.poly"
    sq.write_text(SQUARE_TEXT)
    sx = tmp_path / "simplex.poly"
    sx.write_text(SIMPLEX_TEXT)
    return sq, sx


def write_config(path, **kw):
    lines = [f"{k} = {v}" for k, v in kw.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
