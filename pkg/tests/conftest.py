import numpy as np
import pytest

from octaboltz import build_coefficients, build_lattice, hard_sphere
from octaboltz.coefficients import BuildSpec
from octaboltz.kernel import SphereQuadrature
from octaboltz.solver import initialize_from_maxwellian

ACCEPTANCE = {}


def record_acceptance(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE.setdefault(number, []).append((passed, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        for _, line in ACCEPTANCE[number]:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_lattice():
    return build_lattice(1.0, 3.0)


@pytest.fixture(scope="session")
def small_lattice():
    return build_lattice(1.0, 1.5)


@pytest.fixture(scope="session")
def small_spec():
    return BuildSpec(sphere=SphereQuadrature(16, 16))


@pytest.fixture(scope="session")
def small_raw(small_lattice, small_spec):
    return build_coefficients(small_lattice, hard_sphere(1.0), small_spec, correct=False)


@pytest.fixture(scope="session")
def small_coeffs(small_lattice, small_spec):
    return build_coefficients(small_lattice, hard_sphere(1.0), small_spec)


def bimodal(lattice, n0=0.5, u=0.8, T0=0.3):
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = initialize_from_maxwellian(lattice, n0, (u, 0.0, 0.0), T0)
        b = initialize_from_maxwellian(lattice, n0, (-u, 0.0, 0.0), T0)
    return a + b


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)
