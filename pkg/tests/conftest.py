import numpy as np
import pytest

from musurf.densities import make_builtin, minimal_density, mu_density, normalize
from musurf.fields import GridSpec
from musurf.solver import boundary_function, oracle_solution, solve_dirichlet, surface_from_field

# lines reported by tests/test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def g_min():
    return minimal_density()


@pytest.fixture(scope="session")
def g_mu3():
    return mu_density(3.0)


@pytest.fixture(scope="session")
def builtins():
    """Validated built-ins, keyed by a short label."""
    return {
        "minimal": make_builtin("minimal"),
        "mu3": make_builtin("mu", 3.0),
        "mu2.5": make_builtin("mu", 2.5),
        "mu4": make_builtin("mu", 4.0),
        "mu_hat3": make_builtin("mu_hat", 3.0),
        "mu_hat2.5": make_builtin("mu_hat", 2.5, unit_slope=True),
    }


SCHERK_BOX = (-1.2, 1.2)


@pytest.fixture(scope="session")
def scherk_samples(g_min):
    """Sampled Scherk surfaces on 33, 65 and 129 nodes per side."""
    return {n: surface_from_field(g_min, oracle_solution("scherk", GridSpec.square(*SCHERK_BOX, n)))
            for n in (33, 65, 129)}


@pytest.fixture(scope="session")
def scherk_solved(g_min):
    bf = boundary_function("scherk")
    return {n: solve_dirichlet(g_min, GridSpec.square(*SCHERK_BOX, n), bf) for n in (33, 65, 129)}


@pytest.fixture(scope="session")
def solved_cases():
    """A panel of converged solves with different densities and data."""
    cases = {}
    sq = GridSpec.square(-1.0, 1.0, 33)
    cases["minimal/scherk"] = solve_dirichlet(minimal_density(), GridSpec.square(*SCHERK_BOX, 33),
                                              boundary_function("scherk"))
    cases["mu3/saddle"] = solve_dirichlet(mu_density(3.0), sq, boundary_function("saddle"))
    cases["mu2.5/saddle"] = solve_dirichlet(mu_density(2.5), sq, boundary_function("saddle", {"scale": 2.0}))
    cases["mu3/radial"] = solve_dirichlet(mu_density(3.0), sq, boundary_function("radial", {"slope": 4.0}))
    cases["mu_hat3n/radial"] = solve_dirichlet(normalize(make_builtin("mu_hat", 3.0)), sq,
                                               boundary_function("radial", {"slope": 4.0}))
    cases["minimal/affine"] = solve_dirichlet(minimal_density(), sq,
                                              boundary_function("affine", {"a": 2.0, "b": 1.0, "c": 0.5}))
    return cases


def log2_ratios(values):
    v = np.asarray(values, dtype=float)
    return np.log2(v[:-1] / v[1:])
