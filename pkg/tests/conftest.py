import numpy as np
import pytest

from dr_ensemble.solver import StageCosts, UnitProfile


def grid_simplex_2(n=200_001):
    """Dense grid over the 2-simplex, for brute-force minimization."""
    t = np.linspace(0.0, 1.0, n)
    return np.stack([t, 1.0 - t], axis=1)


def grid_argmin_2(f, n=200_001):
    grid = grid_simplex_2(n)[1:-1]
    vals = np.array([f(p) for p in grid]) if not callable(getattr(f, "vectorized", None)) else f.vectorized(grid)
    k = int(np.argmin(vals))
    return grid[k], vals[k]


def random_units(rng, N, S, stages=1, gamma_range=(0.5, 2.0), spread=0.05):
    """Units built like the case study: a shared base matrix plus per-unit noise."""
    base = rng.dirichlet(np.full(S, 3.0), size=S)
    units = []
    for n in range(N):
        d = base + rng.uniform(0.0, spread, size=(S, S))
        d /= d.sum(axis=1, keepdims=True)
        units.append(UnitProfile.stationary(n, d, rng.uniform(*gamma_range, size=S), stages))
    return units


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def uniform_unit():
    return UnitProfile.stationary(0, np.full((2, 2), 0.5), 1.0, 2)


@pytest.fixture
def toy_costs():
    # L=3, S=2: zero running cost, terminal [0, 1]
    return StageCosts(np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 1.0]]))


@pytest.fixture
def hetero_pair():
    """Two units, S=2, L=3, different defaults and discomfort."""
    a = UnitProfile.stationary(0, [[0.8, 0.2], [0.3, 0.7]], [1.0, 1.5], 2)
    b = UnitProfile.stationary(1, [[0.4, 0.6], [0.5, 0.5]], [3.0, 2.0], 2)
    return [a, b]


# acceptance verdicts, filled by test_acceptance.py and echoed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}: {detail}")
