import numpy as np
import pytest

from hetlb.core import ClusterSpec, TailState


@pytest.fixture
def table_spec():
    return ClusterSpec((0.5, 0.5), (2 / 3, 4 / 3), (2, 2), 0.5)


@pytest.fixture
def skewed_spec():
    return ClusterSpec((0.5, 0.5), (0.2, 1.8), (2, 2), 0.9)


def random_spec(rng, M=None, max_load=0.9):
    """Random stable spec with capacities normalized so that the load is ``rho``."""
    M = M or int(rng.integers(2, 4))
    gamma = rng.dirichlet(np.ones(M) * 2) * 0.9 + 0.1 / M
    gamma = gamma / gamma.sum()
    C = np.sort(rng.uniform(0.2, 2.0, M))
    d = rng.integers(1, 4, M)
    rho = rng.uniform(0.1, max_load)
    lam = rho * float(np.dot(gamma, C))
    return ClusterSpec(tuple(gamma), tuple(C), tuple(int(x) for x in d), lam)


def random_tails(rng, M, K):
    """Valid tail array: sorted uniforms with random plateaus and zeros."""
    u = np.sort(rng.uniform(0, 1, (M, K + 1)), axis=1)[:, ::-1].copy()
    u[:, 0] = 1.0
    cut = rng.integers(1, K + 1, M)
    for j in range(M):
        u[j, cut[j]:] = 0.0
    return TailState(u)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
