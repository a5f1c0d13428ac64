import numpy as np
import pytest
import scipy.sparse as sp

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for an acceptance criterion and assert on it."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def _report(number: int, title: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} [criterion {number:2d}] {title}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split("]")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def path_graph(n):
    rows = np.arange(n - 1)
    A = sp.csr_matrix((np.ones(n - 1), (rows, rows + 1)), shape=(n, n))
    return (A + A.T).tocsr()


def star_graph(n):
    leaves = np.arange(1, n)
    A = sp.csr_matrix((np.ones(n - 1), (np.zeros(n - 1, int), leaves)), shape=(n, n))
    return (A + A.T).tocsr()
