import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "dfcm", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("dfcm")


def fd_grad(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty(x.size)
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_jac(f, x, h=1e-6):
    """Central finite-difference Jacobian, one column per input."""
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))).ravel(order="F") / (2 * h))
    return np.column_stack(cols)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# ---------------------------------------------------------------------------
# acceptance report
# ---------------------------------------------------------------------------
CRITERIA: dict[int, str] = {}


def report_criterion(k: int, ok: bool, detail: str) -> None:
    """Record and print the one-line verdict of acceptance criterion ``k``."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}"
    CRITERIA[k] = line
    print(line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    name = item.name
    if rep.when == "call" and name.startswith("test_criterion_") and rep.failed:
        k = int(name.split("_")[2])
        # an exception before the verdict still gets a line
        CRITERIA.setdefault(k, f"FAIL criterion {k}: {call.excinfo.typename}: {call.excinfo.value}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[k])
