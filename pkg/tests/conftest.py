import numpy as np
import pytest

from probslot.gmm import GaussianMixture


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_mixture(rng, K=3, d=2, spread=3.0, var_range=(0.2, 1.5)):
    w = rng.dirichlet(np.ones(K))
    mu = rng.normal(0.0, spread, size=(K, d))
    var = rng.uniform(*var_range, size=(K, d))
    return GaussianMixture(w, mu, var)


def central_fd(f, x, step=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        hi, lo = x.copy(), x.copy()
        hi[idx] += step
        lo[idx] -= step
        g[idx] = (f(hi) - f(lo)) / (2 * step)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


# one summary line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES[number] = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
