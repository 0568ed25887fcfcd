import numpy as np
import pytest


def numeric_grad(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every element of ``x`` (mutated and restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(f())
        flat[i] = orig - eps
        minus = float(f())
        flat[i] = orig
        g.reshape(-1)[i] = (plus - minus) / (2 * eps)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    assert err.max() < rtol, f"max relative error {err.max():.3g}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed again at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
