import numpy as np
import pytest

# (criterion, passed, detail) lines collected by test_acceptance.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


def extended(*arrays):
    """Copies in extended precision, so central differences are not swamped by roundoff."""
    out = tuple(np.array(a, dtype=np.longdouble) for a in arrays)
    return out if len(out) > 1 else out[0]


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f with respect to every entry of x (in place).

    Pass arrays from ``extended`` that f closes over.
    """
    g = np.zeros(x.shape, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(analytic, numeric, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor): relative, with an absolute floor near zero."""
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def unit_rows(rng, n, d):
    M = rng.normal(size=(n, d))
    return M / np.linalg.norm(M, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
