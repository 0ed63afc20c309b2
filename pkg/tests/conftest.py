import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_spd(rng, n=4, batch=None, lo=0.5, hi=3.0):
    """SPD matrices with eigenvalues in [lo, hi]."""
    shape = (n, n) if batch is None else (batch, n, n)
    q, _ = np.linalg.qr(rng.normal(size=shape))
    lam = rng.uniform(lo, hi, size=shape[:-1])
    return (q * lam[..., None, :]) @ np.swapaxes(q, -1, -2)


def random_chol(rng, n=4, batch=None):
    shape = (n, n) if batch is None else (batch, n, n)
    low = np.tril(rng.normal(scale=0.5, size=shape), -1)
    diag = rng.uniform(0.5, 1.5, size=shape[:-1])
    idx = np.arange(n)
    low[..., idx, idx] = diag
    return low


# acceptance criteria outcomes, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
