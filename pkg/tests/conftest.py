import numpy as np
import pytest

from cosbal.data import CosDataset


def random_dataset(rng, m=8, p=2, q=2, size_range=(2, 6), treated=None, shift=0.0):
    """Small random clustered dataset; treated clusters get covariates shifted by ``shift``."""
    sizes = rng.integers(size_range[0], size_range[1] + 1, m)
    if treated is None:
        treated = np.zeros(m, bool)
        treated[rng.choice(m, max(1, m // 3), replace=False)] = True
    cl = np.repeat(np.arange(m), sizes)
    n = len(cl)
    X = rng.normal(size=(n, p)) + shift * treated[cl][:, None]
    W = rng.normal(size=(m, q)) + shift * treated[:, None]
    y = X.sum(axis=1) + W[cl].sum(axis=1) + rng.normal(size=m)[cl] + rng.normal(size=n)
    return CosDataset([f"u{i}" for i in range(n)], cl, X, y, np.arange(m), treated, W,
                      [f"x{j}" for j in range(p)], [f"w{j}" for j in range(q)])


def mirrored_dataset(rng, m_half=4, p=2, q=2, effect=0.0):
    """Every treated cluster has a control twin with identical covariates and outcomes."""
    sizes = rng.integers(3, 7, m_half)
    sizes = np.concatenate([sizes, sizes])
    cl = np.repeat(np.arange(2 * m_half), sizes)
    half = int(sizes[:m_half].sum())
    X = rng.normal(size=(half, p))
    X = np.vstack([X, X])
    W = rng.normal(size=(m_half, q))
    W = np.vstack([W, W])
    y = X.sum(axis=1) + W[cl].sum(axis=1) + np.tile(rng.normal(size=half), 2)
    treated = np.arange(2 * m_half) < m_half
    y = y + effect * treated[cl]
    return CosDataset(np.arange(len(cl)), cl, X, y, np.arange(2 * m_half), treated, W,
                      [f"x{j}" for j in range(p)], [f"w{j}" for j in range(q)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small(rng):
    return random_dataset(rng, m=9, shift=0.5)


@pytest.fixture
def mirrored(rng):
    return mirrored_dataset(rng)


# criterion number -> (passed, description); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {text}")
