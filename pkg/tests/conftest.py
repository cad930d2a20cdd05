import numpy as np
import pytest

from qrftune.data import ColumnSpec, Dataset, ForestParams, continuous_columns
from qrftune.forest import fit_forest


def make_regression(n=200, p=4, seed=0, cat=False):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, p))
    cols = list(continuous_columns(p))
    if cat:
        X[:, 0] = rng.integers(0, 3, n)
        cols[0] = ColumnSpec("x1", "categorical", 3)
    y = 3 * X[:, 0] - 2 * X[:, 1] + rng.normal(0, 0.5, n)
    return Dataset(X, y, tuple(cols))


def make_survival(n=200, p=4, seed=0, cens_scale=3.0, cat=False):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, p))
    cols = list(continuous_columns(p))
    if cat:
        X[:, 0] = rng.integers(0, 3, n)
        cols[0] = ColumnSpec("x1", "categorical", 3)
    T = np.exp(0.8 * X[:, 0] - 0.5 * X[:, 1]) * rng.weibull(2.0, n)
    C = rng.exponential(cens_scale, n)
    return Dataset(X, np.minimum(T, C), tuple(cols), events=(T <= C).astype(int))


@pytest.fixture(scope="session")
def reg_data():
    return make_regression()


@pytest.fixture(scope="session")
def surv_data():
    return make_survival()


@pytest.fixture(scope="session")
def reg_forest(reg_data):
    return fit_forest(reg_data, ForestParams(2, 5, 100, seed=11))


@pytest.fixture(scope="session")
def surv_forest(surv_data):
    return fit_forest(surv_data, ForestParams(2, 5, 100, seed=11))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        ok, detail = RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} | {detail}")
