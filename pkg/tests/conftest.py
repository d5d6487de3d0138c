import numpy as np
import pytest

from qpselect.core import Dataset


def random_dataset(rng, n, p, family="linear", intercept=True, beta=None, scale=0.5):
    X = rng.standard_normal((n, p))
    if intercept:
        X[:, 0] = 1.0
    if beta is None:
        beta = scale * rng.standard_normal(p)
    eta = X @ beta
    if family == "linear":
        y = eta + rng.standard_normal(n)
    else:
        y = rng.poisson(np.exp(np.clip(eta, -5, 5))).astype(float)
    return Dataset.from_arrays(y, X)


@pytest.fixture
def rng():
    return np.random.default_rng(20261018)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[-1])):
            terminalreporter.write_line(line)
