import numpy as np
import pytest

from ahstn.diffcore import set_debug_checks


@pytest.fixture(autouse=True)
def _debug_nan_checks():
    """Every op output is NaN/Inf-guarded while the suite runs."""
    set_debug_checks(True)
    yield
    set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_symmetric_adjacency(rng, n, density=0.7):
    a = rng.uniform(0.0, 1.0, (n, n))
    a = (a + a.T) / 2.0
    a[a < 1.0 - density] = 0.0
    np.fill_diagonal(a, 0.0)
    if n > 1 and np.any(a.sum(axis=1) == 0.0):
        # guarantee no isolated nodes so tests stay warning-free
        for i in range(n):
            if a[i].sum() == 0.0:
                j = (i + 1) % n
                a[i, j] = a[j, i] = 0.5
    return a
