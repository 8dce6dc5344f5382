import numpy as np
import pytest

from polyrbf.geometry import BasisConfig
from polyrbf.gradients import GradientScheme
from polyrbf.protocols import hcp_scheme, multishell_scheme


@pytest.fixture(scope="session")
def hcp():
    return hcp_scheme()


@pytest.fixture(scope="session")
def small_scheme():
    """Five shells x 30 directions plus 3 b0 frames."""
    return multishell_scheme((500.0, 1000.0, 1500.0, 2000.0, 3000.0), 30, 3, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_unit(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_config(rng, N=None, K=None):
    N = int(rng.integers(1, 16)) if N is None else N
    K = int(rng.integers(1, 6)) if K is None else K
    return BasisConfig.create(N, K, b_scale=float(rng.uniform(500, 4000)),
                              h=float(rng.uniform(0.2, 2.5)), taper_mult=float(rng.uniform(1, 4)))


def scheme_of(bvals, bvecs):
    return GradientScheme(np.asarray(bvals, float), np.asarray(bvecs, float))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
