import numpy as np
import pytest
import torch
from hypothesis import settings

from gmcopula.univariate import Gmm1dParams

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

torch.set_num_threads(max(1, min(4, torch.get_num_threads())))


def random_gmm(rng, k=None, spread=3.0):
    k = int(rng.integers(1, 6)) if k is None else k
    w = rng.dirichlet(np.ones(k) * 2.0)
    w = w / w.sum()
    return Gmm1dParams(w, rng.normal(0.0, spread, k), rng.uniform(0.3, 2.0, k))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """criterion number -> (passed, detail); printed at the end of the run."""
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
