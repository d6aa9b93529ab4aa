import numpy as np
import pytest

from sccf.fism import FismConfig, FismModel
from sccf.numerics import seeded_rng
from sccf.sasrec import SasrecConfig, SasrecModel
from sccf.synthetic import clustered_corpus


@pytest.fixture
def rng():
    return seeded_rng(0)


@pytest.fixture(scope="session")
def toy_corpus():
    return clustered_corpus(n_users=60, n_items=30, n_clusters=3, min_len=6, max_len=12, seed=3)


@pytest.fixture
def fism_model(toy_corpus):
    return FismModel.init(toy_corpus.n_items, FismConfig(dim=8), seeded_rng(1))


@pytest.fixture
def sasrec_model(toy_corpus):
    cfg = SasrecConfig(maxlen=10, dim=8, layers=2, heads=2, dropout=0.0)
    return SasrecModel.init(toy_corpus.n_items, cfg, seeded_rng(2))


def perturb(store, scale, seed=0):
    """Replace every tensor with larger random values so gradients are not tiny."""
    r = seeded_rng(seed)
    for name in store.names():
        v = store[name]
        v[...] = r.normal(0, scale, size=v.shape).astype(v.dtype)
    return store


def assert_rows_unit(reps, valid):
    norms = np.linalg.norm(reps[valid].astype(np.float64), axis=1)
    assert np.allclose(norms, 1.0, atol=1e-6)


# one "PASS|FAIL <criterion> ..." line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
