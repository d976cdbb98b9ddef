import numpy as np
import pytest

from findkit.bench import build_corpus
from findkit.interface import InterfaceConfig
from findkit.model import FindModel
from findkit.trainer import TrainData


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    return InterfaceConfig(d=16, L=2, heads=2, n_obj=6)


@pytest.fixture(scope="session")
def small_model(small_cfg):
    return FindModel.create(small_cfg, seed=3)


@pytest.fixture(scope="session")
def corpus():
    return build_corpus(8, seed=5, p_replace=0.5)


@pytest.fixture(scope="session")
def data(corpus):
    return TrainData({s.scene_id: s for s in corpus.scenes}, corpus.records)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
