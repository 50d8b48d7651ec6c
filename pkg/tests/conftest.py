import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from smad.data import generate_corpus, normalize  # noqa: E402
from smad.model import ModelConfig  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d_model=16, d_ff=32, n_heads=2, n_enc_layers=2, n_dec_layers=2, vocab_size=9)


@pytest.fixture(scope="session")
def tiny_corpus():
    corpus, _ = normalize(generate_corpus(3, 30, 5))
    return corpus


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
