import numpy as np
import pytest

from drivelm import model as M
from drivelm.language import VocabLayout


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    # 2 image tokens + 3 action slots per frame, D=4, M=3 -> vocab 13
    return M.ModelConfig(vocab=13, context=40, layers=2, width=16, heads=2, token_dropout=0.0, seed=3)


@pytest.fixture
def tiny_layout():
    return VocabLayout(4, 3)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Criterion number -> one-line verdict, echoed at the end of the run."""
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
