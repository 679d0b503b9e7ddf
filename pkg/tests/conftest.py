import numpy as np
import pytest

from dba.model import default_config
from dba.tasks import TaskSpec
from dba.train import train

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


MAJORITY = TaskSpec("majority", n=48, vocab=8, train_size=2000, val_size=500, seed=0)


@pytest.fixture(scope="session")
def majority_model(tmp_path_factory):
    """DBA classifier trained on the n=48 majority task (30 epochs)."""
    out = tmp_path_factory.mktemp("majority_dba")
    cfg = default_config(MAJORITY, "dba", d=32, d_p=8, d_in=12)
    report = train(cfg, MAJORITY, epochs=30, seed=5, out_dir=out)
    return report
