import numpy as np
import pytest

from rulforge.model import ModelConfig
from rulforge.preprocess import RawCycleSignals
from rulforge.synth import SynthConfig, synthesize_cells
from rulforge.training import TrainConfig

TINY = ModelConfig(H=2, alstm_hidden=4, odelstm_hidden=8)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def fast_train():
    return TrainConfig(epochs=2, batch_size=32, n_runs=1)


@pytest.fixture(scope="session")
def small_cells():
    return synthesize_cells(SynthConfig(n_cells=4, seed=3, life_min=60, life_max=90))


def make_cycle(n=64, seed=0, discharge=True):
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.uniform(0.5, 1.5, n))
    I = rng.normal(0.0, 1.0, n)
    V = 3.0 + 0.1 * rng.normal(size=n)
    Q = np.linspace(0.0, 1.0, n) + 0.01 * rng.normal(size=n)
    mask = np.r_[np.zeros(n // 2, bool), np.ones(n - n // 2, bool)] if discharge else None
    return RawCycleSignals(t, I, V, Q, mask)


TINY_CONFIG = """\
model.H = 2
model.alstm_hidden = 4
model.odelstm_hidden = 8
train.epochs = 1
train.batch_size = 32
train.n_runs = 1
prep.sample_stride = 6
"""


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory):
    """Two small synthetic datasets written by the CLI plus a tiny-model config."""
    from rulforge.cli import main
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--cells", "4", "--seed", "1", "--out", str(root / "d1"),
                 "--life-min", "60", "--life-max", "90"]) == 0
    assert main(["synth", "--cells", "4", "--seed", "2", "--out", str(root / "d2"), "--prefix", "alt",
                 "--variant", "multi_discharge", "--life-min", "60", "--life-max", "90"]) == 0
    (root / "tiny.cfg").write_text(TINY_CONFIG)
    return root


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
