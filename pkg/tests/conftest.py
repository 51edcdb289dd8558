import numpy as np
import pytest

from mmrobust.train import TrainConfig, train
from mmrobust.world import WorldConfig, generate_splits


@pytest.fixture(scope="session")
def world():
    return WorldConfig()


@pytest.fixture(scope="session")
def splits(world):
    return generate_splits(world, 256, 48, seed=11)


@pytest.fixture(scope="session")
def trained(splits):
    """A small clean model that retrieves well above chance."""
    cfg = TrainConfig(regime="clean", steps=300, batch_size=64, optimizer="adamw", lr=3e-3, weight_decay=1.0, seed=5)
    params, _ = train(cfg, splits[0])
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one verdict line per acceptance criterion."""
    return request.config.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
