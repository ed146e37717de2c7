import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

TINY_ENCODER = {"channels": [8, 8], "strides": [2, 2], "norm": "group"}


@pytest.fixture(scope="session")
def phantoms():
    from ssl_alpnet.data import make_phantom_dataset

    return make_phantom_dataset(n_volumes=5, n_slices=12, size=32, n_classes=3, rng=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
