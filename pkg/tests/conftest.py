import logging
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lwfedssl.model import ModelSpec  # noqa: E402

logging.getLogger("lwfedssl").setLevel(logging.ERROR)


@pytest.fixture
def tiny_spec():
    return ModelSpec(input_dim=6, num_layers=2, block_hidden_dim=5, block_out_dim=4, proj_hidden=8, proj_out=4, pred_hidden=8)


@pytest.fixture
def square_spec():
    # equal-size blocks (input_dim == block_out_dim) so weight transfer applies
    return ModelSpec(input_dim=16, num_layers=3, block_hidden_dim=12, block_out_dim=16, proj_hidden=16, proj_out=8, pred_hidden=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(acceptance.RESULTS, key=lambda s: int(s.split("]")[1].split(".")[0])):
        terminalreporter.write_line(line)
