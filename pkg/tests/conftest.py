import sys
from pathlib import Path

import numpy as np
import pytest
import torch

# test oracles live next to the tests
sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_flow():
    """Pyramid flow estimator pre-trained on uniformly shifted textures (shared, ~40 s)."""
    from stereosc.decoder import PyramidFlow
    from stereosc.training import train_flow_on_shifts

    torch.manual_seed(0)
    est = PyramidFlow(levels=3, width=16)
    train_flow_on_shifts(est, seed=0)
    return est


# criterion number -> (passed, summary line); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {k}: {line}")
