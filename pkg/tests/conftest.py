import numpy as np
import pytest
import torch

from deflicker.features import FeatureExtractor

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def extractor():
    """Narrow fixed-random trunk: same topology, cheap enough for oracles."""
    return FeatureExtractor.fixed_random(seed=7, width=0.0625)


@pytest.fixture(scope="session")
def weights(extractor):
    return extractor.weight_arrays()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    """Store one acceptance verdict; printed in the terminal summary."""
    ACCEPTANCE[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
