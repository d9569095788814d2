import sys

import numpy as np
import pytest

from bleedseg.config import DataConfig, build_synthetic_split
from bleedseg.model import ModelConfig


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance verdict lines, which capture would otherwise hide."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance results")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_model_config():
    return ModelConfig(depth=2, base_channels=4)


@pytest.fixture(scope="session")
def tiny_split():
    """Small synthetic cohort shared by training-path tests (side 32)."""
    return build_synthetic_split(DataConfig(
        train_patients=2, val_patients=1,
        images_per_patient=4, val_images_per_patient=2, side=32))


def rel_err(a: float, b: float) -> float:
    denom = max(abs(a), abs(b))
    return 0.0 if denom == 0 else abs(a - b) / denom


def random_mask(rng: np.random.Generator, side: int, p: float) -> np.ndarray:
    return (rng.random((side, side)) < p).astype(np.uint8)
