import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from driftdet import (AnnotatedImage, ArchConfig, BoundingBox, Dataset,
                      SceneSpec, TrainConfig, build_experiment, micro_arch)


@pytest.fixture(scope="session")
def tiny_splits():
    """Small fog-shift experiment shared by the fast integration tests."""
    spec = SceneSpec(seed=11, shift_kind="fog", shift_severity=2.0)
    return build_experiment(spec, 12, 12, 6)


@pytest.fixture(scope="session")
def tiny_train_config():
    return TrainConfig(seed=11, burn_in_iterations=4, adapt_iterations=4,
                       batch_source=3, batch_target=3, checkpoint_every=0,
                       eval_every=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance-criteria verdict lines past output capture."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT_LINES", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


def make_image(size=32, boxes=(), domain=0, value=0.3):
    """A flat synthetic image with the given (x1, y1, x2, y2, cls) boxes."""
    pixels = np.full((size, size, 3), value, dtype=np.float32)
    annotations = [(BoundingBox(*b[:4]), int(b[4])) for b in boxes]
    return AnnotatedImage(pixels=pixels, annotations=annotations, domain=domain)
