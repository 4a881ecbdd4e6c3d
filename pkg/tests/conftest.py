import numpy as np
import pytest

from sats.datamodel import ClassSpace, LabeledImage


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cs3():
    return ClassSpace(num_known=3, num_private=2, head_classes=frozenset({0, 2}))


def make_image(rng, h=8, w=8, num_known=3, ignore_frac=0.0, name=""):
    pixels = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    label = rng.integers(0, num_known, (h, w)).astype(np.uint8)
    if ignore_frac:
        label[rng.random((h, w)) < ignore_frac] = 255
    return LabeledImage(pixels, label, name)


@pytest.fixture
def tiny_bench():
    """Small generated benchmark shared by the trainer and CLI tests."""
    from sats.synthbench import BenchConfig, generate_benchmark

    return generate_benchmark(BenchConfig(image_size=16, train_count=6, val_count=4, seed=3))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
