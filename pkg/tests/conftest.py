import numpy as np
import pytest

from vtsent.dataset import SENTIMENT_CLASSES, Dataset, Sample


def build_dataset(labels, corpus="mvsa", classes=SENTIMENT_CLASSES, prefix="x"):
    samples = [Sample(f"{prefix}{i:04d}", f"text {i}", f"img/{i}.jpg", int(y), len(classes))
               for i, y in enumerate(labels)]
    return Dataset(samples, corpus, classes)


@pytest.fixture
def make_ds():
    return build_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
