import pytest
import torch

from featinv.splitnet import build_model, split


@pytest.fixture(scope="session")
def toy_cnn():
    return build_model("toy_cnn")


@pytest.fixture(scope="session")
def identity_split():
    return split(build_model("identity_cnn"), 1)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
