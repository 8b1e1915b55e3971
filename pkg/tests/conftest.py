import pytest
import torch

from swinifs.config import micro_config
from swinifs.data import DegradationSpec, ImageRecord
from swinifs.synthetic import synthetic_faces


@pytest.fixture(scope="session")
def faces():
    return synthetic_faces(8, seed=0)


@pytest.fixture(scope="session")
def records(faces):
    return [ImageRecord(f"face{i:02d}", img, lms) for i, (img, lms) in enumerate(faces)]


@pytest.fixture
def micro():
    return micro_config()


@pytest.fixture
def spec4():
    return DegradationSpec(scale=4)


@pytest.fixture(autouse=True)
def _single_thread():
    # results must not depend on intra-op thread scheduling
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(prev)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    from test_acceptance import RESULTS_KEY

    lines = config.stash.get(RESULTS_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
