import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

MNIST_DIR = os.environ.get("INTENSIVENET_DATA", "/root/data/mnist")

_criteria = []


@pytest.fixture
def criterion():
    """Record one acceptance line; returned callable takes (number, name, passed, detail)."""
    def record(number, name, passed, detail=""):
        line = f"criterion {number:2d} {name}: {'PASS' if passed else 'FAIL'} {detail}".rstrip()
        print(line)
        _criteria.append((number, line))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_criteria):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mnist_dir():
    if not os.path.exists(os.path.join(MNIST_DIR, "t10k-images-idx3-ubyte")):
        pytest.skip(f"MNIST IDX files not found under {MNIST_DIR}")
    return MNIST_DIR
