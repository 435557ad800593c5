import numpy as np
import pytest

from ppacnn.mnist import find_mnist_dir, load_split


@pytest.fixture(scope="session")
def mnist_test():
    try:
        find_mnist_dir()
    except FileNotFoundError:
        pytest.skip("MNIST files not available (set PPA_MNIST_DIR)")
    return load_split("test")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, printed after the run.
CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Call with (number, title, passed, detail); the result is summarized at the end."""
    def record(num, title, passed, detail=""):
        CRITERIA[(num, title)] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num, title in sorted(CRITERIA):
        ok, detail = CRITERIA[(num, title)]
        terminalreporter.write_line(f"criterion {num} {title}: {'PASS' if ok else 'FAIL'}  {detail}")
