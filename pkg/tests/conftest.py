import numpy as np
import pytest

from cerd.synth import SyntheticSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    return generate(SyntheticSpec(n_subjects=120, seed=7))


def pytest_addoption(parser):
    parser.addoption("--skip-slow", action="store_true", default=False, help="skip training-heavy acceptance runs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: training-heavy test (minutes)")


def pytest_collection_modifyitems(config, items):
    if not config.getoption("--skip-slow"):
        return
    skip = pytest.mark.skip(reason="--skip-slow given")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)
