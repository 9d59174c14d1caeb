import sys
import pytest

from rlprune.data import DataGenConfig
from rlprune.search import build_baseline


@pytest.fixture(scope="session")
def small_baseline():
    """A quickly trained baseline on a reduced dataset, shared by search and CLI tests."""
    return build_baseline(seed=0, data_cfg=DataGenConfig(seed=0, num_per_class=60, noise_sigma=0.5), epochs=10)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
