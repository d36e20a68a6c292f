import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from icepose.dataset import DatasetConfig, build_dataset  # noqa: E402

SMALL = DatasetConfig(seed=5, subjects=(2, 1, 1), samples=(32, 8, 8))


@pytest.fixture(scope="session")
def small_config():
    return SMALL


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    return build_dataset(SMALL, tmp_path_factory.mktemp("small_ds"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
