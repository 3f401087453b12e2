import pytest
from helpers import ACCEPTANCE_LINES, random_samples
from hypothesis import settings

from group_attention.synth import DatasetConfig, generate_partition

settings.register_profile("repro", derandomize=True, print_blob=True)
settings.load_profile("repro")


@pytest.fixture
def samples():
    return random_samples(12)


@pytest.fixture(scope="session")
def tiny_data():
    cfg = DatasetConfig(n_train=64, n_val=32, n_eval=32, seed=3)
    return cfg, {p: generate_partition(cfg, p) for p in ("train", "val", "eval")}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
