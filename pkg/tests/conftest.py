import numpy as np
import pytest

from auattn.dataio import SyntheticSpec, generate_synthetic, load_dataset
from auattn.model import ModelConfig

TINY = ModelConfig(input_size=16, block_filters=(4, 4, 8, 8, 8, 8),
                   pool_schedule="110000", attention_hidden=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """64 synthetic 32x32 samples on disk, loaded downsized to 16x16."""
    root = tmp_path_factory.mktemp("synth16")
    generate_synthetic(SyntheticSpec(n=64, seed=3, image_size=32,
                                     prevalence=(0.3,) * 12, noise=0.05), root)
    return root


@pytest.fixture(scope="session")
def tiny_index(tiny_synth):
    return load_dataset(tiny_synth, image_size=16, cache=True)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one status line per acceptance criterion, echoed at session end."""
    def report(number, passed, detail):
        status = "PASS" if passed is True else ("FAIL" if passed is False else passed)
        line = f"criterion {number:>2}: {status} - {detail}"
        print(line)
        ACCEPTANCE_LINES.append((number, line))
        return passed
    return report


def _criterion_order(item):
    label = str(item[0])
    digits = label.rstrip("abcdefghijklmnopqrstuvwxyz")
    return int(digits), label


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=_criterion_order):
            terminalreporter.write_line(line)
