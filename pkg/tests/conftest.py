import numpy as np
import pytest

from paramdiff.data import generate, two_family_suite
from paramdiff.model import ModelConfig


def tiny_config(**kw):
    base = dict(num_layers_enc=1, num_layers_dec=1, d_model=8, d_ff=12, heads=2,
                vocab_size=24, max_len=10)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    """Two-family suite at toy size: fits a vocab of 24."""
    return generate(two_family_suite(dataset_size=60, max_len=6, vocab_size=24), seed=3,
                    vocab_size=24, valid_size=8, test_size=8)


_ACCEPTANCE = []


def record_acceptance(number, title, ok, detail):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    _ACCEPTANCE.append((number, line))
    return line


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
