import numpy as np
import pytest

from microsr.models import DiscriminatorConfig, FeatureExtractorConfig, GeneratorConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_gen_config():
    """Smallest generator with every structural feature present."""
    return GeneratorConfig(num_rrdb=1, base_channels=4, growth_channels=2, convs_per_dense_block=2,
                           dense_blocks_per_rrdb=1)


@pytest.fixture
def toy_gen_config():
    return GeneratorConfig(num_rrdb=2, base_channels=8, growth_channels=4)


@pytest.fixture
def toy_disc_config():
    return DiscriminatorConfig(input_size=32, channel_sequence=(4, 4, 8, 8), dense_units=8)


@pytest.fixture
def toy_extractor_config():
    return FeatureExtractorConfig(blocks=((4, 2), (8, 2), (8, 4)))


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdict lines recorded by tests/test_acceptance.py."""
    lines = [value for key in ("passed", "failed") for rep in terminalreporter.stats.get(key, [])
             if rep.when == "call" for name, value in rep.user_properties if name == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
