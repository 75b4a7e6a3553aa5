import numpy as np
import pytest

from textrich.codec import Vocab
from textrich.model import TextRichVLM, tiny_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def vocab():
    return Vocab(1000)


@pytest.fixture
def tiny_model():
    return TextRichVLM(tiny_config(), seed=0, dtype=np.float64)


def rand_image(rng, size, batch=None):
    shape = (size, size, 3) if batch is None else (batch, size, size, 3)
    return rng.integers(0, 256, size=shape, dtype=np.uint8)


def trainable_tiny_config():
    """Tiny dims with room for real synthetic prompts; 32 px so every stage grid exceeds one token."""
    cfg = tiny_config(bins=10)
    cfg.encoder.input_size = 32
    cfg.decoder.max_seq = 96
    return cfg


@pytest.fixture(scope="session")
def tiny_spotting():
    from textrich.synth.generators import GeneratorConfig, generate_dataset

    return generate_dataset({"spotting": 4}, GeneratorConfig(word_count=(1, 1), word_length=(2, 3), bins=10), seed=0)


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture(scope="session")
def verdicts(pytestconfig):
    """Acceptance outcome lines, echoed in the terminal summary."""
    return pytestconfig.stash[_VERDICTS]


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
