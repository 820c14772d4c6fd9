import numpy as np
import pytest

from olid_ensemble import tensor as T
from olid_ensemble.rng import RngStream
from olid_ensemble.tokenizer import build_vocab


@pytest.fixture
def check64():
    """64-bit tensors for the duration of a test."""
    with T.check_mode():
        yield


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


@pytest.fixture
def rng():
    return RngStream(42)


@pytest.fixture
def small_vocab():
    corpus = ["you are an idiot", "what a lovely day", "buy more icecream !!!",
              "the coach is a clown", "my friend loves the game"]
    return build_vocab(corpus, 50)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
