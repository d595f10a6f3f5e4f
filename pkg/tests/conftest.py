import numpy as np
import pytest

from entropy_steer.experiments import toy_instance
from entropy_steer.model import ModelConfig, PromptSpec, init_random


@pytest.fixture
def toy():
    return toy_instance(0)


@pytest.fixture
def small_model():
    cfg = ModelConfig(vocab_size=11, d_model=16, n_layers=2, n_heads=4, n_kv_heads=2, d_head=4, d_ff=32, max_seq=64, seed=5)
    return init_random(cfg)


@pytest.fixture
def prompt10():
    return PromptSpec(tokens=(3, 1, 4, 1, 5, 9, 2, 6, 5, 3), video_span=(2, 6))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
