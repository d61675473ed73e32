import numpy as np
import pytest

from layerfuse.encoder import EncoderConfig
from layerfuse.gradcheck import random_sample
from layerfuse.synthgen import SceneSpec, build_vocab, generate_sample


@pytest.fixture(scope="session")
def vocab():
    return build_vocab()


@pytest.fixture(scope="session")
def small_samples(vocab):
    spec = SceneSpec()
    return [generate_sample(spec, 11, i, vocab) for i in range(24)]


@pytest.fixture
def tiny_cfg():
    return EncoderConfig(d=16, L=2, heads=2, vocab_size=20, max_tokens=8, region_feature_dim=6)


@pytest.fixture
def tiny_sample():
    return random_sample(4, 5, 6, 20, seed=3)


def random_stack(rng: np.random.Generator, L: int, n: int, d: int) -> np.ndarray:
    return rng.normal(size=(L + 1, n, d))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
