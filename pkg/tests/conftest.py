import numpy as np
import pytest
from hypothesis import settings

from treespec import Speculator, SpeculatorConfig, TargetConfig, TargetModel

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_target(seed=0, vocab=20, hidden=16, heads=2, layers=2, max_seq_len=96, dtype="float64"):
    cfg = TargetConfig(vocab_size=vocab, hidden_size=hidden, num_heads=heads, num_layers=layers,
                       max_seq_len=max_seq_len, dtype=dtype)
    return TargetModel.random(cfg, seed)


def tiny_speculator(target, seed=0, **kw):
    return Speculator.create(target, SpeculatorConfig(**kw), seed)


@pytest.fixture
def target64():
    return tiny_target()


@pytest.fixture
def spec64(target64):
    return tiny_speculator(target64, init_noise=0.3)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[cid])
