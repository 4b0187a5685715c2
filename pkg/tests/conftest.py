import numpy as np
import pytest

from loocite import ContextPartition, ModelConfig, ReferenceBackend, build_prompt, init_reference_model
from loocite.context import DEFAULT_TEMPLATE

WORDS = ("river stone willow cloud apple lamp orbit violet quartz ember north seven cedar "
         "harbor pixel tundra maple copper signal meadow").split()


def random_sources(rng, n, t_lo=4, t_hi=12):
    """``n`` distinct sources whose span length (incl. separator) lies in [t_lo, t_hi]."""
    out = []
    while len(out) < n:
        length = int(rng.integers(t_lo, t_hi + 1)) - 1
        text = ""
        while len(text) < length:
            text += rng.choice(WORDS) + " "
        text = text[:length].strip() or "x"
        text = text + "." * (length - len(text))
        if text not in out:
            out.append(text)
    return out


def random_layout(rng, n_sources, t_lo=4, t_hi=12, group_size=None):
    sources = random_sources(rng, n_sources, t_lo, t_hi)
    if group_size:
        groups = [sources[i:i + group_size] for i in range(0, n_sources, group_size)]
        part = ContextPartition.from_lists(groups)
    else:
        part = ContextPartition.flat(sources)
    return build_prompt(DEFAULT_TEMPLATE, part, "what is it?")


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=260, max_seq_len=256)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return init_reference_model(tiny_config, seed=7)


@pytest.fixture(scope="session")
def tiny_backend(tiny_model):
    return ReferenceBackend(tiny_model)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
