import numpy as np
import pytest
from hypothesis import settings

from clmdetour.model import ModelConfig, init_model

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def tiny_config():
    return ModelConfig(n_layers=2, hidden_dim=16, n_heads=2, vocab_size=24, max_seq_len=16)


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config, seed=0)


def random_ids(rng, shape, vocab, low=2):
    return rng.integers(low, vocab, size=shape)


def perturbed_std(model, std, seed=0):
    """Copy of ``model`` with every parameter jittered, so norms/biases are non-trivial."""
    rng = np.random.default_rng(seed)
    out = model.copy()
    for k, v in out.params.items():
        v += (std * rng.standard_normal(v.shape)).astype(v.dtype)
    return out


# -- acceptance reporting ----------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
