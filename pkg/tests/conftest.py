import numpy as np
import pytest

from clinconcept.lm import LmConfig, train_lm
from clinconcept.synthetic import SyntheticSpec, generate_synthetic


def tiny_lm_config(**overrides):
    base = dict(char_embed_dim=4, filter_widths=[1, 2, 3], filter_counts=[3, 3, 4],
                highway_layers=1, projection_dim=5, lstm_hidden=6, vocab_min_count=1,
                epochs=1, batch_size=16, max_token_chars=12)
    base.update(overrides)
    return LmConfig(**base).validate()


def random_params(params, rng, scale=0.5, dtype=np.float64):
    """Perturb every parameter so no gradient is trivially zero."""
    return {k: (v + rng.uniform(-scale, scale, np.shape(v))).astype(dtype) for k, v in params.items()}


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic(SyntheticSpec(sentence_count=120, seed=11))


@pytest.fixture(scope="session")
def tiny_lm(small_synth):
    sents = [s.tokens for s in small_synth.sentences]
    return train_lm(sents[:100], sents[100:], tiny_lm_config(), seed=3)


# one line per acceptance criterion, filled by test_acceptance and shown after the run
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
