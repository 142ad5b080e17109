import numpy as np
import pytest

from aspect_attn.synthetic import SynthConfig, generate


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_synth_config():
    """Small but complete synthetic cohort: every split still has both classes."""
    return SynthConfig(n_speakers=6, utterances={"ddk": 1, "sentences": 1, "monologue": 1},
                       task_t_range={"monologue": (30, 40)}, d=8, h1=8, h2=8, seed=3)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_synth_config, tmp_path_factory):
    return generate(tiny_synth_config, tmp_path_factory.mktemp("tiny"))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS:
        terminalreporter.write_line(line)
