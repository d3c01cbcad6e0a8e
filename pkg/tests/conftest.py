import numpy as np
import pytest

from subsidyctl import SubsidyPlanner
from subsidyctl.market import default_profiles, generate_logs

TINY = dict(epochs=3, inverse_epochs=3, ft_epochs=2, diffusion_steps=4, width=8, kernel=3, blocks=1,
            decoder_hidden=(16, 16), batch_size=4, lr_pretrain=1e-3, seed=0)


@pytest.fixture(scope="session")
def profiles():
    return {p.city_id: p for p in default_profiles()}


@pytest.fixture(scope="session")
def tiny_logs(profiles):
    return generate_logs([profiles["A"], profiles["B"]], range(4), 10, seed=0)


@pytest.fixture(scope="session")
def tiny_planner(tiny_logs):
    return SubsidyPlanner(**TINY).fit(tiny_logs)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
