import numpy as np
import pytest
from hypothesis import settings

from refbcm.causal import CausalParams
from refbcm.trial import TrialDataset, VisitSchedule

settings.register_profile("refbcm", deadline=None, max_examples=40)
settings.load_profile("refbcm")


def random_spd(rng, k, scale=1.0):
    a = rng.normal(size=(k, k))
    return scale * (a @ a.T / k + 0.5 * np.eye(k))


def random_params(rng, j_max=4, k0=None, pi=True):
    return CausalParams(
        mu_active=rng.normal(size=j_max),
        mu_control=rng.normal(size=j_max),
        alpha=rng.normal(scale=0.5, size=j_max),
        sigma=random_spd(rng, j_max),
        k0=rng.normal() if k0 is None else k0,
        pi=rng.dirichlet(np.ones(j_max)) if pi else None,
    )


def toy_trial(rng, n=20, j_max=3, post_observed=True):
    """Small trial with every kind of record: completers, ICE with observed
    and with missing post-ICE blocks, intermittent control gaps."""
    sched = VisitSchedule(tuple(4.0 * np.arange(j_max + 1)))
    active = np.arange(n) % 2 == 1
    d = np.full(n, j_max)
    d[[0, 1, 2, 3, 5, 7]] = [1, 1, 2, 2, 1, 2]
    y = rng.normal(size=(n, j_max))
    y[1, 1:] = np.nan
    y[5, 1:] = np.nan
    if not post_observed:
        y[3, 2:] = np.nan
        y[0, 1:] = np.nan
        y[7, 2:] = np.nan
    y[2, 2] = np.nan
    y[4, 0] = np.nan
    return TrialDataset.from_arrays(sched, [f"p{i}" for i in range(n)], active,
                                    rng.normal(size=n), y, d)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# lines printed by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
