import numpy as np
import pytest

from emaxmnar import EmaxParams, AlphaParams, TrialRecord, e_step_weights, expand_dataset


@pytest.fixture
def theta_default():
    # placebo rate 10%, asymptote 80%, half-maximal dose 7.5
    return EmaxParams(np.log(1 / 9), np.log(4) - np.log(1 / 9), 7.5)


@pytest.fixture
def balanced12():
    """12 records over 4 dose levels, mixed outcomes, none missing.

    Arm success counts (1, 1, 2, 2) put the likelihood maximizer well in the
    interior: (e0, emax, log ed50) near (-0.84, 1.82, 2.87).
    """
    doses = [0, 0, 0, 7.5, 7.5, 7.5, 30, 30, 30, 225, 225, 225]
    outcomes = [0, 0, 1, 1, 0, 0, 1, 1, 0, 1, 1, 0]
    return [TrialRecord(i, d, y) for i, (d, y) in enumerate(zip(doses, outcomes))]


@pytest.fixture
def pseudo12(balanced12):
    return expand_dataset(balanced12)


def random_pseudo(rng, n=24, p=2, with_missing=True):
    """Random weighted pseudo-data at a random (theta, alpha) weighting."""
    dose_levels = np.array([0.0, 5.0, 25.0, 80.0, 250.0])
    doses = rng.choice(dose_levels, size=n)
    covs = rng.standard_normal((n, p))
    outcomes = rng.integers(0, 2, size=n).astype(float)
    if with_missing:
        mask = rng.random(n) < 0.25
        outcomes = np.where(mask, np.nan, outcomes)
    records = [
        TrialRecord(
            i,
            doses[i],
            None if np.isnan(outcomes[i]) else int(outcomes[i]),
            tuple(covs[i]),
        )
        for i in range(n)
    ]
    theta = EmaxParams(rng.uniform(-2, 2), rng.uniform(-2, 3), rng.uniform(0.5, 120.0))
    scale = np.ones(p + 3)
    scale[p + 1] = 0.02  # keep the dose coefficient commensurate with dose 250
    alpha = AlphaParams(tuple(rng.uniform(-1, 1, p + 3) * scale))
    return e_step_weights(records, theta, alpha), theta, alpha


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
