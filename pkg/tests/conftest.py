from __future__ import annotations

import numpy as np
import pytest

from emvalm.filtering import MomentSchedule, MomentSet


def random_moment_set(rng: np.random.Generator, deterministic_liability: bool = False) -> MomentSet:
    """Random per-period moments with F1 > 0 guaranteed by construction."""
    a0 = rng.uniform(0.95, 1.1)
    v0 = rng.uniform(0.0, 0.01)
    a1 = rng.uniform(-0.05, 0.12)
    v1 = rng.uniform(0.01, 0.05)
    a2 = rng.uniform(0.9, 1.1)
    v2 = 0.0 if deterministic_liability else rng.uniform(0.0, 0.02)
    return MomentSet(a0=a0, b0=a0 * a0 + v0, a1=a1, b1=a1 * a1 + v1, a2=a2, b2=a2 * a2 + v2)


def random_schedule(
    rng: np.random.Generator, horizon: int, deterministic_liability: bool = False
) -> MomentSchedule:
    return MomentSchedule(
        sets=tuple(random_moment_set(rng, deterministic_liability) for _ in range(horizon)),
        flavor="regime",
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240810)


REFERENCE_P = ((0.9986, 0.0014), (0.0114, 0.9886))
