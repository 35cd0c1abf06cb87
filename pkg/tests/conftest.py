import numpy as np
import pytest

from chronident import ClockParams, EnsembleParams, assemble_ensemble


@pytest.fixture(scope="session")
def maser_params() -> EnsembleParams:
    """Four-AHM reference scenario used across the suite."""
    clocks = (
        ClockParams(q1=1e-27, q2=1e-36, d=0.0),
        ClockParams(q1=1.5e-27, q2=2e-35, d=8e-21),
        ClockParams(q1=5e-27, q2=1.5e-35, d=7.5e-21),
        ClockParams(q1=7e-27, q2=2.5e-35, d=3e-21),
    )
    R = 1e-35 * np.array([[9.0, 6.0, 5.0], [6.0, 8.7, 4.0], [5.0, 4.0, 9.5]])
    return EnsembleParams(clocks=clocks, R=R)


@pytest.fixture(scope="session")
def maser_model(maser_params):
    return assemble_ensemble(maser_params, 5.0)


def random_params(rng: np.random.Generator, n: int, balanced: bool = True) -> EnsembleParams:
    """Random positive ensemble parameters; balanced keeps scales O(1)."""
    if balanced:
        clocks = tuple(
            ClockParams(
                q1=float(rng.uniform(0.5, 2.0)),
                q2=float(rng.uniform(0.5, 2.0)),
                d=float(rng.uniform(-1.0, 1.0)),
            )
            for _ in range(n)
        )
        root = rng.uniform(-1.0, 1.0, (n - 1, n - 1))
        R = root @ root.T + 2.0 * np.eye(n - 1)
    else:
        clocks = tuple(
            ClockParams(
                q1=float(rng.uniform(0.5, 8.0) * 1e-27),
                q2=float(rng.uniform(0.1, 3.0) * 1e-35),
                d=float(rng.uniform(-1.0, 1.0) * 1e-20),
            )
            for _ in range(n)
        )
        root = rng.uniform(-1.0, 1.0, (n - 1, n - 1)) * 1e-17
        R = root @ root.T + 9e-35 * np.eye(n - 1)
    return EnsembleParams(clocks=clocks, R=R)
