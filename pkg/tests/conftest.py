import numpy as np
import pytest

import ssde


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


@pytest.fixture
def two_mode_model():
    """Well-behaved 1-D two-mode model used across the suite."""
    rates = ssde.RateMatrix.from_off_diagonal([[0.0, 0.5], [0.5, 0.0]])
    modes = (ssde.ModeDynamics([[-1.0]], [-1.0], [[np.sqrt(0.4)]]),
             ssde.ModeDynamics([[-1.0]], [1.0], [[np.sqrt(0.4)]]))
    init = ssde.InitialLaw([0.5, 0.5], [0.0], [[1.0]])
    obs = ssde.ObservationModel([[0.25]])
    return ssde.ModelParams(rates, modes, init, obs)


def random_stable_mode(rng, n, scale=1.0):
    """Random mode dynamics with eigenvalues pushed into the left half."""
    raw = rng.standard_normal((n, n)) * scale
    A = raw - (np.abs(np.linalg.eigvals(raw).real).max() + 0.5) * np.eye(n)
    b = rng.standard_normal(n)
    q = rng.standard_normal((n, n)) * 0.3
    Q = np.linalg.cholesky(q @ q.T + 0.3 * np.eye(n))
    return ssde.ModeDynamics(A, b, Q)
