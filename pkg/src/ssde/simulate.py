"""Forward simulation of the generative model.

Mode paths come from the Doob-Gillespie algorithm, the subordinated
diffusion from Euler-Maruyama with the mode frozen at each step's left
endpoint, and observations add Gaussian noise at grid-aligned times.

All functions are pure given an ``numpy.random.Generator``; pass distinct
generators (see :func:`spawn_rngs`) to parallel callers, never share one.
Exponential and categorical draws go through the inverse CDF so a seed
pins the exact sample path.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import _kernels
from .model import (DiffusionPath, MjpPath, ModeDynamics, ObservationSet,
                    RateMatrix, TimeGrid)


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent generators from one 64-bit seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def categorical(rng: np.random.Generator, p: np.ndarray) -> int:
    """Single draw from an unnormalized weight vector via inverse CDF."""
    c = np.cumsum(p)
    total = c[-1]
    if not (total > 0.0 and np.isfinite(total)):
        raise ValueError("categorical weights must have positive finite sum")
    return int(np.searchsorted(c, rng.random() * total, side="right"))


def exponential(rng: np.random.Generator, rate: float) -> float:
    """Exponential waiting time via inverse CDF; rate must be positive."""
    return -math.log1p(-rng.random()) / rate


def simulate_mjp(rates: RateMatrix, pi: np.ndarray, horizon: float,
                 rng: np.random.Generator) -> MjpPath:
    """Exact mode-path sample: categorical start, exponential sojourns,
    categorical jumps, truncated at the horizon.  A mode with zero exit
    rate is absorbing."""
    if horizon <= 0.0:
        raise ValueError("horizon T must be positive")
    mat = rates.matrix
    k = rates.n_modes
    z = categorical(rng, np.asarray(pi, dtype=float))
    t = 0.0
    jump_times = []
    states = [z]
    while True:
        exit_rate = -mat[z, z]
        if exit_rate <= 0.0:
            break
        t += exponential(rng, exit_rate)
        if t > horizon:
            break
        row = mat[z].copy()
        row[z] = 0.0
        z = categorical(rng, row)
        jump_times.append(t)
        states.append(z)
    return MjpPath(np.array(jump_times), np.array(states, dtype=np.int64),
                   horizon, k)


def simulate_ssde(z: MjpPath, modes: Sequence[ModeDynamics], y0: np.ndarray,
                  grid: TimeGrid, rng: np.random.Generator) -> DiffusionPath:
    """Euler-Maruyama sample of the diffusion along a fixed mode path.

    ``y_{l+1} = y_l + (A(z_l) y_l + b(z_l)) h + Q(z_l) sqrt(h) eps_l`` with
    the mode read at the left endpoint of each cell.
    """
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    if not np.all(np.isfinite(y0)):
        raise ValueError("y0 contains non-finite values")
    n = y0.shape[0]
    L = grid.n_steps
    mode_cell = z.modes_on_grid(grid)[:L]
    A = np.stack([m.A for m in modes])
    b = np.stack([m.b for m in modes])
    Q = np.stack([m.Q for m in modes])
    eps = rng.standard_normal((L, n))
    y_out = np.empty((L + 1, n))
    fail = _kernels.euler_maruyama_prior(grid.step, mode_cell, A, b, Q, y0,
                                         eps, y_out)
    if fail >= 0:
        raise FloatingPointError(
            f"non-finite state at grid step {fail}; reduce the step size")
    return DiffusionPath(y_out, grid)


def generate_observations(y: DiffusionPath, times: np.ndarray,
                          sigma_x: np.ndarray,
                          rng: np.random.Generator) -> ObservationSet:
    """Noisy snapshots ``x_i = y(t_i) + N(0, Sigma_x)``.

    Every requested time must sit on the path's grid after snapping.  An
    all-zero ``sigma_x`` is accepted here (and only here) as the noiseless
    limit.
    """
    times = np.asarray(times, dtype=float)
    sigma_x = np.asarray(sigma_x, dtype=float)
    grid = y.grid
    idx = np.array([grid.index_of(float(t)) for t in times], dtype=np.int64)
    vals = y.values[idx]
    if np.any(sigma_x != 0.0):
        chol = np.linalg.cholesky(sigma_x)
        vals = vals + rng.standard_normal(vals.shape) @ chol.T
    return ObservationSet(idx * grid.step, vals)
