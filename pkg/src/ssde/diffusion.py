"""Gibbs step for the diffusion path: backward filtering, forward sampling.

Given a fixed mode path, the future-observation likelihood is log-quadratic
in the state,

    log beta(y, t) = -c(t) - y^T I(t) y / 2 + a(t)^T y,

where the precision ``I`` and linear term ``a`` solve a backward
information-filter ODE system between observations,

    dI/dt = -A^T I - I A + I D I,
    da/dt = -A^T a + I D a + I b,

with terminal condition ``I(T) = 0, a(T) = 0`` and multiplicative resets
``I(t_i) = Sigma_x^-1 + I(t_i+)``, ``a(t_i) = Sigma_x^-1 x_i + a(t_i+)``
at observation times.  The normalizer ``c`` is never needed: the
conditioned diffusion only uses the gradient ``-I y + a``, which enters
the drift as ``(A - D I) y + b + D a``.  The initial state is Gaussian
with moments fused from the prior and ``(I(0), a(0))``.

A stacked-Gaussian backward filter in ``(F, m, Sigma)`` form, whose state
grows with each observation, is kept here as a slow, independent test
oracle for the fixed-size filter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from . import _kernels
from .model import (DiffusionPath, InitialLaw, MjpPath, ModeDynamics,
                    ObservationSet, TimeGrid, spd_cholesky)

#: The stacked oracle grows by n rows per observation; cap it to test sizes.
ORACLE_MAX_OBS = 8


@dataclass(frozen=True)
class BackwardInfo:
    """Information-filter trajectories on a grid.

    ``precision[l]``/``linear[l]`` hold the reset-inclusive values at t_l;
    right limits at the observation indices (the values driving the SDE
    just after passing an observation forward in time) are stored
    separately.
    """

    precision: np.ndarray        # (L+1, n, n)
    linear: np.ndarray           # (L+1, n)
    obs_indices: np.ndarray      # (N,)
    precision_after: np.ndarray  # (N, n, n) right limits I(t_i+)
    linear_after: np.ndarray     # (N, n)
    grid: TimeGrid

    def drift_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-cell filter values seen by the forward simulation.

        Cell l uses the right limit at its left endpoint: an observation at
        t_l has already been absorbed into the path up to t_l, so the drift
        beyond t_l must not count it again.
        """
        L = self.grid.n_steps
        I_drift = self.precision[:L].copy()
        a_drift = self.linear[:L].copy()
        for k, idx in enumerate(self.obs_indices):
            if idx < L:
                I_drift[idx] = self.precision_after[k]
                a_drift[idx] = self.linear_after[k]
        return I_drift, a_drift

    def grad_log_beta(self, l: int, y: np.ndarray) -> np.ndarray:
        return -self.precision[l] @ y + self.linear[l]


def run_information_filter(z: MjpPath, modes: Sequence[ModeDynamics],
                           obs: ObservationSet, sigma_x: np.ndarray,
                           grid: TimeGrid) -> BackwardInfo:
    """Integrate the backward information filter along a fixed mode path.

    One RK4 step per grid cell with the mode frozen at the cell's left
    endpoint; the precision is symmetrized after every step.  The noise
    precision is factorized once; resets reuse it.
    """
    n = modes[0].n_dim
    L = grid.n_steps
    obs_idx = obs.grid_indices(grid)
    sigma_x = np.asarray(sigma_x, dtype=float)
    chol = spd_cholesky(sigma_x, "Sigma_x")
    sx_inv = scipy.linalg.cho_solve((chol, True), np.eye(n))
    sx_inv = 0.5 * (sx_inv + sx_inv.T)
    sx_inv_x = obs.values @ sx_inv.T if obs.n_obs else np.zeros((0, n))

    obs_slot = np.full(L + 1, -1, dtype=np.int64)
    obs_slot[obs_idx] = np.arange(obs_idx.size)
    mode_cell = z.modes_on_grid(grid)[:L]
    A = np.stack([m.A for m in modes])
    b = np.stack([m.b for m in modes])
    D = np.stack([m.D for m in modes])

    I_out = np.empty((L + 1, n, n))
    a_out = np.empty((L + 1, n))
    I_plus = np.zeros((max(obs_idx.size, 1), n, n))
    a_plus = np.zeros((max(obs_idx.size, 1), n))
    fail = _kernels.backward_info_filter(grid.step, mode_cell, A, b, D,
                                         obs_slot, sx_inv, sx_inv_x,
                                         I_out, a_out, I_plus, a_plus)
    if fail >= 0:
        raise FloatingPointError(f"information filter blew up at grid index {fail}")
    return BackwardInfo(I_out, a_out, obs_idx,
                        I_plus[:obs_idx.size], a_plus[:obs_idx.size], grid)


def posterior_initial_law(I0: np.ndarray, a0: np.ndarray, mu0: np.ndarray,
                          Sigma0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fuse the Gaussian prior on y(0) with the filtered likelihood.

    ``Sigma_bar = (Sigma0^-1 + I0)^-1`` and
    ``mu_bar = Sigma_bar (Sigma0^-1 mu0 + a0)``.
    """
    n = mu0.shape[0]
    chol0 = spd_cholesky(np.asarray(Sigma0, dtype=float), "Sigma0")
    prec0 = scipy.linalg.cho_solve((chol0, True), np.eye(n))
    post_prec = 0.5 * (prec0 + prec0.T) + np.asarray(I0, dtype=float)
    cholp = spd_cholesky(post_prec, "posterior precision")
    sigma_bar = scipy.linalg.cho_solve((cholp, True), np.eye(n))
    sigma_bar = 0.5 * (sigma_bar + sigma_bar.T)
    mu_bar = scipy.linalg.cho_solve((cholp, True), prec0 @ mu0 + a0)
    return mu_bar, sigma_bar


def sample_conditional_diffusion(z: MjpPath, bi: BackwardInfo,
                                 modes: Sequence[ModeDynamics],
                                 init: InitialLaw, grid: TimeGrid,
                                 rng: np.random.Generator) -> DiffusionPath:
    """Draw one diffusion path from its full conditional.

    The initial state comes from :func:`posterior_initial_law`; the path is
    then simulated forward with the gradient-corrected drift.  Observations
    enter only through ``(I, a)``.
    """
    n = modes[0].n_dim
    L = grid.n_steps
    mu_bar, sigma_bar = posterior_initial_law(bi.precision[0], bi.linear[0],
                                              init.mu0, init.Sigma0)
    y0 = mu_bar + spd_cholesky(sigma_bar, "Sigma_bar") @ rng.standard_normal(n)
    I_drift, a_drift = bi.drift_arrays()
    mode_cell = z.modes_on_grid(grid)[:L]
    A = np.stack([m.A for m in modes])
    b = np.stack([m.b for m in modes])
    D = np.stack([m.D for m in modes])
    Q = np.stack([m.Q for m in modes])
    eps = rng.standard_normal((L, n))
    y_out = np.empty((L + 1, n))
    fail = _kernels.euler_maruyama_posterior(grid.step, mode_cell, A, b, D, Q,
                                             I_drift, a_drift, y0, eps, y_out)
    if fail >= 0:
        raise FloatingPointError(
            f"non-finite state at grid step {fail} of the conditional path")
    return DiffusionPath(y_out, grid)


@dataclass(frozen=True)
class KalmanBackwardOracle:
    """Stacked backward filter ``beta(y,t) = N(x_stack; F y + m, Sigma)``.

    ``F``, ``m``, ``Sigma`` and the stacked observation vector gain n rows
    per observation passed backward; entries are reset-inclusive at
    observation indices, matching :class:`BackwardInfo`.  Test oracle only.
    """

    F: list                  # per grid point, (p_l, n)
    m: list                  # per grid point, (p_l,)
    Sigma: list              # per grid point, (p_l, p_l)
    x_stack: list            # per grid point, (p_l,)
    grid: TimeGrid

    def grad_log_beta(self, l: int, y: np.ndarray) -> np.ndarray:
        F, m, S, x = self.F[l], self.m[l], self.Sigma[l], self.x_stack[l]
        if F.shape[0] == 0:
            return np.zeros(y.shape[0])
        r = np.linalg.solve(S, x - m - F @ y)
        return F.T @ r

    def log_beta(self, l: int, y: np.ndarray) -> float:
        F, m, S, x = self.F[l], self.m[l], self.Sigma[l], self.x_stack[l]
        if F.shape[0] == 0:
            return 0.0
        r = x - m - F @ y
        sign, logdet = np.linalg.slogdet(S)
        quad = r @ np.linalg.solve(S, r)
        return float(-0.5 * (quad + logdet + F.shape[0] * np.log(2.0 * np.pi)))


def run_kalman_backward_oracle(z: MjpPath, modes: Sequence[ModeDynamics],
                               obs: ObservationSet, sigma_x: np.ndarray,
                               grid: TimeGrid) -> KalmanBackwardOracle:
    """Integrate the stacked backward filter (dF = -FA, dm = -Fb,
    dSigma = -F D F^T) with block resets at observations."""
    if obs.n_obs > ORACLE_MAX_OBS:
        raise ValueError(f"oracle supports at most {ORACLE_MAX_OBS} observations")
    n = modes[0].n_dim
    L = grid.n_steps
    h = grid.step
    sigma_x = np.asarray(sigma_x, dtype=float)
    obs_idx = obs.grid_indices(grid)
    obs_at = {int(idx): k for k, idx in enumerate(obs_idx)}
    mode_cell = z.modes_on_grid(grid)[:L]

    F = np.zeros((0, n))
    m = np.zeros(0)
    S = np.zeros((0, 0))
    x = np.zeros(0)

    def reset(k):
        nonlocal F, m, S, x
        F = np.vstack([np.eye(n), F])
        m = np.concatenate([np.zeros(n), m])
        S = scipy.linalg.block_diag(sigma_x, S)
        x = np.concatenate([obs.values[k], x])

    def rhs(Fc, mc, Sc, A, b, D):
        return -Fc @ A, -Fc @ b, -Fc @ D @ Fc.T

    Fs = [None] * (L + 1)
    ms = [None] * (L + 1)
    Ss = [None] * (L + 1)
    xs = [None] * (L + 1)
    if L in obs_at:
        reset(obs_at[L])
    Fs[L], ms[L], Ss[L], xs[L] = F.copy(), m.copy(), S.copy(), x.copy()
    for l in range(L - 1, -1, -1):
        zl = mode_cell[l]
        A, b, D = modes[zl].A, modes[zl].b, modes[zl].D
        k1 = rhs(F, m, S, A, b, D)
        k2 = rhs(F - 0.5 * h * k1[0], m - 0.5 * h * k1[1], S - 0.5 * h * k1[2], A, b, D)
        k3 = rhs(F - 0.5 * h * k2[0], m - 0.5 * h * k2[1], S - 0.5 * h * k2[2], A, b, D)
        k4 = rhs(F - h * k3[0], m - h * k3[1], S - h * k3[2], A, b, D)
        F = F - (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        m = m - (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        S = S - (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        S = 0.5 * (S + S.T)
        if not (np.all(np.isfinite(F)) and np.all(np.isfinite(S))):
            raise FloatingPointError(f"oracle filter blew up at grid index {l}")
        if l in obs_at:
            reset(obs_at[l])
        Fs[l], ms[l], Ss[l], xs[l] = F.copy(), m.copy(), S.copy(), x.copy()
    return KalmanBackwardOracle(Fs, ms, Ss, xs, grid)
