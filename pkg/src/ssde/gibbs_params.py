"""Parameter full conditionals and the empirical hyperparameter initializer.

Conventions (documented once, used everywhere):

* Gamma(shape s, rate r), mean ``s / r``.
* Inverse-Wishart(scale Psi, dof lam), mean ``Psi / (lam - n - 1)``; scale
  matrices are stored directly.
* Matrix-Normal prior on the drift block ``Gamma_z = [A(z), b(z)]`` with
  row covariance ``D_z`` and column precision ``K_z``.

The conjugate pairs are Dirichlet (initial mode), Normal-inverse-Wishart
(initial state law), Gamma (jump rates from transition counts and sojourn
times), Matrix-Normal (drift from path increments), and inverse-Wishart
(observation covariance).  The noise covariance of the diffusion is updated
by one Metropolis-adjusted Langevin step in log-Cholesky coordinates, which
keeps proposals SPD by construction; the coordinate change contributes its
Jacobian to the target.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.cluster.vq
import scipy.linalg

from .model import (DiffusionPath, MjpPath, ModeDynamics, ModelParams,
                    InitialLaw, ObservationModel, ObservationSet,
                    PriorHyperparams, RateMatrix, TimeGrid, spd_cholesky)

log = logging.getLogger("ssde.params")


# ---------------------------------------------------------------------------
# Sufficient statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MjpStats:
    """Transition counts and cumulative sojourn time per mode."""

    counts: np.ndarray     # (K, K) int, zero diagonal
    occupancy: np.ndarray  # (K,) time spent in each mode
    horizon: float


def mjp_sufficient_stats(z: MjpPath) -> MjpStats:
    k = z.n_modes
    counts = np.zeros((k, k), dtype=np.int64)
    st = z.states
    np.add.at(counts, (st[:-1], st[1:]), 1)
    occupancy = np.zeros(k)
    np.add.at(occupancy, st, z.sojourn_times())
    return MjpStats(counts, occupancy, z.horizon)


@dataclass(frozen=True)
class DriftStats:
    """Per-mode products of increments against augmented states.

    With ``ybar_l = [y_l, 1]``, accumulated over cells whose left endpoint
    sits in mode z:  ``dy_ybar[z] = sum dy_l ybar_l^T`` and
    ``ybar_ybar[z] = h * sum ybar_l ybar_l^T`` (the sqrt(h) scalings of the
    stacked data vectors fold into these products).
    """

    dy_ybar: np.ndarray    # (K, n, n+1)
    ybar_ybar: np.ndarray  # (K, n+1, n+1)
    cell_counts: np.ndarray  # (K,)


def drift_sufficient_stats(z: MjpPath, y: DiffusionPath,
                           grid: TimeGrid) -> DriftStats:
    k = z.n_modes
    n = y.n_dim
    L = grid.n_steps
    mode_cell = z.modes_on_grid(grid)[:L]
    ybar = np.hstack([y.values[:L], np.ones((L, 1))])
    dy = y.increments()
    dy_ybar = np.zeros((k, n, n + 1))
    ybar_ybar = np.zeros((k, n + 1, n + 1))
    counts = np.zeros(k, dtype=np.int64)
    for mode in range(k):
        mask = mode_cell == mode
        counts[mode] = int(mask.sum())
        if counts[mode]:
            yb = ybar[mask]
            dy_ybar[mode] = dy[mask].T @ yb
            yy = grid.step * (yb.T @ yb)
            ybar_ybar[mode] = 0.5 * (yy + yy.T)
    return DriftStats(dy_ybar, ybar_ybar, counts)


def dispersion_residual_stats(z: MjpPath, y: DiffusionPath,
                              modes: Sequence[ModeDynamics],
                              grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Per-mode outer products of Euler residuals ``dy_l - f(z, y_l) h``.

    Returns ``(R, counts)`` with ``R[z] = sum r_l r_l^T`` over mode-z cells;
    the Gaussian-transition likelihood of a candidate noise covariance D is
    ``-(counts[z]/2) log|D| - tr(D^-1 R[z]) / (2h)`` up to constants.
    """
    k = z.n_modes
    n = y.n_dim
    L = grid.n_steps
    mode_cell = z.modes_on_grid(grid)[:L]
    dy = y.increments()
    R = np.zeros((k, n, n))
    counts = np.zeros(k, dtype=np.int64)
    for mode in range(k):
        mask = mode_cell == mode
        counts[mode] = int(mask.sum())
        if counts[mode]:
            yv = y.values[:L][mask]
            f = yv @ modes[mode].A.T + modes[mode].b
            r = dy[mask] - grid.step * f
            rr = r.T @ r
            R[mode] = 0.5 * (rr + rr.T)
    return R, counts


# ---------------------------------------------------------------------------
# Path-measure likelihoods
# ---------------------------------------------------------------------------

def girsanov_loglik(z: MjpPath, y: DiffusionPath,
                    modes: Sequence[ModeDynamics], grid: TimeGrid) -> float:
    """Discretized log Radon-Nikodym derivative of the drifted diffusion
    against driftless noise:
    ``sum_l f_l^T D^-1 dy_l - f_l^T D^-1 f_l h / 2``."""
    L = grid.n_steps
    mode_cell = z.modes_on_grid(grid)[:L]
    dy = y.increments()
    total = 0.0
    for mode in range(z.n_modes):
        mask = mode_cell == mode
        if not mask.any():
            continue
        f = y.values[:L][mask] @ modes[mode].A.T + modes[mode].b
        fd = f @ modes[mode].D_inv
        total += float(np.sum(fd * dy[mask]))
        total -= 0.5 * grid.step * float(np.sum(fd * f))
    return total


def gaussian_transition_loglik(z: MjpPath, y: DiffusionPath,
                               modes: Sequence[ModeDynamics],
                               grid: TimeGrid) -> float:
    """Sum of Gaussian transition log densities ``N(dy_l; f_l h, D h)``."""
    h = grid.step
    n = y.n_dim
    L = grid.n_steps
    mode_cell = z.modes_on_grid(grid)[:L]
    dy = y.increments()
    total = 0.0
    for mode in range(z.n_modes):
        mask = mode_cell == mode
        m_count = int(mask.sum())
        if not m_count:
            continue
        dyn = modes[mode]
        f = y.values[:L][mask] @ dyn.A.T + dyn.b
        r = dy[mask] - h * f
        quad = float(np.sum((r @ dyn.D_inv) * r)) / h
        _, logdet_D = np.linalg.slogdet(dyn.D)
        total += -0.5 * quad - 0.5 * m_count * (logdet_D + n * np.log(2.0 * np.pi * h))
    return total


# ---------------------------------------------------------------------------
# Conjugate updates
# ---------------------------------------------------------------------------

def sample_inverse_wishart(rng: np.random.Generator, scale: np.ndarray,
                           dof: float) -> np.ndarray:
    """Draw from IW(scale, dof) via the Bartlett decomposition."""
    scale = np.asarray(scale, dtype=float)
    n = scale.shape[0]
    if dof <= n - 1:
        raise ValueError("inverse-Wishart dof must exceed n - 1")
    chol_inv_scale = np.linalg.cholesky(np.linalg.inv(scale))
    bart = np.zeros((n, n))
    for i in range(n):
        bart[i, i] = np.sqrt(rng.chisquare(dof - i))
        for j in range(i):
            bart[i, j] = rng.standard_normal()
    factor = chol_inv_scale @ bart  # Wishart(dof, scale^-1) = factor factor^T
    w_chol_inv = np.linalg.inv(factor)
    out = w_chol_inv.T @ w_chol_inv
    return 0.5 * (out + out.T)


def update_initial_mode(alpha: np.ndarray, z0: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Dirichlet draw for the initial mode weights given z(0)."""
    post = np.asarray(alpha, dtype=float).copy()
    post[z0] += 1.0
    return rng.dirichlet(post)


def niw_posterior(eta: np.ndarray, lam: float, psi: np.ndarray, kappa: float,
                  y0: np.ndarray) -> tuple[np.ndarray, float, np.ndarray, float]:
    """Single-observation Normal-inverse-Wishart hyperparameter update."""
    eta = np.asarray(eta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    lam_t = lam + 1.0
    diff = y0 - eta
    return ((lam * eta + y0) / lam_t, lam_t,
            psi + (lam / lam_t) * np.outer(diff, diff), kappa + 1.0)


def update_initial_state(eta: np.ndarray, lam: float, psi: np.ndarray,
                         kappa: float, y0: np.ndarray,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw (mu0, Sigma0) from the NIW full conditional given y(0)."""
    eta_t, lam_t, psi_t, kappa_t = niw_posterior(eta, lam, psi, kappa, y0)
    sigma0 = sample_inverse_wishart(rng, psi_t, kappa_t)
    mu0 = eta_t + np.linalg.cholesky(sigma0 / lam_t) @ rng.standard_normal(eta_t.shape[0])
    return mu0, sigma0


def update_rates(s: float, r: float, stats: MjpStats,
                 rng: np.random.Generator) -> RateMatrix:
    """Independent Gamma draws, ``Lambda(z, z') ~ Gamma(s + N_zz', r + T_z)``."""
    k = stats.counts.shape[0]
    off = np.zeros((k, k))
    for z in range(k):
        for zp in range(k):
            if zp == z:
                continue
            shape = s + stats.counts[z, zp]
            rate = r + stats.occupancy[z]
            off[z, zp] = rng.gamma(shape, 1.0 / rate)
    return RateMatrix.from_off_diagonal(off)


def matrix_normal_posterior(M: np.ndarray, K_mat: np.ndarray,
                            dy_ybar: np.ndarray,
                            ybar_ybar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Matrix-Normal hyperparameter update for one mode's drift block."""
    K_post = ybar_ybar + K_mat
    K_post = 0.5 * (K_post + K_post.T)
    chol = spd_cholesky(K_post, "posterior drift precision")
    M_post = scipy.linalg.cho_solve((chol, True), (dy_ybar + M @ K_mat).T).T
    return M_post, K_post


def update_drift(M: np.ndarray, K_mat: np.ndarray, D: np.ndarray,
                 dy_ybar: np.ndarray, ybar_ybar: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    """Draw the drift block ``[A, b]`` of one mode from its Matrix-Normal
    full conditional (row covariance D, posterior column covariance the
    inverse of the updated precision)."""
    n = D.shape[0]
    M_post, K_post = matrix_normal_posterior(M, K_mat, dy_ybar, ybar_ybar)
    chol_K = spd_cholesky(K_post, "posterior drift precision")
    K_inv = scipy.linalg.cho_solve((chol_K, True), np.eye(n + 1))
    col_chol = np.linalg.cholesky(0.5 * (K_inv + K_inv.T))
    row_chol = spd_cholesky(D, "D")
    noise = rng.standard_normal((n, n + 1))
    return M_post + row_chol @ noise @ col_chol.T


def iw_posterior_obs_cov(psi_x: np.ndarray, lam_x: float,
                         residuals: np.ndarray) -> tuple[np.ndarray, float]:
    residuals = np.atleast_2d(np.asarray(residuals, dtype=float))
    n_obs = residuals.shape[0] if residuals.size else 0
    scatter = residuals.T @ residuals if n_obs else np.zeros_like(psi_x)
    return psi_x + scatter, lam_x + n_obs


def update_obs_cov(psi_x: np.ndarray, lam_x: float, residuals: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """Draw Sigma_x from IW(psi_x + sum r r^T, lam_x + N)."""
    psi_post, lam_post = iw_posterior_obs_cov(np.asarray(psi_x, float),
                                              lam_x, residuals)
    return sample_inverse_wishart(rng, psi_post, lam_post)


# ---------------------------------------------------------------------------
# MALA update of the noise covariance, in log-Cholesky coordinates
# ---------------------------------------------------------------------------

def _theta_from_chol(chol: np.ndarray) -> np.ndarray:
    n = chol.shape[0]
    theta = list(np.log(np.diag(chol)))
    for i in range(n):
        for j in range(i):
            theta.append(chol[i, j])
    return np.array(theta)


def _chol_from_theta(theta: np.ndarray, n: int) -> np.ndarray:
    chol = np.zeros((n, n))
    np.fill_diagonal(chol, np.exp(theta[:n]))
    pos = n
    for i in range(n):
        for j in range(i):
            chol[i, j] = theta[pos]
            pos += 1
    return chol


def _log_target_and_grad(theta: np.ndarray, n: int, nu: float,
                         C: np.ndarray) -> tuple[float, np.ndarray]:
    """Unnormalized log density over theta and its gradient.

    The density over D is ``|D|^{-nu/2} exp(-tr(D^-1 C)/2)`` (likelihood
    times IW prior collapse to this form); the log-Cholesky change of
    variables adds ``(n + 1 - i) * omega_i`` per diagonal coordinate.
    """
    chol = _chol_from_theta(theta, n)
    chol_inv = scipy.linalg.solve_triangular(chol, np.eye(n), lower=True)
    D_inv = chol_inv.T @ chol_inv
    logdet_D = 2.0 * float(theta[:n].sum())
    val = -0.5 * nu * logdet_D - 0.5 * float(np.sum(D_inv * C))
    jac_coef = n + 1.0 - np.arange(n)
    val += float(jac_coef @ theta[:n])

    G = 0.5 * (D_inv @ C @ D_inv - nu * D_inv)
    grad_chol = 2.0 * np.tril(G @ chol)
    grad = np.empty_like(theta)
    grad[:n] = np.diag(grad_chol) * np.diag(chol) + jac_coef
    pos = n
    for i in range(n):
        for j in range(i):
            grad[pos] = grad_chol[i, j]
            pos += 1
    return val, grad


def mala_update_dispersion(D: np.ndarray, resid_scatter: np.ndarray,
                           n_cells: int, h: float, psi_d: np.ndarray,
                           lam_d: float, xi: float,
                           rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """One MALA step on a mode's noise covariance.

    Target: Gaussian-transition likelihood of the mode's Euler residuals
    (scatter ``resid_scatter`` over ``n_cells`` cells of width h) times the
    IW(psi_d, lam_d) prior, in log-Cholesky coordinates.  Proposal
    ``theta* = theta + xi grad + sqrt(2 xi) eps`` with the asymmetric
    Metropolis-Hastings correction; numerical trouble counts as a
    rejection.  Returns the (possibly unchanged) covariance and the
    acceptance flag.
    """
    D = np.asarray(D, dtype=float)
    n = D.shape[0]
    nu = n_cells + lam_d + n + 1.0
    C = np.asarray(psi_d, dtype=float) + np.asarray(resid_scatter, dtype=float) / h
    theta = _theta_from_chol(spd_cholesky(D, "D"))
    val, grad = _log_target_and_grad(theta, n, nu, C)
    if xi == 0.0:
        return D, True
    eps = rng.standard_normal(theta.shape[0])
    theta_prop = theta + xi * grad + np.sqrt(2.0 * xi) * eps
    try:
        val_p, grad_p = _log_target_and_grad(theta_prop, n, nu, C)
    except (np.linalg.LinAlgError, FloatingPointError):
        return D, False
    if not np.isfinite(val_p):
        return D, False
    fwd = theta_prop - theta - xi * grad
    rev = theta - theta_prop - xi * grad_p
    log_q_fwd = -float(fwd @ fwd) / (4.0 * xi)
    log_q_rev = -float(rev @ rev) / (4.0 * xi)
    log_alpha = val_p - val + log_q_rev - log_q_fwd
    if np.log(rng.random()) < log_alpha:
        chol = _chol_from_theta(theta_prop, n)
        D_new = chol @ chol.T
        return 0.5 * (D_new + D_new.T), True
    return D, False


# ---------------------------------------------------------------------------
# Empirical hyperparameter initialization
# ---------------------------------------------------------------------------

def _kmeans(x: np.ndarray, k: int, seed: int,
            restarts: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """k-means with restarts; clusters relabeled by ascending first mean
    coordinate so a seed pins the labeling."""
    best = None
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        centers, labels = scipy.cluster.vq.kmeans2(x, k, minit="++", seed=rng)
        distortion = float(np.sum((x - centers[labels]) ** 2))
        if best is None or distortion < best[0]:
            best = (distortion, centers, labels)
    _, centers, labels = best
    order = np.argsort(centers[:, 0], kind="stable")
    relabel = np.empty(k, dtype=np.int64)
    relabel[order] = np.arange(k)
    return centers[order], relabel[labels]


def _drift_estimate(x: np.ndarray, t: np.ndarray, labels: np.ndarray,
                    mu: np.ndarray, mode: int) -> np.ndarray:
    """Least-squares fit of finite-difference slopes against centered
    states; falls back to -I when a mode has too little data."""
    n = x.shape[1]
    sel = np.where(labels[:-1] == mode)[0]
    if sel.size < 2:
        log.info("mode %d has %d usable slopes; using -I drift", mode + 1, sel.size)
        return -np.eye(n)
    slopes = (x[sel + 1] - x[sel]) / (t[sel + 1] - t[sel])[:, None]
    centered = x[sel] - mu
    g = centered.T @ centered + 1e-8 * np.eye(n)
    a_hat = np.linalg.solve(g, centered.T @ slopes).T
    if not np.all(np.isfinite(a_hat)):
        return -np.eye(n)
    return a_hat


def empirical_hyperparams(obs: ObservationSet, n_modes: int, horizon: float,
                          seed: int = 0,
                          xi: float = 1e-4) -> tuple[PriorHyperparams, MjpPath, ModelParams]:
    """Data-driven hyperparameters, initial mode path and initial parameters.

    k-means on the observations (20 restarts) gives cluster means and
    covariances; hyperparameters follow the empirical recipe: NIW centered
    on the mean of cluster means with downscaled covariance, Gamma shape
    from the number of assignment transitions (floored to 1 so the prior
    stays proper), per-mode drift means from slope regression with
    ``b = -A mu``, IW scales from downscaled cluster covariances.  The
    assignment sequence, held piecewise constant, becomes the initial mode
    path; moment estimates seed the initial parameters.
    """
    if obs.n_obs < n_modes:
        raise ValueError("need at least as many observations as modes")
    x = obs.values
    t = obs.times
    n = obs.n_dim
    k = n_modes
    mu_z, labels = _kmeans(x, k, seed)

    global_cov = np.atleast_2d(np.cov(x.T)) if obs.n_obs > 1 else np.eye(n)
    global_cov = global_cov + 1e-8 * np.eye(n)
    cov_z = np.zeros((k, n, n))
    for mode in range(k):
        members = x[labels == mode]
        if members.shape[0] < 2:
            log.info("cluster %d has %d members; using global covariance",
                     mode + 1, members.shape[0])
            cov_z[mode] = global_cov
        else:
            c = np.atleast_2d(np.cov(members.T)) + 1e-8 * np.eye(n)
            cov_z[mode] = 0.5 * (c + c.T)
    mean_cov = cov_z.mean(axis=0)

    n_trans = int(np.sum(labels[1:] != labels[:-1]))
    s = float(max(n_trans, 1))

    alpha = np.ones(k)
    alpha[labels[0]] += 1.0

    M = np.zeros((k, n, n + 1))
    a_hats = []
    for mode in range(k):
        a_hat = _drift_estimate(x, t, labels, mu_z[mode], mode)
        b_hat = -a_hat @ mu_z[mode]
        M[mode, :, :n] = a_hat
        M[mode, :, n] = b_hat
        a_hats.append(a_hat)

    hyper = PriorHyperparams(
        alpha=alpha,
        eta=mu_z.mean(axis=0),
        lam=1.0,
        Psi=mean_cov * 0.1,
        kappa=n + 2.0,
        s=s,
        r=1.0,
        M=M,
        K_mat=np.broadcast_to(np.eye(n + 1), (k, n + 1, n + 1)).copy(),
        Psi_D=cov_z * 0.1,
        lam_D=np.full(k, n + 2.0),
        Psi_x=mean_cov * 0.5,
        lam_x=n + 2.0,
        xi=xi,
    )

    # Assignment sequence held piecewise constant, collapsed to state changes.
    jump_times = []
    states = [int(labels[0])]
    for i in range(1, obs.n_obs):
        if labels[i] != states[-1]:
            jump_times.append(float(t[i]))
            states.append(int(labels[i]))
    z0 = MjpPath(np.array(jump_times), np.array(states, dtype=np.int64),
                 horizon, k)

    stats = mjp_sufficient_stats(z0)
    off = np.zeros((k, k))
    for zf in range(k):
        for zt in range(k):
            if zf != zt:
                off[zf, zt] = (s + stats.counts[zf, zt]) / (1.0 + stats.occupancy[zf])
    modes = tuple(
        ModeDynamics(a_hats[mode], -a_hats[mode] @ mu_z[mode],
                     np.linalg.cholesky(cov_z[mode] * 0.1))
        for mode in range(k))
    params = ModelParams(
        rates=RateMatrix.from_off_diagonal(off),
        modes=modes,
        init=InitialLaw(alpha / alpha.sum(), hyper.eta, hyper.Psi.copy()),
        obs=ObservationModel(mean_cov * 0.5),
    )
    return hyper, z0, params
