"""Blocked Gibbs sweep orchestration, sample storage and diagnostics.

One sweep runs, in order: backward information filter given the mode path,
forward draw of the diffusion path, forward mode filter given the fresh
diffusion path, backward draw of the mode path, then the parameter block
(initial mode weights, initial state law, jump rates, per-mode drift,
per-mode noise covariance via MALA, observation covariance), each
conditional using the newest paths.

A chain is strictly sequential; run several chains with generators from
:func:`ssde.simulate.spawn_rngs` for parallelism.  The MALA step size is
adapted per mode during burn-in (Robbins-Monro toward 0.574 acceptance)
and frozen afterwards to preserve detailed balance.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .diffusion import run_information_filter, sample_conditional_diffusion
from .gibbs_params import (dispersion_residual_stats, drift_sufficient_stats,
                           empirical_hyperparams, mala_update_dispersion,
                           mjp_sufficient_stats, update_drift,
                           update_initial_mode, update_initial_state,
                           update_obs_cov, update_rates)
from .model import (DiffusionPath, InitialLaw, MjpPath, ModeDynamics,
                    ModelParams, ObservationModel, ObservationSet,
                    PriorHyperparams, TimeGrid, spd_cholesky)
from .switching import run_ks_filter, sample_conditional_switching

log = logging.getLogger("ssde.sampler")

MALA_TARGET_ACCEPTANCE = 0.574


@dataclass
class GibbsState:
    """Current paths and parameters of one chain."""

    z: MjpPath
    y: DiffusionPath
    params: ModelParams
    sweep: int = 0
    mala_accepted: Optional[np.ndarray] = None


@dataclass
class MalaController:
    """Per-mode step sizes with burn-in adaptation."""

    xi: np.ndarray
    adapting: bool = True
    accepts: np.ndarray = None
    proposals: np.ndarray = None
    _steps: int = 0

    @classmethod
    def from_hyper(cls, hyper: PriorHyperparams) -> "MalaController":
        k = hyper.n_modes
        return cls(xi=np.full(k, hyper.xi), accepts=np.zeros(k),
                   proposals=np.zeros(k))

    def record(self, mode: int, accepted: bool) -> None:
        self.proposals[mode] += 1
        self.accepts[mode] += accepted
        if self.adapting:
            gamma = (1.0 + self._steps) ** -0.6
            self.xi[mode] *= np.exp(gamma * (float(accepted) - MALA_TARGET_ACCEPTANCE))

    def end_sweep(self) -> None:
        self._steps += 1

    def acceptance_rates(self) -> np.ndarray:
        return self.accepts / np.maximum(self.proposals, 1.0)


def gibbs_sweep(state: GibbsState, obs: ObservationSet,
                hyper: PriorHyperparams, grid: TimeGrid,
                rng: np.random.Generator,
                mala: Optional[MalaController] = None,
                update_params: bool = True) -> GibbsState:
    """Advance the chain by one full blocked sweep."""
    try:
        return _gibbs_sweep(state, obs, hyper, grid, rng, mala, update_params)
    except Exception as exc:
        exc.args = (f"[sweep {state.sweep + 1}] {exc}",)
        raise


def _gibbs_sweep(state, obs, hyper, grid, rng, mala, update_params):
    p = state.params
    n = p.n_dim
    k = p.n_modes

    bi = run_information_filter(state.z, p.modes, obs, p.obs.Sigma_x, grid)
    y_new = sample_conditional_diffusion(state.z, bi, p.modes, p.init, grid, rng)
    ft = run_ks_filter(y_new, p.modes, p.rates, p.init.pi, grid)
    z_new = sample_conditional_switching(ft, p.rates, grid, rng)

    accepted = np.zeros(k, dtype=bool)
    if not update_params:
        return GibbsState(z_new, y_new, p, state.sweep + 1, accepted)

    pi_new = update_initial_mode(hyper.alpha, int(z_new.states[0]), rng)
    mu0_new, sigma0_new = update_initial_state(
        hyper.eta, hyper.lam, hyper.Psi, hyper.kappa, y_new.values[0], rng)
    rates_new = update_rates(hyper.s, hyper.r, mjp_sufficient_stats(z_new), rng)

    dstats = drift_sufficient_stats(z_new, y_new, grid)
    gammas = [update_drift(hyper.M[z], hyper.K_mat[z], p.modes[z].D,
                           dstats.dy_ybar[z], dstats.ybar_ybar[z], rng)
              for z in range(k)]
    modes_mid = tuple(ModeDynamics(g[:, :n], g[:, n], p.modes[z].Q)
                      for z, g in enumerate(gammas))
    scatter, counts = dispersion_residual_stats(z_new, y_new, modes_mid, grid)
    modes_new = []
    for z in range(k):
        xi = float(mala.xi[z]) if mala is not None else hyper.xi
        d_new, acc = mala_update_dispersion(p.modes[z].D, scatter[z],
                                            int(counts[z]), grid.step,
                                            hyper.Psi_D[z], float(hyper.lam_D[z]),
                                            xi, rng)
        accepted[z] = acc
        if mala is not None:
            mala.record(z, acc)
        modes_new.append(ModeDynamics(gammas[z][:, :n], gammas[z][:, n],
                                      spd_cholesky(d_new, "D")))
    if mala is not None:
        mala.end_sweep()

    residuals = obs.values - y_new.values[obs.grid_indices(grid)]
    sigma_x_new = update_obs_cov(hyper.Psi_x, hyper.lam_x, residuals, rng)

    params_new = ModelParams(rates_new, tuple(modes_new),
                             InitialLaw(pi_new, mu0_new, sigma0_new),
                             ObservationModel(sigma_x_new))
    return GibbsState(z_new, y_new, params_new, state.sweep + 1, accepted)


@dataclass(frozen=True)
class SamplerConfig:
    """Run settings for one chain."""

    grid: TimeGrid
    n_modes: int
    num_samples: int
    burn_in: Optional[int] = None  # default: 10% of num_samples
    thin: int = 1
    stride: int = 1                # keep every stride-th grid point of y
    update_params: bool = True

    def resolved_burn_in(self) -> int:
        b = self.num_samples // 10 if self.burn_in is None else self.burn_in
        if not (0 <= b < self.num_samples):
            raise ValueError("need num_samples > burn_in >= 0")
        return b


@dataclass
class SampleStore:
    """Retained thinned draws plus retention metadata."""

    grid: TimeGrid
    n_modes: int
    burn_in: int
    thin: int
    stride: int
    seed: Optional[int]
    y_indices: np.ndarray          # grid indices at which y draws are kept
    final_state: Optional[GibbsState] = None
    sweeps: list = field(default_factory=list)
    z_paths: list = field(default_factory=list)
    y_draws: list = field(default_factory=list)
    params: list = field(default_factory=list)
    mala_accepted: list = field(default_factory=list)

    @property
    def n_retained(self) -> int:
        return len(self.sweeps)

    def add(self, state: GibbsState) -> None:
        self.sweeps.append(state.sweep)
        self.z_paths.append(state.z)
        self.y_draws.append(state.y.values[self.y_indices].copy())
        self.params.append(state.params)
        self.mala_accepted.append(
            None if state.mala_accepted is None else state.mala_accepted.copy())


@dataclass(frozen=True)
class Diagnostics:
    ess: dict
    mala_acceptance: np.ndarray
    sweep_time_mean: float
    sweep_time_total: float
    n_retained: int


@dataclass(frozen=True)
class Marginals:
    """Empirical posterior marginals over the grid."""

    z_probs: np.ndarray    # (L+1, K) mode frequencies
    y_indices: np.ndarray  # (S,) grid indices of the stored y draws
    y_mean: np.ndarray     # (S, n)
    y_q05: np.ndarray      # (S, n)
    y_q95: np.ndarray      # (S, n)


def ess_batch_means(trace: np.ndarray) -> float:
    """Effective sample size with the batch-means variance estimator.

    ``ess = N var(x) / (b var(batch means))`` with batch length
    ``b = floor(sqrt(N))``, clipped into ``(0, N]``.
    """
    x = np.asarray(trace, dtype=float)
    n = x.shape[0]
    if n < 4:
        return float(n)
    var = float(x.var(ddof=1))
    if var == 0.0:
        return float("nan")
    b = int(np.sqrt(n))
    m = n // b
    means = x[:m * b].reshape(m, b).mean(axis=1)
    sigma2 = b * float(means.var(ddof=1))
    if sigma2 <= 0.0:
        return float(n)
    return float(np.clip(n * var / sigma2, np.finfo(float).tiny, n))


def scalar_traces(params: list, n_modes: int, n_dim: int) -> dict:
    """Per-scalar-parameter traces from retained draws (1-based labels)."""
    traces = {}

    def grab(name, fn):
        traces[name] = np.array([fn(p) for p in params])

    for i in range(n_modes):
        for j in range(n_modes):
            if i != j:
                grab(f"rate[{i + 1},{j + 1}]",
                     lambda p, i=i, j=j: p.rates.matrix[i, j])
        grab(f"pi[{i + 1}]", lambda p, i=i: p.init.pi[i])
    for i in range(n_dim):
        grab(f"mu0[{i + 1}]", lambda p, i=i: p.init.mu0[i])
        for j in range(i, n_dim):
            grab(f"Sigma0[{i + 1},{j + 1}]", lambda p, i=i, j=j: p.init.Sigma0[i, j])
            grab(f"Sigma_x[{i + 1},{j + 1}]", lambda p, i=i, j=j: p.obs.Sigma_x[i, j])
    for z in range(n_modes):
        for i in range(n_dim):
            grab(f"b[{z + 1}][{i + 1}]", lambda p, z=z, i=i: p.modes[z].b[i])
            for j in range(n_dim):
                grab(f"A[{z + 1}][{i + 1},{j + 1}]",
                     lambda p, z=z, i=i, j=j: p.modes[z].A[i, j])
            for j in range(i, n_dim):
                grab(f"D[{z + 1}][{i + 1},{j + 1}]",
                     lambda p, z=z, i=i, j=j: p.modes[z].D[i, j])
    return traces


def compute_diagnostics(store: SampleStore,
                        sweep_times: Optional[np.ndarray] = None) -> Diagnostics:
    ess = {}
    if store.params:
        n_dim = store.params[0].n_dim
        for name, tr in scalar_traces(store.params, store.n_modes, n_dim).items():
            val = ess_batch_means(tr)
            if np.isfinite(val):
                ess[name] = val
    flags = [a for a in store.mala_accepted if a is not None]
    acc = (np.mean(np.stack(flags), axis=0) if flags
           else np.zeros(store.n_modes))
    if sweep_times is not None and len(sweep_times):
        mean_t, total_t = float(np.mean(sweep_times)), float(np.sum(sweep_times))
    else:
        mean_t, total_t = float("nan"), float("nan")
    return Diagnostics(ess, acc, mean_t, total_t, store.n_retained)


def _initial_y(obs: ObservationSet, grid: TimeGrid, mu0: np.ndarray) -> DiffusionPath:
    # Linear interpolation of the observations; flat at mu0 without data.
    t = grid.times
    n = mu0.shape[0]
    vals = np.empty((t.shape[0], n))
    if obs.n_obs == 0:
        vals[:] = mu0
    else:
        for i in range(n):
            vals[:, i] = np.interp(t, obs.times, obs.values[:, i])
    return DiffusionPath(vals, grid)


def run_sampler(config: SamplerConfig, obs: ObservationSet,
                rng: np.random.Generator,
                hyper: Optional[PriorHyperparams] = None,
                params0: Optional[ModelParams] = None,
                z0: Optional[MjpPath] = None,
                seed: Optional[int] = None,
                init_seed: int = 0) -> tuple[SampleStore, Diagnostics]:
    """Run one chain: initialize, sweep, retain thinned post-burn-in draws.

    Without explicit ``hyper``/``params0``/``z0``, everything is
    initialized empirically from the observations.  ``seed`` is recorded as
    metadata only; pass a generator created from it.
    """
    grid = config.grid
    burn_in = config.resolved_burn_in()
    if config.thin < 1 or config.stride < 1:
        raise ValueError("thin and stride must be >= 1")

    if hyper is None or params0 is None or z0 is None:
        e_hyper, e_z0, e_params = empirical_hyperparams(
            obs, config.n_modes, grid.horizon, seed=init_seed)
        hyper = hyper if hyper is not None else e_hyper
        params0 = params0 if params0 is not None else e_params
        z0 = z0 if z0 is not None else e_z0

    y_indices = np.arange(0, grid.n_steps + 1, config.stride, dtype=np.int64)
    if y_indices[-1] != grid.n_steps:
        y_indices = np.append(y_indices, grid.n_steps)
    store = SampleStore(grid=grid, n_modes=config.n_modes, burn_in=burn_in,
                        thin=config.thin, stride=config.stride, seed=seed,
                        y_indices=y_indices)

    state = GibbsState(z0, _initial_y(obs, grid, params0.init.mu0), params0)
    mala = MalaController.from_hyper(hyper)
    sweep_times = np.empty(config.num_samples)
    for i in range(1, config.num_samples + 1):
        if i == burn_in + 1:
            mala.adapting = False
        t0 = time.perf_counter()
        state = gibbs_sweep(state, obs, hyper, grid, rng, mala,
                            update_params=config.update_params)
        sweep_times[i - 1] = time.perf_counter() - t0
        if i > burn_in and (i - burn_in) % config.thin == 0:
            store.add(state)
    store.final_state = state
    log.info("retained %d of %d sweeps (burn-in %d, thin %d)",
             store.n_retained, config.num_samples, burn_in, config.thin)
    diags = compute_diagnostics(store, sweep_times)
    return store, diags


def empirical_marginals(store: SampleStore, grid: TimeGrid) -> Marginals:
    """Pointwise posterior summaries from the retained draws."""
    if store.n_retained == 0:
        raise ValueError("empty sample store")
    k = store.n_modes
    L = grid.n_steps
    counts = np.zeros((L + 1, k))
    times = grid.times
    for z_path in store.z_paths:
        modes = z_path.mode_at(times)
        counts[np.arange(L + 1), modes] += 1.0
    z_probs = counts / store.n_retained
    y = np.stack(store.y_draws)  # (R, S, n)
    return Marginals(z_probs=z_probs, y_indices=store.y_indices,
                     y_mean=y.mean(axis=0),
                     y_q05=np.quantile(y, 0.05, axis=0),
                     y_q95=np.quantile(y, 0.95, axis=0))
