"""Core types for continuous-time switching linear dynamical systems.

The generative model couples three processes on a horizon ``[0, T]``:

* a finite-mode jump process ``Z(t)`` with a constant rate matrix,
* a mode-dependent linear diffusion
  ``dY = (A(z) Y + b(z)) dt + Q(z) dW``,
* noisy snapshots ``X_i = Y(t_i) + N(0, Sigma_x)`` at discrete times.

All containers here are immutable value objects; construction validates the
invariants they promise (SPD covariances, zero rate row sums, simplex
weights, grid alignment), so downstream numerics never re-check them.  They
are safe to share across threads.

Modes are 0-based integers internally; file formats use 1-based labels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger("ssde.model")

#: Relative jitter added once to a covariance that fails a Cholesky attempt.
JITTER_SCALE = 1e-10


def _frozen_array(x, dtype=float, ndim=None, name="array") -> np.ndarray:
    arr = np.array(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def spd_cholesky(mat: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix.

    A single jitter of ``JITTER_SCALE * trace(mat) / n`` is added on the
    first failure; a second failure is a hard error.  Asymmetry beyond
    roundoff is also rejected.
    """
    mat = np.asarray(mat, dtype=float)
    n = mat.shape[0]
    if mat.shape != (n, n):
        raise ValueError(f"{name} is not square: shape {mat.shape}")
    scale = max(1.0, float(np.abs(mat).max(initial=0.0)))
    if not np.allclose(mat, mat.T, atol=1e-9 * scale, rtol=0.0):
        raise ValueError(f"{name} is not SPD (not symmetric)")
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_SCALE * float(np.trace(mat)) / n
    try:
        return np.linalg.cholesky(mat + jitter * np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{name} is not SPD") from exc


def _check_simplex(p: np.ndarray, name: str) -> None:
    if np.any(p < 0.0):
        raise ValueError(f"{name} violates simplex constraint: negative entry")
    if abs(float(p.sum()) - 1.0) > 1e-12:
        raise ValueError(f"{name} violates simplex constraint: sum {p.sum()!r} != 1")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_l = l * step`` for ``l = 0..n_steps``.

    The horizon is snapped to the nearest multiple of ``step`` at
    construction (snapping is logged); at least two steps are required.
    """

    horizon: float
    step: float
    n_steps: int = field(init=False)

    def __post_init__(self):
        if not (self.step > 0.0 and math.isfinite(self.step)):
            raise ValueError("invalid step: step h must be positive and finite")
        if not (self.horizon > 0.0 and math.isfinite(self.horizon)):
            raise ValueError("horizon T must be positive and finite")
        n_steps = int(round(self.horizon / self.step))
        if n_steps < 2:
            raise ValueError("grid must have at least 2 steps (T >= 2h)")
        snapped = n_steps * self.step
        if abs(snapped - self.horizon) > 1e-9 * self.step:
            log.info("snapped horizon %.17g to %.17g (= %d * %.17g)",
                     self.horizon, snapped, n_steps, self.step)
        object.__setattr__(self, "horizon", snapped)
        object.__setattr__(self, "n_steps", n_steps)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.step

    def index_of(self, t: float) -> int:
        """Snap a time to its grid index; |t - t_l| must be <= h/2."""
        idx = int(round(t / self.step))
        if idx < 0 or idx > self.n_steps:
            raise ValueError(f"time {t!r} is outside the grid [0, {self.horizon!r}]")
        if abs(t - idx * self.step) > 0.5 * self.step * (1.0 + 1e-9):
            raise ValueError(f"time {t!r} is off-grid (nearest grid point {idx * self.step!r})")
        return idx


@dataclass(frozen=True)
class RateMatrix:
    """Transition rate matrix of the mode process.

    Off-diagonal entries are jump rates (1/time); each diagonal entry is
    minus its row's off-diagonal sum, so rows sum to zero.
    """

    matrix: np.ndarray

    def __post_init__(self):
        mat = _frozen_array(self.matrix, ndim=2, name="rate matrix")
        k = mat.shape[0]
        if mat.shape != (k, k) or k < 1:
            raise ValueError(f"rate matrix must be square, got shape {mat.shape}")
        off = mat.copy()
        np.fill_diagonal(off, 0.0)
        if np.any(off < 0.0):
            raise ValueError("rate matrix has a negative off-diagonal entry")
        tol = 1e-12 * max(1.0, float(np.abs(mat).max(initial=0.0)))
        row_sums = mat.sum(axis=1)
        if np.any(np.abs(row_sums) > tol):
            bad = int(np.argmax(np.abs(row_sums)))
            raise ValueError(f"rate row sum violated in row {bad + 1}: {row_sums[bad]!r}")
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def from_off_diagonal(cls, off: np.ndarray) -> "RateMatrix":
        off = np.array(off, dtype=float)
        np.fill_diagonal(off, 0.0)
        np.fill_diagonal(off, -off.sum(axis=1))
        return cls(off)

    @property
    def n_modes(self) -> int:
        return self.matrix.shape[0]

    @property
    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.matrix)


@dataclass(frozen=True)
class ModeDynamics:
    """Affine drift ``A y + b`` and dispersion ``Q`` of one mode.

    The noise covariance ``D = Q Q^T`` is symmetrized, and stored together
    with its Cholesky factor and inverse so the filters never factorize per
    grid step.
    """

    A: np.ndarray
    b: np.ndarray
    Q: np.ndarray
    D: np.ndarray = field(init=False)
    chol_D: np.ndarray = field(init=False)
    D_inv: np.ndarray = field(init=False)

    def __post_init__(self):
        A = _frozen_array(self.A, ndim=2, name="drift matrix A")
        b = _frozen_array(self.b, ndim=1, name="drift offset b")
        Q = _frozen_array(self.Q, ndim=2, name="dispersion Q")
        n = A.shape[0]
        if A.shape != (n, n) or b.shape != (n,) or Q.shape != (n, n):
            raise ValueError("dimension mismatch among A, b, Q")
        if not np.all(np.isfinite(A)) or not np.all(np.isfinite(b)) or not np.all(np.isfinite(Q)):
            raise ValueError("mode dynamics contain non-finite entries")
        if np.linalg.cond(Q) > 1e12:
            raise ValueError("dispersion Q is not invertible")
        D = Q @ Q.T
        D = 0.5 * (D + D.T)
        floor = JITTER_SCALE * float(np.trace(D)) / n
        if float(np.linalg.eigvalsh(D).min()) <= floor:
            raise ValueError("noise covariance D is not SPD above the jitter floor")
        chol = spd_cholesky(D, "noise covariance D")
        ident = np.eye(n)
        tmp = np.linalg.solve(chol, ident)
        D_inv = tmp.T @ tmp
        D_inv = 0.5 * (D_inv + D_inv.T)
        for key, val in (("A", A), ("b", b), ("Q", Q), ("D", D),
                         ("chol_D", chol), ("D_inv", D_inv)):
            val.setflags(write=False)
            object.__setattr__(self, key, val)

    @property
    def n_dim(self) -> int:
        return self.A.shape[0]

    def drift(self, y: np.ndarray) -> np.ndarray:
        return self.A @ y + self.b


@dataclass(frozen=True)
class InitialLaw:
    """Initial mode probabilities and Gaussian law of the initial state."""

    pi: np.ndarray
    mu0: np.ndarray
    Sigma0: np.ndarray
    chol_Sigma0: np.ndarray = field(init=False)

    def __post_init__(self):
        pi = _frozen_array(self.pi, ndim=1, name="pi")
        mu0 = _frozen_array(self.mu0, ndim=1, name="mu0")
        Sigma0 = _frozen_array(self.Sigma0, ndim=2, name="Sigma0")
        _check_simplex(pi, "pi")
        n = mu0.shape[0]
        if Sigma0.shape != (n, n):
            raise ValueError("dimension mismatch between mu0 and Sigma0")
        chol = spd_cholesky(Sigma0, "Sigma0")
        chol.setflags(write=False)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "Sigma0", Sigma0)
        object.__setattr__(self, "chol_Sigma0", chol)

    @property
    def n_modes(self) -> int:
        return self.pi.shape[0]

    @property
    def n_dim(self) -> int:
        return self.mu0.shape[0]


@dataclass(frozen=True)
class ObservationModel:
    """Gaussian observation noise covariance."""

    Sigma_x: np.ndarray
    chol_Sigma_x: np.ndarray = field(init=False)

    def __post_init__(self):
        Sigma_x = _frozen_array(self.Sigma_x, ndim=2, name="Sigma_x")
        chol = spd_cholesky(Sigma_x, "Sigma_x")
        chol.setflags(write=False)
        object.__setattr__(self, "Sigma_x", Sigma_x)
        object.__setattr__(self, "chol_Sigma_x", chol)

    @property
    def n_dim(self) -> int:
        return self.Sigma_x.shape[0]


@dataclass(frozen=True)
class ModelParams:
    """Full parameter set: rates, per-mode dynamics, initial law, noise."""

    rates: RateMatrix
    modes: tuple
    init: InitialLaw
    obs: ObservationModel

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        validate_params(self)

    @property
    def n_modes(self) -> int:
        return self.rates.n_modes

    @property
    def n_dim(self) -> int:
        return self.modes[0].n_dim

    # Stacked (K, n, n) / (K, n) views used by the compiled kernels.
    def A_stack(self) -> np.ndarray:
        return np.stack([m.A for m in self.modes])

    def b_stack(self) -> np.ndarray:
        return np.stack([m.b for m in self.modes])

    def Q_stack(self) -> np.ndarray:
        return np.stack([m.Q for m in self.modes])

    def D_stack(self) -> np.ndarray:
        return np.stack([m.D for m in self.modes])

    def D_inv_stack(self) -> np.ndarray:
        return np.stack([m.D_inv for m in self.modes])


def validate_params(p: ModelParams) -> None:
    """Check every container invariant plus cross-dimensional consistency.

    Raises ``ValueError`` naming the first violated invariant.  Individual
    containers validate themselves at construction; this re-checks them as
    a unit so hand-assembled parameter sets fail loudly.
    """
    if not isinstance(p.rates, RateMatrix):
        p_rates = RateMatrix(p.rates)  # raises with a precise message
    k = p.rates.n_modes
    if len(p.modes) != k:
        raise ValueError(f"dimension mismatch: {k} rate rows but {len(p.modes)} modes")
    n = p.modes[0].n_dim
    for z, mode in enumerate(p.modes):
        if mode.n_dim != n:
            raise ValueError(f"dimension mismatch: mode {z + 1} has n={mode.n_dim}, expected {n}")
    if p.init.n_modes != k:
        raise ValueError(f"dimension mismatch: pi has {p.init.n_modes} entries, expected {k}")
    if p.init.n_dim != n:
        raise ValueError(f"dimension mismatch: mu0 has n={p.init.n_dim}, expected {n}")
    if p.obs.n_dim != n:
        raise ValueError(f"dimension mismatch: Sigma_x has n={p.obs.n_dim}, expected {n}")


@dataclass(frozen=True)
class MjpPath:
    """Piecewise-constant mode trajectory on ``[0, T]``.

    ``states[k]`` holds between ``jump_times[k-1]`` and ``jump_times[k]``
    (with ``jump_times[-1] := 0`` and an implicit end at ``T``); the path is
    right-continuous, so ``mode_at(jump_times[k]) == states[k+1]``.
    """

    jump_times: np.ndarray
    states: np.ndarray
    horizon: float
    n_modes: int

    def __post_init__(self):
        jt = _frozen_array(self.jump_times, ndim=1, name="jump times")
        st = _frozen_array(self.states, dtype=np.int64, ndim=1, name="state sequence")
        if st.shape[0] != jt.shape[0] + 1:
            raise ValueError("state sequence must have one more entry than jump times")
        if jt.size and (np.any(np.diff(jt) <= 0.0) or jt[0] <= 0.0 or jt[-1] > self.horizon):
            raise ValueError("jump times must be strictly increasing within (0, T]")
        if np.any(st < 0) or np.any(st >= self.n_modes):
            raise ValueError(f"states must lie in 0..{self.n_modes - 1}")
        if jt.size and np.any(st[1:] == st[:-1]):
            raise ValueError("consecutive states must differ")
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "states", st)

    @property
    def n_jumps(self) -> int:
        return self.jump_times.shape[0]

    def mode_at(self, t) -> np.ndarray:
        """Mode value(s) at time(s) ``t`` (right-continuous)."""
        idx = np.searchsorted(self.jump_times, t, side="right")
        return self.states[idx]

    def modes_on_grid(self, grid: TimeGrid) -> np.ndarray:
        """Modes at every grid point; entry ``l`` is ``z(t_l)``."""
        return np.asarray(self.mode_at(grid.times), dtype=np.int64)

    def sojourn_times(self) -> np.ndarray:
        """Holding time of each visited state; telescopes to the horizon."""
        bounds = np.concatenate(([0.0], self.jump_times, [self.horizon]))
        return np.diff(bounds)


@dataclass(frozen=True)
class DiffusionPath:
    """Continuous state trajectory sampled on a :class:`TimeGrid`."""

    values: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        vals = _frozen_array(self.values, ndim=2, name="path values")
        if vals.shape[0] != self.grid.n_steps + 1:
            raise ValueError(f"path has {vals.shape[0]} rows, grid expects {self.grid.n_steps + 1}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("path contains non-finite values")
        object.__setattr__(self, "values", vals)

    @property
    def n_dim(self) -> int:
        return self.values.shape[1]

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)


@dataclass(frozen=True)
class ObservationSet:
    """Observation times and values; times must be strictly increasing."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = _frozen_array(self.times, ndim=1, name="observation times")
        x = _frozen_array(self.values, ndim=2, name="observation values")
        if x.shape[0] != t.shape[0]:
            raise ValueError("observation times and values disagree in length")
        if t.size and (np.any(np.diff(t) <= 0.0) or t[0] < 0.0):
            raise ValueError("observation times must be strictly increasing and >= 0")
        if not np.all(np.isfinite(x)):
            raise ValueError("observations contain non-finite values")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", x)

    @property
    def n_obs(self) -> int:
        return self.times.shape[0]

    @property
    def n_dim(self) -> int:
        return self.values.shape[1]

    def grid_indices(self, grid: TimeGrid) -> np.ndarray:
        """Snap each observation time to its grid index.

        Raises if any time is off-grid (beyond h/2) or two observations
        collapse onto the same grid point.
        """
        idx = np.array([grid.index_of(float(t)) for t in self.times], dtype=np.int64)
        if idx.size and np.any(np.diff(idx) <= 0):
            raise ValueError("two observations snap to the same grid point")
        return idx


@dataclass(frozen=True)
class PriorHyperparams:
    """Hyperparameters of every conjugate prior plus the MALA step size.

    Conventions (used consistently everywhere):

    * Gamma(shape ``s``, rate ``r``) with mean ``s / r``.
    * Inverse-Wishart(scale ``Psi``, dof ``lam``) with density proportional
      to ``|S|^{-(lam+n+1)/2} exp(-tr(Psi S^-1)/2)`` and mean
      ``Psi / (lam - n - 1)``.  Scale matrices are stored directly.
    * Matrix-Normal prior on ``[A(z), b(z)]`` with row covariance ``D_z``
      and column *precision* ``K_z`` (posterior column covariance is the
      inverse of the updated ``K_z``).
    """

    alpha: np.ndarray        # (K,)   Dirichlet for pi
    eta: np.ndarray          # (n,)   NIW location for mu0
    lam: float               # NIW precision scale
    Psi: np.ndarray          # (n,n)  NIW scale for Sigma0
    kappa: float             # NIW dof
    s: float                 # Gamma shape for rates
    r: float                 # Gamma rate for rates
    M: np.ndarray            # (K,n,n+1) Matrix-Normal means for [A, b]
    K_mat: np.ndarray        # (K,n+1,n+1) Matrix-Normal column precisions
    Psi_D: np.ndarray        # (K,n,n) IW scales for D_z
    lam_D: np.ndarray        # (K,)   IW dofs for D_z
    Psi_x: np.ndarray        # (n,n)  IW scale for Sigma_x
    lam_x: float             # IW dof for Sigma_x
    xi: float                # MALA step size

    def __post_init__(self):
        alpha = _frozen_array(self.alpha, ndim=1, name="alpha")
        eta = _frozen_array(self.eta, ndim=1, name="eta")
        Psi = _frozen_array(self.Psi, ndim=2, name="Psi")
        M = _frozen_array(self.M, ndim=3, name="M")
        K_mat = _frozen_array(self.K_mat, ndim=3, name="K")
        Psi_D = _frozen_array(self.Psi_D, ndim=3, name="Psi_D")
        lam_D = _frozen_array(np.broadcast_to(self.lam_D, alpha.shape), ndim=1, name="lam_D")
        Psi_x = _frozen_array(self.Psi_x, ndim=2, name="Psi_x")
        n = eta.shape[0]
        k = alpha.shape[0]
        if np.any(alpha <= 0.0):
            raise ValueError("alpha entries must be positive")
        if min(self.lam, self.s, self.r, self.xi) <= 0.0:
            raise ValueError("lam, s, r and xi must be positive")
        if self.kappa <= n + 1 or self.lam_x <= n + 1 or np.any(lam_D <= n + 1):
            raise ValueError(f"IW dofs must exceed n + 1 = {n + 1}")
        if M.shape != (k, n, n + 1) or K_mat.shape != (k, n + 1, n + 1):
            raise ValueError("dimension mismatch in Matrix-Normal hyperparameters")
        if Psi_D.shape != (k, n, n) or Psi_x.shape != (n, n) or Psi.shape != (n, n):
            raise ValueError("dimension mismatch in IW scale matrices")
        spd_cholesky(Psi, "Psi")
        spd_cholesky(Psi_x, "Psi_x")
        for z in range(k):
            spd_cholesky(K_mat[z], f"K[{z + 1}]")
            spd_cholesky(Psi_D[z], f"Psi_D[{z + 1}]")
        for key, val in (("alpha", alpha), ("eta", eta), ("Psi", Psi), ("M", M),
                         ("K_mat", K_mat), ("Psi_D", Psi_D), ("lam_D", lam_D),
                         ("Psi_x", Psi_x)):
            object.__setattr__(self, key, val)

    @property
    def n_modes(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_dim(self) -> int:
        return self.eta.shape[0]
