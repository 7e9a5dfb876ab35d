"""Gibbs step for the mode path: forward filtering, backward sampling.

The mode filter ``p_f(z, t)`` conditioned on the diffusion path follows a
Kushner-Stratonovich equation driven by the path increments; with
state-independent drift it reduces to the classical Wonham filter.  The
time-reversed conditional mode process is again Markov with rates tied to
the filter: in a mode ``c`` at time t (moving backward), the intensity of
jumping to mode ``n`` is

    rate(c -> n, t) = Lambda(n, c) * p_f(n, t) / p_f(c, t),

i.e. the forward rate of the opposite transition weighted by the filter
ratio of the proposed over the current mode.  Paths are simulated backward
from an endpoint draw via thinning against a windowed rate bound, then
re-oriented forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .model import DiffusionPath, MjpPath, RateMatrix, TimeGrid
from .simulate import categorical, exponential

#: Floor applied to the current-mode filter probability in rate ratios.
PROB_FLOOR = 1e-12
#: Thinning lookahead window, in grid cells, and the bound safety factor.
THINNING_WINDOW = 64
THINNING_SAFETY = 1.2
#: Cap on (window duration) x (rate bound): the expected number of thinning
#: proposals spent per window.  Backward rates near filter zeros reach
#: ~1/PROB_FLOOR through the floored ratio; a fixed-width window bound
#: would then stall the sampler on benign stretches, so the window is
#: shortened until the budget holds (the bound stays valid regardless).
THINNING_BUDGET = 10.0


@dataclass(frozen=True)
class FilterTrajectory:
    """Mode filter probabilities at every grid point (renormalized)."""

    probs: np.ndarray  # (L+1, K)
    grid: TimeGrid

    @property
    def n_modes(self) -> int:
        return self.probs.shape[1]


def run_ks_filter(y: DiffusionPath, modes, rates: RateMatrix, pi: np.ndarray,
                  grid: TimeGrid) -> FilterTrajectory:
    """Euler discretization of the mode filter driven by the path ``y``.

    Starts from the prior mode weights (the initial state carries no mode
    information under a mode-independent initial law); per step negatives
    from discretization undershoot are clamped to zero before
    renormalizing.
    """
    if y.grid.n_steps != grid.n_steps or y.grid.step != grid.step:
        raise ValueError("path and grid disagree")
    K = rates.n_modes
    A = np.stack([m.A for m in modes])
    b = np.stack([m.b for m in modes])
    D_inv = np.stack([m.D_inv for m in modes])
    p0 = np.asarray(pi, dtype=float)
    p_out = np.empty((grid.n_steps + 1, K))
    fail = _kernels.ks_filter(grid.step, y.values, A, b, D_inv, rates.matrix,
                              p0, p_out)
    if fail >= 0:
        raise FloatingPointError(
            f"mode filter degenerated to zero at grid step {fail}; "
            "the step size may be too large for this model")
    return FilterTrajectory(p_out, grid)


def backward_rates(p_f: np.ndarray, rates: RateMatrix) -> np.ndarray:
    """Generator of the time-reversed mode process at one time point.

    Entry ``[c, n]`` is the backward jump intensity from mode c to mode n,
    ``Lambda(n, c) * p_f(n) / max(p_f(c), floor)``; the diagonal carries
    the negative row sums.  Vanishing filter weights are floored, never
    divided through.
    """
    p_f = np.asarray(p_f, dtype=float)
    mat = rates.matrix
    denom = np.maximum(p_f, PROB_FLOOR)
    out = mat.T * (p_f[np.newaxis, :] / denom[:, np.newaxis])
    np.fill_diagonal(out, 0.0)
    np.fill_diagonal(out, -out.sum(axis=1))
    return out


def _window_exit_rates(probs: np.ndarray, rates_into: np.ndarray,
                       self_rate: float, c: int) -> np.ndarray:
    # Exit rate of mode c per cell: sum_n  Lambda(n, c) p(n) / max(p(c), floor)
    num = probs @ rates_into - self_rate * probs[:, c]
    return num / np.maximum(probs[:, c], PROB_FLOOR)


def _thinning_window(p: np.ndarray, mat: np.ndarray, c: int, c_hi: int,
                     h: float) -> tuple[int, float]:
    """Window start cell and rate bound for the next thinning stretch.

    Scans backward from ``c_hi`` over at most :data:`THINNING_WINDOW`
    cells, truncating once the expected proposal count
    (safety * running max rate * covered duration) would exceed
    :data:`THINNING_BUDGET`; at least one cell is always covered.
    """
    lo = max(0, c_hi - THINNING_WINDOW + 1)
    exit_rates = _window_exit_rates(p[lo:c_hi + 1], mat[:, c], mat[c, c], c)
    back = exit_rates[::-1]  # cell c_hi first
    run_max = np.maximum.accumulate(back)
    spans = np.arange(1, back.size + 1) * h
    ok = THINNING_SAFETY * run_max * spans <= THINNING_BUDGET
    ok[0] = True
    m = back.size if ok.all() else max(1, int(np.argmin(ok)))
    return c_hi - m + 1, THINNING_SAFETY * float(run_max[m - 1])


def sample_conditional_switching(ft: FilterTrajectory, rates: RateMatrix,
                                 grid: TimeGrid,
                                 rng: np.random.Generator) -> MjpPath:
    """Draw one mode path from its full conditional by backward thinning.

    The endpoint mode is drawn from ``p_f(., T)``; the reversed process is
    then simulated as a time-inhomogeneous jump process whose rates are
    piecewise constant per grid cell (filter read at the cell's earlier
    endpoint).  Proposals come from a constant bound over a lookahead
    window of up to :data:`THINNING_WINDOW` cells with safety factor
    :data:`THINNING_SAFETY` (shortened under :data:`THINNING_BUDGET` where
    rates spike); a proposal beating the bound is a programming error and
    aborts.
    """
    p = ft.probs
    K = ft.n_modes
    L = grid.n_steps
    h = grid.step
    mat = rates.matrix

    c = categorical(rng, p[L])
    t = grid.horizon
    states_back = [c]
    jumps_back = []
    while t > 0.0:
        c_hi = min(L - 1, max(0, int(np.ceil(t / h - 1e-9)) - 1))
        w_lo, lam_bar = _thinning_window(p, mat, c, c_hi, h)
        t_lo = w_lo * h
        if lam_bar <= 0.0:
            t = t_lo
            continue
        while True:
            t_cand = t - exponential(rng, lam_bar)
            if t_cand <= t_lo:
                t = t_lo
                break
            l = min(c_hi, max(w_lo, int(t_cand / h)))
            weights = mat[:, c] * p[l] / max(p[l, c], PROB_FLOOR)
            weights[c] = 0.0
            exit_here = float(weights.sum())
            if exit_here > lam_bar * (1.0 + 1e-9):
                raise RuntimeError(
                    f"thinning bound violated at t={t_cand!r}: "
                    f"exit rate {exit_here!r} > bound {lam_bar!r}")
            if rng.random() * lam_bar < exit_here:
                c = categorical(rng, weights)
                jumps_back.append(t_cand)
                states_back.append(c)
                t = t_cand
                break
            t = t_cand
    return MjpPath(np.array(jumps_back[::-1]),
                   np.array(states_back[::-1], dtype=np.int64),
                   grid.horizon, K)


def integrate_backward_master_equation(ft: FilterTrajectory,
                                       rates: RateMatrix,
                                       grid: TimeGrid) -> np.ndarray:
    """Smoothing marginals by RK4 integration of the backward master
    equation, using the same per-cell-constant reversed rates as the
    thinning sampler.  Starts from ``p_s(., T) = p_f(., T)``.

    Cells whose reversed rates are stiff on the grid scale (filter weights
    near zero inflate the floored ratio) are sub-stepped, capped at 1000
    substeps; beyond the cap the decaying component is clamped, which is
    harmless exactly where the smoothing mass already vanishes.
    """
    L = grid.n_steps
    K = ft.n_modes
    out = np.empty((L + 1, K))
    q = ft.probs[L].copy()
    out[L] = q
    for l in range(L - 1, -1, -1):
        gen_t = backward_rates(ft.probs[l], rates).T
        n_sub = min(1000, max(1, int(np.ceil(grid.step * np.abs(np.diag(gen_t)).max(initial=0.0)))))
        h = grid.step / n_sub
        for _ in range(n_sub):
            k1 = gen_t @ q
            k2 = gen_t @ (q + 0.5 * h * k1)
            k3 = gen_t @ (q + 0.5 * h * k2)
            k4 = gen_t @ (q + h * k3)
            q = q + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            q = np.maximum(q, 0.0)
            q /= q.sum()
        out[l] = q
    return out
