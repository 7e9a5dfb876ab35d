import numpy as np
import pytest
import scipy.stats

import ssde
from conftest import random_stable_mode
from oracles import kalman_rts_smoother, moment_odes


def make_obs_on_grid(grid, fractions, values):
    times = [grid.times[int(round(f * grid.n_steps))] for f in fractions]
    return ssde.ObservationSet(times, values)


class TestInformationFilter:
    def test_no_observations_filter_is_zero(self, two_mode_model, rng):
        grid = ssde.TimeGrid(1.0, 1e-2)
        z = ssde.simulate_mjp(two_mode_model.rates, two_mode_model.init.pi,
                              grid.horizon, rng)
        bi = ssde.run_information_filter(z, two_mode_model.modes,
                                         ssde.ObservationSet([], np.zeros((0, 1))),
                                         two_mode_model.obs.Sigma_x, grid)
        assert np.all(bi.precision == 0.0)
        assert np.all(bi.linear == 0.0)

    def test_scalar_riccati_closed_form(self):
        # A=0, b=0, D=1, one observation at T with noise sx:
        # I(t) = 1 / (sx + (T - t)).
        sx = 0.2
        grid = ssde.TimeGrid(1.0, 1e-4)
        mode = ssde.ModeDynamics([[0.0]], [0.0], [[1.0]])
        z = ssde.MjpPath([], [0], grid.horizon, 1)
        obs = ssde.ObservationSet([grid.horizon], [[0.7]])
        bi = ssde.run_information_filter(z, [mode], obs, [[sx]], grid)
        expected = 1.0 / (sx + (grid.horizon - grid.times))
        assert np.max(np.abs(bi.precision[:, 0, 0] - expected)) < 1e-9
        # right limit at T is the pre-reset terminal condition
        assert bi.precision_after[0, 0, 0] == 0.0

    def test_terminal_condition_before_reset(self, two_mode_model, rng):
        grid = ssde.TimeGrid(1.0, 1e-2)
        z = ssde.simulate_mjp(two_mode_model.rates, two_mode_model.init.pi,
                              grid.horizon, rng)
        obs = make_obs_on_grid(grid, [0.5], [[0.3]])
        bi = ssde.run_information_filter(z, two_mode_model.modes, obs,
                                         two_mode_model.obs.Sigma_x, grid)
        assert np.all(bi.precision[-1] == 0.0)
        assert np.all(bi.linear[-1] == 0.0)

    def test_symmetry_and_psd_random_instances(self, rng):
        for trial in range(20):
            n = int(rng.integers(1, 4))
            grid = ssde.TimeGrid(1.0, 1e-3)
            modes = [random_stable_mode(rng, n) for _ in range(2)]
            rates = ssde.RateMatrix([[-1.0, 1.0], [1.5, -1.5]])
            z = ssde.simulate_mjp(rates, [0.5, 0.5], grid.horizon, rng)
            n_obs = int(rng.integers(1, 5))
            fracs = np.sort(rng.choice(np.arange(1, 20), n_obs, replace=False)) / 20
            obs = make_obs_on_grid(grid, fracs, rng.standard_normal((n_obs, n)))
            q = rng.standard_normal((n, n)) * 0.2
            sx = q @ q.T + 0.5 * np.eye(n)
            bi = ssde.run_information_filter(z, modes, obs, sx, grid)
            asym = np.abs(bi.precision - np.transpose(bi.precision, (0, 2, 1))).max()
            assert asym <= 1e-9
            eigs = np.linalg.eigvalsh(bi.precision)
            assert eigs.min() >= -1e-9

    def test_scalar_precision_monotone_between_observations(self):
        # With A=b=0, dI/dt = I D I >= 0 along the forward time axis, so
        # the stored precision grows within each inter-observation segment
        # (resets jump it up at segment ends, down across them).
        grid = ssde.TimeGrid(1.0, 1e-3)
        mode = ssde.ModeDynamics([[0.0]], [0.0], [[1.0]])
        z = ssde.MjpPath([], [0], grid.horizon, 1)
        obs = make_obs_on_grid(grid, [0.5, 1.0], [[0.1], [-0.2]])
        bi = ssde.run_information_filter(z, [mode], obs, [[0.3]], grid)
        I = bi.precision[:, 0, 0]
        mid = grid.index_of(0.5)
        assert np.all(np.diff(I[:mid + 1]) >= -1e-12)
        assert np.all(np.diff(I[mid + 1:]) >= -1e-12)


class TestKalmanOracleAgreement:
    def test_empty_observation_stack(self, two_mode_model, rng):
        grid = ssde.TimeGrid(1.0, 1e-2)
        z = ssde.simulate_mjp(two_mode_model.rates, two_mode_model.init.pi,
                              grid.horizon, rng)
        oracle = ssde.run_kalman_backward_oracle(
            z, two_mode_model.modes, ssde.ObservationSet([], np.zeros((0, 1))),
            two_mode_model.obs.Sigma_x, grid)
        assert oracle.F[0].shape == (0, 1)
        assert oracle.log_beta(0, np.array([1.3])) == 0.0

    def test_scalar_single_observation_closed_form(self):
        sx = 0.2
        grid = ssde.TimeGrid(1.0, 1e-3)
        mode = ssde.ModeDynamics([[0.0]], [0.0], [[1.0]])
        z = ssde.MjpPath([], [0], grid.horizon, 1)
        obs = ssde.ObservationSet([grid.horizon], [[0.7]])
        oracle = ssde.run_kalman_backward_oracle(z, [mode], obs, [[sx]], grid)
        for l in (0, 300, 999):
            assert oracle.F[l][0, 0] == pytest.approx(1.0, abs=1e-12)
            assert oracle.m[l][0] == pytest.approx(0.0, abs=1e-12)
            t = grid.times[l]
            assert oracle.Sigma[l][0, 0] == pytest.approx(sx + (grid.horizon - t), rel=1e-10)

    def test_gradient_cross_oracle(self, rng):
        # (I, a) filter vs stacked (F, m, Sigma) filter on random 2-mode,
        # n=2 instances: gradients of log beta agree at every grid point.
        for trial in range(5):
            n = 2
            grid = ssde.TimeGrid(1.0, 1e-3)
            modes = [random_stable_mode(rng, n) for _ in range(2)]
            rates = ssde.RateMatrix([[-1.0, 1.0], [1.0, -1.0]])
            z = ssde.simulate_mjp(rates, [0.5, 0.5], grid.horizon, rng)
            fracs = np.sort(rng.choice(np.arange(1, 20), 6, replace=False)) / 20
            obs = make_obs_on_grid(grid, fracs, rng.standard_normal((6, n)))
            sx = 0.4 * np.eye(n)
            bi = ssde.run_information_filter(z, modes, obs, sx, grid)
            oracle = ssde.run_kalman_backward_oracle(z, modes, obs, sx, grid)
            y_probe = rng.standard_normal((3, n))
            worst = 0.0
            for l in range(grid.n_steps + 1):
                for y in y_probe:
                    diff = bi.grad_log_beta(l, y) - oracle.grad_log_beta(l, y)
                    worst = max(worst, np.abs(diff).max())
            assert worst < 1e-6

    def test_gradient_matches_finite_difference_of_log_beta(self, rng):
        n = 2
        grid = ssde.TimeGrid(1.0, 1e-3)
        modes = [random_stable_mode(rng, n) for _ in range(2)]
        rates = ssde.RateMatrix([[-0.8, 0.8], [1.2, -1.2]])
        z = ssde.simulate_mjp(rates, [0.5, 0.5], grid.horizon, rng)
        obs = make_obs_on_grid(grid, [0.25, 0.6, 0.9], rng.standard_normal((3, n)))
        sx = 0.5 * np.eye(n)
        bi = ssde.run_information_filter(z, modes, obs, sx, grid)
        oracle = ssde.run_kalman_backward_oracle(z, modes, obs, sx, grid)
        eps = 1e-5
        for _ in range(10):
            l = int(rng.integers(0, grid.n_steps + 1))
            y = rng.standard_normal(n)
            grad = bi.grad_log_beta(l, y)
            fd = np.empty(n)
            for i in range(n):
                e = np.zeros(n)
                e[i] = eps
                fd[i] = (oracle.log_beta(l, y + e) - oracle.log_beta(l, y - e)) / (2 * eps)
            denom = max(1.0, np.abs(grad).max())
            assert np.abs(grad - fd).max() / denom < 1e-4


class TestPosteriorInitialLaw:
    def test_no_data_returns_prior(self):
        mu, sig = ssde.posterior_initial_law(np.zeros((2, 2)), np.zeros(2),
                                             np.array([1.0, -1.0]),
                                             np.diag([2.0, 3.0]))
        assert np.allclose(mu, [1.0, -1.0])
        assert np.allclose(sig, np.diag([2.0, 3.0]))

    def test_scalar_formula(self):
        mu, sig = ssde.posterior_initial_law(np.array([[1.0]]), np.array([2.0]),
                                             np.array([0.0]), np.array([[1.0]]))
        assert sig[0, 0] == pytest.approx(0.5, abs=1e-14)
        assert mu[0] == pytest.approx(1.0, abs=1e-14)

    def test_information_never_increases_covariance(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 5))
            q = rng.standard_normal((n, n))
            sigma0 = q @ q.T + 0.1 * np.eye(n)
            w = rng.standard_normal((n, n)) * 0.5
            info = w @ w.T
            mu, sig = ssde.posterior_initial_law(info, rng.standard_normal(n),
                                                 rng.standard_normal(n), sigma0)
            assert np.linalg.eigvalsh(sig).min() > 0
            assert np.linalg.eigvalsh(sigma0 - sig).min() >= -1e-10


class TestConditionalDiffusion:
    def test_no_data_drift_reduces_to_prior(self, two_mode_model, rng):
        # With I = a = 0 the h-transformed drift equals the prior drift
        # term by term, so paths from the two simulators coincide when
        # driven by the same noise.
        grid = ssde.TimeGrid(1.0, 1e-2)
        z = ssde.simulate_mjp(two_mode_model.rates, two_mode_model.init.pi,
                              grid.horizon, rng)
        bi = ssde.run_information_filter(z, two_mode_model.modes,
                                         ssde.ObservationSet([], np.zeros((0, 1))),
                                         two_mode_model.obs.Sigma_x, grid)
        seed = 999
        y_cond = ssde.sample_conditional_diffusion(
            z, bi, two_mode_model.modes, two_mode_model.init, grid,
            np.random.default_rng(seed))
        # Replay the same generator stream manually: first the initial draw,
        # then the prior path from the identical noise.
        rng2 = np.random.default_rng(seed)
        y0 = (two_mode_model.init.mu0
              + two_mode_model.init.chol_Sigma0 @ rng2.standard_normal(1))
        y_prior = ssde.simulate_ssde(z, two_mode_model.modes, y0, grid, rng2)
        assert np.allclose(y_cond.values, y_prior.values, atol=1e-12)

    def test_single_mode_matches_rts_smoother(self, rng):
        # K=1: conditional path sampling is exact Gaussian smoothing; the
        # empirical moments over many draws must match the discrete-time
        # RTS smoother on the Euler-discretized model.
        grid = ssde.TimeGrid(2.0, 1e-3)
        mode = ssde.ModeDynamics([[-1.0]], [1.0], [[np.sqrt(0.5)]])
        init = ssde.InitialLaw([1.0], [0.0], [[0.6]])
        z = ssde.MjpPath([], [0], grid.horizon, 1)
        sx = np.array([[0.1]])
        obs = make_obs_on_grid(grid, [0.25, 0.5, 0.75, 1.0],
                               [[1.4], [0.2], [1.1], [0.6]])
        bi = ssde.run_information_filter(z, [mode], obs, sx, grid)
        n_draws = 4000
        idx = obs.grid_indices(grid)
        draws = np.empty((n_draws, idx.size))
        for i in range(n_draws):
            y = ssde.sample_conditional_diffusion(z, bi, [mode], init, grid, rng)
            draws[i] = y.values[idx, 0]
        m_s, P_s = kalman_rts_smoother(
            z.modes_on_grid(grid)[:grid.n_steps], np.array([mode.A]),
            np.array([mode.b]), np.array([mode.D]), grid.step,
            init.mu0, init.Sigma0, idx, obs.values, sx)
        se = np.sqrt(P_s[idx, 0, 0] / n_draws)
        assert np.all(np.abs(draws.mean(axis=0) - m_s[idx, 0]) < 3.5 * se)
        var_se = P_s[idx, 0, 0] * np.sqrt(2.0 / (n_draws - 1))
        assert np.all(np.abs(draws.var(axis=0, ddof=1) - P_s[idx, 0, 0]) < 3.5 * var_se)

    def test_no_observations_matches_moment_odes(self, rng):
        grid = ssde.TimeGrid(1.0, 1e-3)
        modes = (ssde.ModeDynamics([[-0.5]], [0.8], [[np.sqrt(0.3)]]),
                 ssde.ModeDynamics([[-1.5]], [-0.5], [[np.sqrt(0.6)]]))
        init = ssde.InitialLaw([0.5, 0.5], [0.2], [[0.4]])
        z = ssde.MjpPath([0.4], [0, 1], grid.horizon, 2)
        bi = ssde.run_information_filter(z, modes,
                                         ssde.ObservationSet([], np.zeros((0, 1))),
                                         np.eye(1), grid)
        n_draws = 5000
        finals = np.empty(n_draws)
        for i in range(n_draws):
            y = ssde.sample_conditional_diffusion(z, bi, modes, init, grid, rng)
            finals[i] = y.values[-1, 0]
        ms, Ps = moment_odes(z.modes_on_grid(grid)[:grid.n_steps],
                             np.stack([m.A for m in modes]),
                             np.stack([m.b for m in modes]),
                             np.stack([m.D for m in modes]), grid.step,
                             init.mu0, init.Sigma0)
        se_mean = np.sqrt(Ps[-1, 0, 0] / n_draws)
        assert abs(finals.mean() - ms[-1, 0]) < 3 * se_mean
        se_var = Ps[-1, 0, 0] * np.sqrt(2.0 / (n_draws - 1))
        assert abs(finals.var(ddof=1) - Ps[-1, 0, 0]) < 3 * se_var

    def test_marginal_distribution_two_sample_ks(self, rng):
        # n=1, K=1, one observation: compare sampled time-t marginals with
        # Gaussians drawn from the RTS smoothing law of the discrete model.
        grid = ssde.TimeGrid(1.0, 1e-3)
        mode = ssde.ModeDynamics([[-0.7]], [0.3], [[np.sqrt(0.4)]])
        init = ssde.InitialLaw([1.0], [0.1], [[0.5]])
        z = ssde.MjpPath([], [0], grid.horizon, 1)
        sx = np.array([[0.15]])
        obs = make_obs_on_grid(grid, [0.6], [[1.2]])
        bi = ssde.run_information_filter(z, [mode], obs, sx, grid)
        n_draws = 10_000
        probe = grid.index_of(0.3)
        samples = np.empty(n_draws)
        for i in range(n_draws):
            y = ssde.sample_conditional_diffusion(z, bi, [mode], init, grid, rng)
            samples[i] = y.values[probe, 0]
        m_s, P_s = kalman_rts_smoother(
            z.modes_on_grid(grid)[:grid.n_steps], np.array([mode.A]),
            np.array([mode.b]), np.array([mode.D]), grid.step,
            init.mu0, init.Sigma0, obs.grid_indices(grid), obs.values, sx)
        reference = m_s[probe, 0] + np.sqrt(P_s[probe, 0, 0]) * rng.standard_normal(n_draws)
        res = scipy.stats.ks_2samp(samples, reference)
        assert res.pvalue > 0.01

    def test_observation_at_time_zero_enters_initial_law(self, rng):
        grid = ssde.TimeGrid(1.0, 1e-2)
        mode = ssde.ModeDynamics([[-1.0]], [0.0], [[1.0]])
        z = ssde.MjpPath([], [0], grid.horizon, 1)
        sx = np.array([[0.1]])
        obs = ssde.ObservationSet([0.0], [[2.0]])
        bi = ssde.run_information_filter(z, [mode], obs, sx, grid)
        assert bi.precision[0, 0, 0] == pytest.approx(10.0, rel=1e-12)
        mu, sig = ssde.posterior_initial_law(bi.precision[0], bi.linear[0],
                                             np.array([0.0]), np.array([[1.0]]))
        # posterior precision 1 + 10, mean pulled toward the observation
        assert sig[0, 0] == pytest.approx(1.0 / 11.0, rel=1e-12)
        assert mu[0] == pytest.approx(20.0 / 11.0, rel=1e-12)
