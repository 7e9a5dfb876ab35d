import numpy as np
import pytest

import ssde


def minimal_params():
    return ssde.ModelParams(
        ssde.RateMatrix(np.zeros((1, 1))),
        (ssde.ModeDynamics([[-1.0]], [1.0], [[1.0]]),),
        ssde.InitialLaw([1.0], [0.0], [[1.0]]),
        ssde.ObservationModel([[0.5]]),
    )


class TestTimeGrid:
    def test_snapping(self, caplog):
        grid = ssde.TimeGrid(1.0004, 1e-3)
        assert grid.n_steps == 1000
        assert grid.horizon == pytest.approx(1.0, abs=1e-12)

    def test_uniform_increasing(self):
        t = ssde.TimeGrid(2.0, 0.1).times
        assert np.all(np.diff(t) > 0)
        assert np.allclose(np.diff(t), 0.1)

    def test_too_coarse_rejected(self):
        with pytest.raises(ValueError):
            ssde.TimeGrid(1.0, 0.9)

    def test_invalid_step(self):
        with pytest.raises(ValueError, match="invalid step"):
            ssde.TimeGrid(1.0, -0.1)

    def test_index_of_snaps_within_half_step(self):
        grid = ssde.TimeGrid(1.0, 0.1)
        assert grid.index_of(0.349) == 3
        assert grid.index_of(0.35001) == 4
        with pytest.raises(ValueError):
            grid.index_of(1.2)


class TestRateMatrix:
    def test_minimal_valid_model(self):
        minimal_params()  # K=1, zero rate matrix is legal

    def test_row_sum_violation(self):
        with pytest.raises(ValueError, match="rate row sum"):
            ssde.RateMatrix([[-1.0, 2.0], [1.0, -1.0]])

    def test_negative_off_diagonal(self):
        with pytest.raises(ValueError, match="negative off-diagonal"):
            ssde.RateMatrix([[1.0, -1.0], [1.0, -1.0]])

    def test_from_off_diagonal_rows_sum_to_zero(self, rng):
        off = rng.uniform(0.0, 3.0, size=(4, 4))
        rm = ssde.RateMatrix.from_off_diagonal(off)
        assert np.all(np.abs(rm.matrix.sum(axis=1)) <= 1e-12)
        assert np.allclose(rm.exit_rates, -np.diag(rm.matrix))


class TestSpd:
    def test_indefinite_rejected(self):
        with pytest.raises(ValueError, match="not SPD"):
            ssde.InitialLaw([1.0], [0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])

    def test_jitter_rescues_roundoff(self):
        v = np.array([1.0, 0.5, 0.25])
        m = np.outer(v, v) + 1e-9 * np.eye(3)  # near-singular PSD
        chol = ssde.spd_cholesky(m)
        assert np.allclose(chol @ chol.T, m, atol=1e-7)

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError, match="not SPD"):
            ssde.spd_cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestModeDynamics:
    def test_noise_covariance_symmetrized(self, rng):
        for _ in range(50):
            Q = rng.standard_normal((3, 3)) + 2 * np.eye(3)
            if np.linalg.cond(Q) > 1e6:
                continue
            dyn = ssde.ModeDynamics(np.eye(3) * -1, np.zeros(3), Q)
            assert np.array_equal(dyn.D, dyn.D.T)
            assert np.allclose(dyn.D_inv @ dyn.D, np.eye(3), atol=1e-9)

    def test_singular_dispersion_rejected(self):
        with pytest.raises(ValueError, match="not invertible"):
            ssde.ModeDynamics([[-1.0, 0.0], [0.0, -1.0]], [0.0, 0.0],
                              [[1.0, 0.0], [1.0, 0.0]])


class TestModelParams:
    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            ssde.ModelParams(
                ssde.RateMatrix(np.zeros((2, 2))),
                (ssde.ModeDynamics([[-1.0]], [1.0], [[1.0]]),),
                ssde.InitialLaw([0.5, 0.5], [0.0], [[1.0]]),
                ssde.ObservationModel([[0.5]]),
            )

    def test_simplex_violation(self):
        with pytest.raises(ValueError, match="simplex"):
            ssde.InitialLaw([0.4, 0.4], [0.0], [[1.0]])

    def test_validate_runs_on_valid(self):
        ssde.validate_params(minimal_params())


class TestMjpPath:
    def test_sojourns_telescope_to_horizon(self, rng):
        for _ in range(100):
            jt = np.sort(rng.uniform(0.0, 5.0, size=rng.integers(0, 9)))
            jt = np.unique(jt)
            states = np.arange(jt.size + 1) % 2
            path = ssde.MjpPath(jt, states, 5.0, 2)
            total = np.sum(path.sojourn_times())
            assert abs(total - 5.0) <= 1e-12 * 5.0

    def test_right_continuity(self):
        path = ssde.MjpPath([1.0, 3.0], [0, 1, 0], 4.0, 2)
        assert path.mode_at(1.0) == 1
        assert path.mode_at(0.999) == 0
        assert path.mode_at(3.0) == 0

    def test_repeated_state_rejected(self):
        with pytest.raises(ValueError, match="differ"):
            ssde.MjpPath([1.0], [0, 0], 2.0, 2)

    def test_modes_on_grid(self):
        grid = ssde.TimeGrid(1.0, 0.25)
        path = ssde.MjpPath([0.6], [0, 1], 1.0, 2)
        assert list(path.modes_on_grid(grid)) == [0, 0, 0, 1, 1]


class TestObservationSet:
    def test_decreasing_times_rejected(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            ssde.ObservationSet([0.2, 0.1], [[1.0], [2.0]])

    def test_grid_indices_snap(self):
        grid = ssde.TimeGrid(1.0, 0.1)
        obs = ssde.ObservationSet([0.1001, 0.5], [[1.0], [2.0]])
        assert list(obs.grid_indices(grid)) == [1, 5]

    def test_duplicate_grid_point_rejected(self):
        grid = ssde.TimeGrid(1.0, 0.1)
        obs = ssde.ObservationSet([0.1001, 0.1002], [[1.0], [2.0]])
        with pytest.raises(ValueError, match="same grid point"):
            obs.grid_indices(grid)


class TestPriorHyperparams:
    def test_dof_bounds(self):
        with pytest.raises(ValueError, match="dofs"):
            ssde.PriorHyperparams(
                alpha=[1.0], eta=[0.0], lam=1.0, Psi=[[1.0]], kappa=1.5,
                s=1.0, r=1.0, M=np.zeros((1, 1, 2)),
                K_mat=np.eye(2)[None], Psi_D=np.eye(1)[None],
                lam_D=[3.0], Psi_x=[[1.0]], lam_x=3.0, xi=1e-4)

    def test_valid_roundtrip_fields(self):
        h = ssde.PriorHyperparams(
            alpha=[1.0, 1.0], eta=[0.0], lam=1.0, Psi=[[0.1]], kappa=3.0,
            s=1.0, r=1.0, M=np.zeros((2, 1, 2)),
            K_mat=np.broadcast_to(np.eye(2), (2, 2, 2)).copy(),
            Psi_D=np.broadcast_to(np.eye(1) * 0.1, (2, 1, 1)).copy(),
            lam_D=[3.0, 3.0], Psi_x=[[0.5]], lam_x=3.0, xi=1e-4)
        assert h.n_modes == 2 and h.n_dim == 1
