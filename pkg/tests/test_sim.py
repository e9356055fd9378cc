import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beacon import sim
from beacon.sim import PermGenerator, SimParams, VelocityField


def dense_darcy_solve(perm, source, pin=(0, 0)):
    """Reference: assemble the 5-point system cell by cell and solve densely."""
    rows, cols = perm.shape
    n = rows * cols
    A = np.zeros((n, n))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    t = 2 * perm[r, c] * perm[rr, cc] / (perm[r, c] + perm[rr, cc])
                    A[i, i] += t
                    A[i, rr * cols + cc] -= t
    b = source.ravel().copy()
    ref = pin[0] * cols + pin[1]
    A[ref, :] = 0.0
    A[:, ref] = 0.0
    A[ref, ref] = 1.0
    b[ref] = 0.0
    return np.linalg.solve(A, b).reshape(rows, cols)


def test_permeability_zero_variance_is_constant_per_row():
    gen = PermGenerator(base_std=0.0, pert_std=0.0, smoothing_radius=0)
    k = sim.sample_permeability(1, 8, 8, gen)
    assert np.all(k == 1.0)
    gen = PermGenerator(base_std=1.0, pert_std=0.0, smoothing_radius=0)
    k = sim.sample_permeability(1, 8, 8, gen)
    assert np.all(k == k[:, :1])
    assert np.all(k > 0)


def test_permeability_deterministic_and_seed_sensitive():
    a = sim.sample_permeability(1, 16, 12)
    b = sim.sample_permeability(1, 16, 12)
    c = sim.sample_permeability(2, 16, 12)
    assert np.array_equal(a, b)
    assert np.any(a != c)
    assert a.shape == (16, 12) and np.all(a > 0)


def test_permeability_layered():
    # rows within one layer correlate far more strongly than across layers
    k = np.log(sim.sample_permeability(3, 32, 32, PermGenerator(base_std=1.0, pert_std=0.1, layer_thickness=4)))
    within = np.mean([np.abs(k[r].mean() - k[r + 1].mean()) for r in range(0, 32, 4)])
    assert within < 0.3


def test_permeability_grid_too_small():
    with pytest.raises(ValueError, match="grid too small"):
        sim.sample_permeability(0, 3, 8)


def test_darcy_zero_source():
    perm = sim.sample_permeability(0, 8, 8)
    p, vel = sim.solve_darcy(perm, np.zeros((8, 8)))
    assert np.all(p == 0.0)
    assert vel.max_speed() == 0.0


def test_darcy_matches_dense_solve():
    perm = np.ones((8, 8))
    q = np.zeros((8, 8))
    q[2, 1] = 1.0
    q[6, 5] = -1.0
    p, _ = sim.solve_darcy(perm, q)
    ref = dense_darcy_solve(perm, q)
    assert np.max(np.abs(p - ref)) <= 1e-8


def test_darcy_matches_dense_solve_heterogeneous():
    perm = sim.sample_permeability(5, 8, 8)
    q = sim.injection_source((8, 8), SimParams(injection_cell=(4, 1)))
    p, _ = sim.solve_darcy(perm, q)
    assert np.max(np.abs(p - dense_darcy_solve(perm, q))) <= 1e-8 * max(1.0, np.abs(p).max())


def test_darcy_residual_bound():
    perm = sim.sample_permeability(7, 16, 16)
    q = sim.injection_source((16, 16), SimParams(injection_cell=(8, 1), injection_rate=3.0))
    p, _ = sim.solve_darcy(perm, q)
    assert sim.darcy_residual(perm, q, p) <= 1e-8 * np.linalg.norm(q)


def test_darcy_scaling_identity():
    perm = sim.sample_permeability(4, 8, 8)
    q = np.zeros((8, 8))
    q[3, 3], q[5, 6] = 1.0, -1.0
    p1, v1 = sim.solve_darcy(perm, q)
    p2, v2 = sim.solve_darcy(2 * perm, q)
    np.testing.assert_allclose(p2, p1 / 2, atol=1e-10)
    np.testing.assert_allclose(v2.vx, v1.vx, atol=1e-10)
    np.testing.assert_allclose(v2.vy, v1.vy, atol=1e-10)


def test_darcy_flux_balance():
    perm = sim.sample_permeability(9, 8, 8)
    q = np.zeros((8, 8))
    q[1, 1], q[6, 6] = 2.0, -2.0
    _, vel = sim.solve_darcy(perm, q)
    div = vel.vx[:, 1:] - vel.vx[:, :-1] + vel.vy[1:, :] - vel.vy[:-1, :]
    np.testing.assert_allclose(div, q, atol=1e-8)


def test_darcy_rejects_nonpositive_perm():
    perm = np.ones((4, 4))
    perm[1, 1] = 0.0
    with pytest.raises(ValueError):
        sim.solve_darcy(perm, np.zeros((4, 4)))


def test_pcg_reports_iterations_on_failure():
    perm = sim.sample_permeability(0, 8, 8)
    A = sim.darcy_operator(perm)[1:, 1:].tocsr()
    b = np.ones(63)
    with pytest.raises(sim.SolverError) as info:
        sim.pcg(A, b, tol=1e-14, max_iter=2)
    assert info.value.iterations == 2
    assert "2 iterations" in str(info.value)


def test_advance_null_dynamics():
    s = np.random.default_rng(0).uniform(0, 1, (8, 8))
    out = sim.advance_plume(s, VelocityField.zeros(8, 8), SimParams(injection_cell=(2, 1), injection_rate=0.0))
    assert np.array_equal(out, s)


def test_advance_injection_mass():
    params = SimParams(injection_cell=(4, 4), injection_rate=0.3, dt=0.5, steps_per_interval=3)
    s = np.zeros((8, 8))
    out = sim.advance_plume(s, VelocityField.zeros(8, 8), params)
    assert out.sum() == pytest.approx(0.3 * 0.5 * 3, abs=1e-14)
    assert out[4, 4] == pytest.approx(0.45)


def _uniform_right(rows, cols, v):
    vel = VelocityField.zeros(rows, cols)
    vel.vx[:, 1:-1] = v
    return vel


def test_advance_blob_center_of_mass():
    rows, cols = 8, 32
    s = np.zeros((rows, cols))
    s[3:5, 6:9] = 0.5
    params = SimParams(injection_cell=(2, 1), injection_rate=0.0, dt=0.5, steps_per_interval=20)
    v = 0.8
    out = sim.advance_plume(s, _uniform_right(rows, cols, v), params, clamp=False)
    c = np.arange(cols)
    com_before = (s.sum(axis=0) * c).sum() / s.sum()
    com_after = (out.sum(axis=0) * c).sum() / out.sum()
    assert abs((com_after - com_before) - v * 0.5 * 20) < 1.0


def test_advance_mass_conservation_heterogeneous():
    perm = sim.sample_permeability(2, 16, 16)
    q = np.zeros((16, 16))
    q[4, 2], q[12, 13] = 1.0, -1.0
    _, vel = sim.solve_darcy(perm, q)
    s = np.full((16, 16), 0.5)
    params = SimParams(injection_cell=(2, 1), injection_rate=0.0, dt=0.2, steps_per_interval=10)
    out = sim.advance_plume(s, vel, params, clamp=False)
    assert abs(out.sum() - s.sum()) <= 1e-10


def test_advance_cfl_guard():
    params = SimParams(injection_cell=(2, 1), injection_rate=0.0, dt=2.0)
    with pytest.raises(sim.SimulationError, match="CFL violated, reduce dt"):
        sim.advance_plume(np.zeros((8, 8)), _uniform_right(8, 8, 1.0), params)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), rate=st.floats(0.0, 5.0))
def test_advance_output_in_unit_interval(seed, rate):
    rng = np.random.default_rng(seed)
    perm = sim.sample_permeability(seed, 8, 8)
    params = SimParams(injection_cell=(3, 1), injection_rate=rate, dt=0.15, steps_per_interval=5)
    _, vel = sim.solve_darcy(perm, sim.injection_source((8, 8), params))
    out = sim.advance_plume(rng.uniform(0, 1, (8, 8)), vel, params)
    assert out.min() >= 0.0 and out.max() <= 1.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_advance_mass_conserved_without_injection(seed):
    rng = np.random.default_rng(seed)
    vel = VelocityField(rng.uniform(-0.5, 0.5, (8, 9)), rng.uniform(-0.5, 0.5, (9, 8)))
    vel.vx[:, [0, -1]] = 0.0
    vel.vy[[0, -1], :] = 0.0
    s = rng.uniform(0.4, 0.6, (8, 8))
    params = SimParams(injection_cell=(2, 1), injection_rate=0.0, dt=0.1, steps_per_interval=3)
    out = sim.advance_plume(s, vel, params, clamp=False)
    assert abs(out.sum() - s.sum()) <= 1e-10


def test_advance_deterministic():
    perm = sim.sample_permeability(1, 8, 8)
    params = SimParams(injection_cell=(4, 1), injection_rate=2.0, dt=0.2, steps_per_interval=4)
    a = sim.forecast_member(np.zeros((8, 8)), perm, params)
    b = sim.forecast_member(np.zeros((8, 8)), perm, params)
    assert np.array_equal(a, b)


def test_forecast_null_dynamics():
    prior = sim.PlumeEnsemble([np.full((8, 8), 0.25)], [np.ones((8, 8))], step=2)
    out = sim.forecast_ensemble(prior, SimParams(injection_cell=(2, 1), injection_rate=0.0))
    assert out.step == 3
    assert np.array_equal(out.members[0], prior.members[0])


def test_forecast_shape_and_perm_pairing():
    perms = [sim.sample_permeability(i, 8, 8) for i in range(3)]
    prior = sim.PlumeEnsemble([np.zeros((8, 8)) for _ in perms], perms)
    params = SimParams(injection_cell=(4, 1), injection_rate=2.0, dt=0.2, steps_per_interval=5)
    out = sim.forecast_ensemble(prior, params)
    assert len(out) == 3
    assert all(a is b for a, b in zip(out.perms, perms))
    assert not np.array_equal(out.members[0], out.members[1])


def test_forecast_error_names_member():
    perms = [np.ones((8, 8)), np.ones((8, 8))]
    prior = sim.PlumeEnsemble([np.zeros((8, 8))] * 2, perms)
    with pytest.raises(sim.SimulationError, match="member 0"):
        sim.forecast_ensemble(prior, SimParams(injection_cell=(4, 1), injection_rate=5.0, dt=1.0))


def test_ensemble_validation():
    with pytest.raises(ValueError):
        sim.PlumeEnsemble([], [])
    with pytest.raises(ValueError):
        sim.PlumeEnsemble([np.zeros((4, 4))], [])
    with pytest.raises(ValueError):
        sim.PlumeEnsemble([np.zeros((4, 4)), np.zeros((4, 5))], [np.ones((4, 4))] * 2)


def test_corrupt_observation():
    x = np.random.default_rng(0).uniform(0, 1, (64, 64))
    assert np.array_equal(sim.corrupt_observation(x, 0.0, 3), x)
    y = sim.corrupt_observation(x, 0.02, 3)
    assert abs(np.std(y - x) - 0.02) < 0.002
    assert np.array_equal(y, sim.corrupt_observation(x, 0.02, 3))
    with pytest.raises(ValueError):
        sim.corrupt_observation(x, -1.0, 0)


def test_corrupt_observation_not_clamped():
    y = sim.corrupt_observation(np.ones((16, 16)), 0.5, 1)
    assert y.max() > 1.0


def test_seismic_identity_and_constants():
    x = np.random.default_rng(1).uniform(0, 1, (8, 8))
    p0 = SimParams(seismic_blur_radius=0, seismic_sigma=0.0)
    assert np.array_equal(sim.seismic_surrogate(x, p0, 0), x)
    p2 = SimParams(seismic_blur_radius=2, seismic_sigma=0.0)
    np.testing.assert_allclose(sim.seismic_surrogate(np.full((8, 8), 0.3), p2, 0), 0.3, atol=1e-15)


def test_seismic_spike_spreads_to_3x3():
    x = np.zeros((7, 7))
    x[3, 3] = 1.0
    out = sim.seismic_surrogate(x, SimParams(seismic_blur_radius=1, seismic_sigma=0.0), 0)
    expected = np.zeros((7, 7))
    expected[2:5, 2:5] = 1.0 / 9.0
    np.testing.assert_allclose(out, expected, atol=1e-15)
    assert out.sum() == pytest.approx(1.0)
