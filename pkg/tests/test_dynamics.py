import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from dvmpc.costs import QuadraticCost, ZeroCost
from dvmpc.dynamics import (ControlAffineModel, EnvironmentSpec, linear_model, null_environment, path_cost,
                            read_trajectory_csv, rollout, rollout_batch, simulate, step_deterministic,
                            step_stochastic, transitions, zero_policy)
from dvmpc.envs import make_environment, point_mass_2d_walls, scalar_lq
from dvmpc.errors import ContractViolation, IntegrationDiverged
from dvmpc.lq_oracle import policy_from, solve_riccati


def identity_model(n=2, lam=0.0):
    return linear_model(np.zeros((n, n)), np.eye(n), np.eye(n), lam)


spd = st.integers(1, 4).flatmap(
    lambda m: st.lists(st.floats(-2, 2), min_size=m * m, max_size=m * m).map(
        lambda v: np.array(v).reshape(m, m) @ np.array(v).reshape(m, m).T + 0.1 * np.eye(m)))


@settings(max_examples=50, deadline=None)
@given(R=spd, lam=st.floats(0.0, 10.0))
def test_sigma_times_r_is_lambda_identity(R, lam):
    m = R.shape[0]
    model = ControlAffineModel(m, m, lambda t, x: 0 * x, lambda t, x: np.eye(m), lam, R)
    np.testing.assert_allclose(model.noise_cov @ model.R, lam * np.eye(m), atol=1e-12 * max(1.0, lam) * np.abs(R).max() * 10)
    xi = model.xi(0.0, np.zeros(m))
    np.testing.assert_array_equal(xi, xi.T)
    assert np.linalg.eigvalsh(xi).min() >= -1e-12


def test_rejects_asymmetric_or_indefinite_penalty():
    with pytest.raises(ContractViolation):
        ControlAffineModel(1, 2, lambda t, x: x, lambda t, x: np.ones((1, 2)), 1.0, [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ContractViolation):
        ControlAffineModel(1, 1, lambda t, x: x, lambda t, x: np.ones((1, 1)), 1.0, [[-1.0]])


def test_stochastic_step_zero_dynamics_zero_noise(rng):
    model = identity_model(2, lam=0.0)
    x = np.array([0.3, -1.2])
    x_next, dB = step_stochastic(model, 0.0, x, np.zeros(2), 0.1, rng)
    np.testing.assert_array_equal(x_next, x)
    np.testing.assert_array_equal(dB, 0.0)


def test_stochastic_step_scalar_variance(rng):
    model = linear_model([[0.0]], [[1.0]], [[1.0]], 1.0)
    M = 100_000
    X = np.zeros((M, 1))
    Xn, _ = step_stochastic(model, 0.0, X, np.zeros((M, 1)), 0.01, rng)
    d = Xn[:, 0]
    var = d.var(ddof=1)
    se = var * np.sqrt(2.0 / (M - 1))
    assert abs(var - 0.01) <= 3 * se


def test_stochastic_increment_moments():
    rng = np.random.default_rng(0)
    A = np.array([[0.0, 1.0], [-1.0, -0.3]])
    B = np.array([[0.2, 0.0], [1.0, 0.5]])
    R = np.array([[2.0, 0.3], [0.3, 1.0]])
    model = linear_model(A, B, R, 0.7)
    M, dt = 100_000, 0.05
    x = np.array([0.4, -0.2])
    u = np.array([0.5, -1.0])
    Xn, _ = step_stochastic(model, 0.0, np.tile(x, (M, 1)), np.tile(u, (M, 1)), dt, rng)
    d = Xn - x
    mean_expected = (A @ x + B @ u) * dt
    cov_expected = B @ model.noise_cov @ B.T * dt
    se_mean = np.sqrt(np.diag(cov_expected) / M)
    assert np.all(np.abs(d.mean(axis=0) - mean_expected) <= 3 * se_mean)
    cov = np.cov(d.T)
    se_cov = np.sqrt((cov_expected**2 + np.outer(np.diag(cov_expected), np.diag(cov_expected))) / M)
    assert np.all(np.abs(cov - cov_expected) <= 3 * se_cov)


def test_point_mass_step_structure(rng):
    env = point_mass_2d_walls(lam=0.0, damping=0.0)
    x = np.array([0.2, -0.5, 0.3, -0.1])
    xn, _ = step_stochastic(env.model, 0.0, x, np.array([1.0, 0.0]), 0.01, rng)
    np.testing.assert_allclose(xn[:2], x[:2] + x[2:] * 0.01, atol=1e-15)
    np.testing.assert_allclose(xn[2:], x[2:] + np.array([1.0, 0.0]) * 0.01, atol=1e-15)


def test_deterministic_step_trivial_and_exponential():
    model = ControlAffineModel(2, 1, lambda t, x: 0 * x, lambda t, x: np.zeros((2, 1)), 0.0, [[1.0]])
    x = np.array([1.0, 2.0])
    np.testing.assert_array_equal(step_deterministic(model, 0.0, x, np.ones(1), 0.1), x)
    decay = linear_model([[-1.0]], [[0.0]], [[1.0]], 0.0)
    xn = step_deterministic(decay, 0.0, np.array([1.0]), np.zeros(1), 0.1)
    assert abs(xn[0] - np.exp(-0.1)) < 1e-6


def test_rk4_local_error_is_fifth_order():
    A = np.array([[0.0, 1.0], [-2.0, -0.5]])
    model = linear_model(A, np.zeros((2, 1)), [[1.0]], 0.0)
    x = np.array([1.0, -0.5])
    errs = []
    for h in (0.1, 0.05, 0.025):
        xn = step_deterministic(model, 0.0, x, np.zeros(1), h)
        errs.append(np.linalg.norm(xn - expm(A * h) @ x))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 4.5)


def test_linear_rollout_matches_matrix_exponential():
    A = np.array([[0.0, 1.0], [-4.0, -0.2]])
    model = linear_model(A, np.zeros((2, 1)), [[1.0]], 0.0)
    env = null_environment(model, 1.0, 1e-3)
    x0 = np.array([1.0, 0.5])
    traj = rollout(env, lambda t, x: np.zeros(1), x0)
    exact = expm(A * 1.0) @ x0
    assert np.linalg.norm(traj.states[-1] - exact) / np.linalg.norm(exact) < 1e-8


def test_divergence_is_reported_with_time():
    blow = ControlAffineModel(1, 1, lambda t, x: np.full_like(x, np.inf), lambda t, x: np.ones((1, 1)), 0.0, [[1.0]])
    with pytest.raises(IntegrationDiverged) as err:
        step_deterministic(blow, 0.7, np.array([1.0]), np.zeros(1), 0.1)
    assert err.value.time == 0.7


def test_zero_policy_zero_cost_rollout():
    env = null_environment(identity_model(2), 1.0, 0.1)
    traj = rollout(env, zero_policy(env.model), np.array([0.1, 0.2]))
    assert traj.n_steps == 10 and len(traj.states) == 11 and len(traj.noise) == 10
    np.testing.assert_array_equal(traj.step_costs, 0.0)
    assert not traj.terminated_early
    np.testing.assert_array_equal(traj.noise, 0.0)


def test_wall_termination_adds_penalty():
    env = point_mass_2d_walls(lam=0.0, discount=0.9)
    x0 = np.array([0.0, -0.5, 0.0, 1.0])
    traj = rollout(env, lambda t, x: np.zeros(2), x0)
    assert traj.terminated_early
    i = traj.termination_index
    assert traj.n_steps == i + 1
    q = env.running_cost.value(traj.times[i], traj.states[i]) * env.dt
    assert traj.step_costs[-1] == pytest.approx(0.9 ** traj.times[i] * (q + env.termination_penalty))
    assert path_cost(traj, env) == pytest.approx(traj.step_costs.sum())


def test_deterministic_rollout_is_bit_identical():
    env = point_mass_2d_walls()
    pol = lambda t, x: np.array([np.sin(t), x[0]])
    a = rollout(env, pol, env.eval_starts[2])
    b = rollout(env, pol, env.eval_starts[2])
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.step_costs, b.step_costs)


def test_wrong_control_dimension_is_contract_violation():
    env = null_environment(identity_model(2), 1.0, 0.1)
    with pytest.raises(ContractViolation):
        rollout(env, lambda t, x: np.zeros(3), np.zeros(2))


def test_path_cost_terminal_only():
    model = identity_model(1)
    env = EnvironmentSpec("t", model, ZeroCost(1), QuadraticCost([[10.0]]), 1.0, 0.1)
    traj = rollout(env, zero_policy(model), np.array([1.0]))
    assert path_cost(traj, env) == pytest.approx(5.0)


@settings(max_examples=20, deadline=None)
@given(k=st.floats(0.0, 3.0), x0=st.floats(-2, 2), gamma=st.floats(0.5, 1.0))
def test_deterministic_path_cost_telescopes(k, x0, gamma):
    model = linear_model([[0.3]], [[1.0]], [[0.5]], 0.0)
    env = EnvironmentSpec("lq", model, QuadraticCost([[1.0]]), QuadraticCost([[2.0]]), 1.0, 0.05, discount=gamma)
    traj = rollout(env, lambda t, x: -k * x, np.array([x0]))
    qf = 0.5 * 2.0 * traj.states[-1, 0] ** 2
    assert path_cost(traj, env) == pytest.approx(traj.step_costs.sum() + gamma**1.0 * qf, rel=1e-14, abs=1e-14)


def test_stochastic_path_cost_includes_ito_term(rng):
    env = scalar_lq(T=0.5, dt=0.05)
    traj = rollout(env, lambda t, x: np.array([1.0]), np.array([0.2]), stochastic=True, rng=rng)
    ito = float(np.sum(traj.controls[:, 0] * env.model.R[0, 0] * traj.noise[:, 0]))
    expected = traj.step_costs.sum() + ito + env.terminal_cost.value(0.5, traj.states[-1])
    assert path_cost(traj, env) == pytest.approx(expected)
    traj.noise = None
    with pytest.raises(ContractViolation):
        path_cost(traj, env)


def test_optimal_policy_mean_path_cost_matches_value(rng, scalar_solution):
    env = scalar_lq(T=1.0, dt=0.01)
    x0 = 1.0
    M = 100_000
    paths = simulate(env, policy_from(scalar_solution), np.full((M, 1), x0), stochastic=True, rng=rng)
    v = float(scalar_solution.value(0.0, np.array([x0])))
    assert abs(paths.path_costs(env).mean() - v) / v < 0.02


def test_batch_and_single_rollouts_agree():
    env = point_mass_2d_walls()
    pol = lambda t, X: -0.5 * X[..., 2:4] + np.array([0.3, 1.0])
    batch = rollout_batch(env, pol, env.eval_starts)
    for x0, tb in zip(env.eval_starts, batch):
        ts = rollout(env, pol, x0)
        np.testing.assert_allclose(tb.states, ts.states, rtol=0, atol=1e-14)
        assert tb.terminated_early == ts.terminated_early


def test_trajectory_csv_round_trip(tmp_path):
    env = point_mass_2d_walls()
    traj = rollout(env, lambda t, x: np.array([0.1, 0.2]), env.eval_starts[0])
    p = tmp_path / "traj.csv"
    traj.to_csv(p)
    header = p.read_text().splitlines()[0]
    assert header == "t,x0,x1,x2,x3,u0,u1,cost,terminated"
    data = read_trajectory_csv(p)
    np.testing.assert_array_equal(data["x1"], traj.states[:-1, 1])
    np.testing.assert_array_equal(data["cost"], traj.step_costs)


def test_transitions_carry_stage_costs_and_terminal_anchor():
    env = point_mass_2d_walls(discount=0.9)
    traj = rollout(env, lambda t, x: np.zeros(2), env.eval_starts[0])
    trs = transitions(traj, env)
    assert len(trs) == traj.n_steps + 1
    np.testing.assert_array_equal([tr.c for tr in trs[:-1]], traj.stage_costs)
    assert trs[-1].done and trs[-1].t == pytest.approx(env.horizon)
    assert trs[-1].c == pytest.approx(env.terminal_cost.value(env.horizon, traj.states[-1]))
    assert all(np.isfinite(tr.c) and 0.0 <= tr.t <= env.horizon for tr in trs)


def test_environment_registry():
    for name in ("scalar_lq", "double_integrator_lq", "pendulum", "point_mass_2d_walls"):
        env = make_environment(name)
        assert env.horizon / env.dt == pytest.approx(env.n_steps)
    with pytest.raises(ContractViolation):
        make_environment("nope")
    with pytest.raises(ContractViolation):
        EnvironmentSpec("bad", identity_model(1), ZeroCost(1), ZeroCost(1), 1.0, 0.3)


def test_point_mass_starts_avoid_walls_and_respect_speed():
    env = point_mass_2d_walls(start_x=(-1.0, 1.0), start_y=(-0.5, 0.5), start_speed=0.3)
    rng = np.random.default_rng(3)
    X = np.array([env.sample_initial_state(rng) for _ in range(500)])
    assert not np.any(env.terminated(X))
    assert np.all(np.abs(X[:, 2:]) <= 0.3) and np.any(np.abs(X[:, 2:]) > 0.1)
    assert np.any(np.abs(X[:, 1]) < 0.2)


def test_point_mass_position_scale_defaults_to_arena():
    np.testing.assert_array_equal(point_mass_2d_walls(arena=2.5).state_scale, [2.5, 2.5, 2.0, 2.0])
    np.testing.assert_array_equal(point_mass_2d_walls(arena=2.5, position_scale=1.0).state_scale, [1.0, 1.0, 2.0, 2.0])
