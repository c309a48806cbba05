"""Control-affine stochastic systems, integrators, environments and trajectories.

The systems have the form ``dx = (f(t, x) + g(t, x) u) dt + g(t, x) dB`` with
``Var[dB] = Sigma dt``.  Sigma is never given directly: it is derived from the
control penalty as ``Sigma = lambda * R^-1`` so that ``Sigma R = lambda I``.

All model callables are vectorised over leading axes: ``x`` is ``(..., n)``
and ``t`` broadcasts against ``x[..., 0]``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .costs import CostTerm, ZeroCost
from .errors import ContractViolation, IntegrationDiverged


def apply_matrix(mat, vec):
    """Batched ``mat @ vec`` for ``mat (..., n, m)`` and ``vec (..., m)``."""
    return np.matmul(mat, vec[..., None])[..., 0]


@dataclass(frozen=True, eq=False)
class ControlAffineModel:
    state_dim: int
    control_dim: int
    drift: Callable
    actuation: Callable
    noise_scale: float
    control_penalty: np.ndarray
    name: str = "model"

    def __post_init__(self):
        n, m = int(self.state_dim), int(self.control_dim)
        if n < 1 or m < 1:
            raise ContractViolation("state_dim and control_dim must be positive")
        R = np.atleast_2d(np.asarray(self.control_penalty, dtype=float))
        if R.shape != (m, m):
            raise ContractViolation(f"control penalty must be {m}x{m}, got {R.shape}")
        if not np.allclose(R, R.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(R).max())):
            raise ContractViolation("control penalty must be symmetric")
        R = 0.5 * (R + R.T)
        if np.linalg.eigvalsh(R).min() <= 0.0:
            raise ContractViolation("control penalty must be positive definite")
        if self.noise_scale < 0.0:
            raise ContractViolation("noise scale must be non-negative")
        R_inv = np.linalg.inv(R)
        R_inv = 0.5 * (R_inv + R_inv.T)
        cov = float(self.noise_scale) * R_inv
        chol = np.linalg.cholesky(cov) if self.noise_scale > 0.0 else np.zeros((m, m))
        object.__setattr__(self, "state_dim", n)
        object.__setattr__(self, "control_dim", m)
        object.__setattr__(self, "control_penalty", R)
        object.__setattr__(self, "noise_scale", float(self.noise_scale))
        object.__setattr__(self, "_R_inv", R_inv)
        object.__setattr__(self, "_cov", cov)
        object.__setattr__(self, "_chol", chol)

    @property
    def R(self):
        return self.control_penalty

    @property
    def R_inv(self):
        return self._R_inv

    @property
    def noise_cov(self):
        """Sigma = lambda R^-1."""
        return self._cov

    @property
    def deterministic(self):
        return self.noise_scale == 0.0

    def f(self, t, x):
        return np.asarray(self.drift(t, x), dtype=float)

    def g(self, t, x):
        g = np.asarray(self.actuation(t, x), dtype=float)
        return np.broadcast_to(g, np.shape(x)[:-1] + (self.state_dim, self.control_dim))

    def xi(self, t, x):
        """g R^-1 g^T, the control-weighted diffusion shape."""
        g = self.g(t, x)
        return g @ self._R_inv @ np.swapaxes(g, -1, -2)

    def actuate(self, t, x, u):
        """g(t, x) u, skipping the broadcast when g is a constant matrix."""
        g = np.asarray(self.actuation(t, x), dtype=float)
        return u @ g.T if g.ndim == 2 else apply_matrix(g, u)

    def velocity(self, t, x, u):
        return self.f(t, x) + self.actuate(t, x, u)

    def sample_noise(self, rng, shape, dt):
        z = rng.standard_normal(tuple(shape) + (self.control_dim,))
        return np.sqrt(dt) * z @ self._chol.T

    def with_noise_scale(self, lam):
        return ControlAffineModel(self.state_dim, self.control_dim, self.drift, self.actuation,
                                  lam, self.control_penalty, self.name)

    def with_control_penalty(self, R):
        return ControlAffineModel(self.state_dim, self.control_dim, self.drift, self.actuation,
                                  self.noise_scale, R, self.name)


def linear_model(A, B, R, noise_scale, name="linear"):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    return ControlAffineModel(
        state_dim=A.shape[0],
        control_dim=B.shape[1],
        drift=lambda t, x: np.asarray(x) @ A.T,
        actuation=lambda t, x: B,
        noise_scale=noise_scale,
        control_penalty=R,
        name=name,
    )


def _check_control(model, u, batch_shape):
    u = np.asarray(u, dtype=float)
    if u.shape[-1:] != (model.control_dim,) or u.shape[:-1] != tuple(batch_shape):
        raise ContractViolation(
            f"control has shape {u.shape}, expected {tuple(batch_shape) + (model.control_dim,)}")
    return u


def _check_finite(x, t):
    if not np.all(np.isfinite(x)):
        raise IntegrationDiverged(t)
    return x


def step_stochastic(model, t, x, u, dt, rng):
    """One Euler-Maruyama step; returns ``(x_next, dB)``."""
    if dt <= 0.0:
        raise ContractViolation("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = _check_control(model, u, x.shape[:-1])
    dB = model.sample_noise(rng, x.shape[:-1], dt)
    x_next = x + model.velocity(t, x, u) * dt + model.actuate(t, x, dB)
    return _check_finite(x_next, t), dB


def step_deterministic(model, t, x, u, dt):
    """One classical RK4 step of ``xdot = f + g u`` with ``u`` held constant."""
    if dt <= 0.0:
        raise ContractViolation("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = _check_control(model, u, x.shape[:-1])
    h = 0.5 * dt
    k1 = model.velocity(t, x, u)
    k2 = model.velocity(t + h, x + h * k1, u)
    k3 = model.velocity(t + h, x + h * k2, u)
    k4 = model.velocity(t + dt, x + dt * k3, u)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return _check_finite(x_next, t)


@dataclass(frozen=True, eq=False)
class EnvironmentSpec:
    name: str
    model: ControlAffineModel
    running_cost: CostTerm
    terminal_cost: CostTerm
    horizon: float
    dt: float
    discount: float = 1.0
    termination: Optional[Callable] = None
    termination_penalty: float = 20.0
    initial_state_sampler: Optional[Callable] = None
    goal: Optional[np.ndarray] = None
    position_indices: tuple = ()
    success_radius: float = 0.1
    eval_starts: Optional[np.ndarray] = None
    aux_cost: Optional[CostTerm] = None
    state_scale: Optional[np.ndarray] = None
    value_scale: float = 1.0
    lq: object = None
    walls: tuple = ()

    def __post_init__(self):
        if not 0.0 < self.dt < self.horizon:
            raise ContractViolation("need 0 < dt < T")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9 * steps:
            raise ContractViolation("T/dt must be an integer")
        if not 0.0 < self.discount <= 1.0:
            raise ContractViolation("discount must lie in (0, 1]")
        if self.termination_penalty < 0.0:
            raise ContractViolation("termination penalty must be non-negative")

    @property
    def n_steps(self):
        return int(round(self.horizon / self.dt))

    @property
    def goal_dim(self):
        return 0 if self.goal is None else len(self.goal)

    def terminated(self, x):
        if self.termination is None:
            return np.zeros(np.shape(x)[:-1], dtype=bool)
        return np.asarray(self.termination(x), dtype=bool)

    def sample_initial_state(self, rng):
        if self.initial_state_sampler is None:
            raise ContractViolation(f"environment {self.name} has no initial state sampler")
        return np.asarray(self.initial_state_sampler(rng), dtype=float)

    def success(self, x):
        if self.goal is None or not self.position_indices:
            return np.ones(np.shape(x)[:-1], dtype=bool)
        p = np.asarray(x)[..., list(self.position_indices)]
        return np.linalg.norm(p - self.goal, axis=-1) <= self.success_radius


@dataclass(eq=False)
class Trajectory:
    times: np.ndarray         # (N+1,)
    states: np.ndarray        # (N+1, n)
    controls: np.ndarray      # (N, m)
    noise: Optional[np.ndarray]  # (N, m)
    step_costs: np.ndarray    # (N,) discounted from t0, per-step accounting of the path cost
    stage_costs: np.ndarray   # (N,) same costs without the gamma^(t - t0) factor
    terminated_early: bool = False
    termination_index: Optional[int] = None
    stochastic: bool = False

    @property
    def n_steps(self):
        return len(self.controls)

    def to_csv(self, path):
        n = self.states.shape[1]
        m = self.controls.shape[1]
        header = ["t"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)] + ["cost", "terminated"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(self.n_steps):
                flag = int(self.terminated_early and i == self.termination_index)
                row = [self.times[i], *self.states[i], *self.controls[i], self.step_costs[i]]
                writer.writerow([f"{v:.17g}" for v in row] + [flag])


def read_trajectory_csv(path):
    """Parse a trajectory CSV back into a dict of column arrays."""
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


@dataclass(eq=False)
class PathBatch:
    """Lock-step rollouts stored as arrays; rows that terminate are frozen afterwards."""

    t0: float
    dt: float
    states: np.ndarray        # (B, N+1, n)
    controls: np.ndarray      # (B, N, m)
    noise: np.ndarray         # (B, N, m)
    step_costs: np.ndarray    # (B, N)
    stage_costs: np.ndarray   # (B, N)
    active: np.ndarray        # (B, N) step i was taken while the row was alive
    termination_index: np.ndarray  # (B,), -1 when the row ran to the end
    stochastic: bool

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.states.shape[1])

    @property
    def terminated(self):
        return self.termination_index >= 0

    def path_costs(self, env):
        """Vectorised :func:`path_cost` over the rows."""
        total = self.step_costs.sum(axis=1)
        total = total + np.einsum("bki,ij,bkj->b", self.controls, env.model.R, self.noise)
        tN = self.times[-1]
        qf = env.terminal_cost.value(tN, self.states[:, -1])
        return total + np.where(self.terminated, 0.0, env.discount ** (tN - self.t0) * qf)

    def trajectories(self):
        out = []
        m = self.controls.shape[2]
        for b in range(self.states.shape[0]):
            ti = int(self.termination_index[b])
            L = ti + 1 if ti >= 0 else self.controls.shape[1]
            out.append(Trajectory(
                times=self.t0 + self.dt * np.arange(L + 1),
                states=self.states[b, : L + 1].copy(),
                controls=self.controls[b, :L].copy(),
                noise=self.noise[b, :L].copy() if self.stochastic else np.zeros((L, m)),
                step_costs=self.step_costs[b, :L].copy(),
                stage_costs=self.stage_costs[b, :L].copy(),
                terminated_early=ti >= 0,
                termination_index=ti if ti >= 0 else None,
                stochastic=bool(self.stochastic),
            ))
        return out


def simulate(env, policy, X0, t0=0.0, stochastic=False, rng=None):
    """Roll out ``policy(t, X) -> U`` on a batch of states ``(B, n)`` until ``T``."""
    model = env.model
    T = env.horizon
    if not t0 < T:
        raise ContractViolation("t0 must be smaller than the episode length")
    X = np.array(X0, dtype=float, ndmin=2)
    B, n = X.shape
    if n != model.state_dim:
        raise ContractViolation(f"initial state has dimension {n}, expected {model.state_dim}")
    m = model.control_dim
    N = int(round((T - t0) / env.dt))
    if stochastic and rng is None:
        raise ContractViolation("stochastic rollout needs a random generator")
    states = np.zeros((B, N + 1, n))
    controls = np.zeros((B, N, m))
    noise = np.zeros((B, N, m))
    step_costs = np.zeros((B, N))
    stage_costs = np.zeros((B, N))
    active = np.zeros((B, N), dtype=bool)
    alive = np.ones(B, dtype=bool)
    term_index = np.full(B, -1)
    states[:, 0] = X
    R = model.R
    for i in range(N):
        t = t0 + i * env.dt
        U = _check_control(model, policy(t, X), (B,))
        U = np.where(alive[:, None], U, 0.0)
        if stochastic:
            Xn, dB = step_stochastic(model, t, X, U, env.dt, rng)
            dB = np.where(alive[:, None], dB, 0.0)
        else:
            Xn, dB = step_deterministic(model, t, X, U, env.dt), np.zeros((B, m))
        q = env.running_cost.value(t, X)
        effort = 0.5 * np.einsum("bi,ij,bj->b", U, R, U)
        disc = env.discount ** (t - t0)
        stage = (q + effort) * env.dt
        step = (disc * q + effort) * env.dt
        hit = env.terminated(Xn) & alive
        stage = stage + np.where(hit, env.termination_penalty, 0.0)
        step = step + np.where(hit, disc * env.termination_penalty, 0.0)
        controls[:, i] = U
        noise[:, i] = dB
        step_costs[:, i] = np.where(alive, step, 0.0)
        stage_costs[:, i] = np.where(alive, stage, 0.0)
        active[:, i] = alive
        term_index[hit] = i
        X = np.where(alive[:, None], Xn, X)
        states[:, i + 1] = X
        alive &= ~hit
    return PathBatch(float(t0), float(env.dt), states, controls, noise, step_costs, stage_costs, active,
                     term_index, bool(stochastic))


def rollout(env, policy, x0, t0=0.0, stochastic=False, rng=None):
    """Closed-loop rollout of ``policy(t, x) -> u`` for a single state vector."""
    def call(t, X):
        return np.asarray(policy(t, X[0]), dtype=float).reshape(1, -1)

    return simulate(env, call, np.asarray(x0, dtype=float)[None, :], t0, stochastic, rng).trajectories()[0]


def rollout_batch(env, policy, x0s, t0=0.0, stochastic=False, rng=None):
    """Lock-step rollouts from several starts; ``policy`` receives ``(B, n)`` states.

    Rows that terminate stop accumulating cost; their later controls are ignored.
    """
    return simulate(env, policy, x0s, t0, stochastic, rng).trajectories()


def path_cost(trajectory, env):
    """Realised discounted path cost including the Ito term u^T R dB."""
    if trajectory.stochastic and trajectory.noise is None:
        raise ContractViolation("stochastic trajectory carries no noise increments")
    total = float(np.sum(trajectory.step_costs))
    if trajectory.noise is not None and trajectory.n_steps:
        total += float(np.einsum("ki,ij,kj->", trajectory.controls, env.model.R, trajectory.noise))
    if not trajectory.terminated_early:
        t0 = trajectory.times[0]
        tN = trajectory.times[-1]
        total += env.discount ** (tN - t0) * float(env.terminal_cost.value(tN, trajectory.states[-1]))
    return total


@dataclass(frozen=True)
class TransitionTuple:
    t: float
    s: np.ndarray
    u: np.ndarray
    c: float
    s_next: np.ndarray
    done: bool
    goal: np.ndarray


def transitions(trajectory, env):
    """Transition tuples for the critic.

    Costs are the stage costs (no gamma^(t - t0) factor); discounting enters
    through the Bellman target instead.  A trajectory that runs to the time limit
    also yields one terminal tuple at ``t = T`` whose cost is ``q_f``, which
    anchors the value at zero time-to-go.
    """
    goal = np.zeros(0) if env.goal is None else np.asarray(env.goal, dtype=float)
    out = []
    for i in range(trajectory.n_steps):
        done = bool(trajectory.terminated_early and i == trajectory.termination_index)
        out.append(TransitionTuple(
            t=float(trajectory.times[i]), s=trajectory.states[i], u=trajectory.controls[i],
            c=float(trajectory.stage_costs[i]), s_next=trajectory.states[i + 1], done=done, goal=goal))
    if not trajectory.terminated_early:
        tN = float(trajectory.times[-1])
        xN = trajectory.states[-1]
        out.append(TransitionTuple(
            t=tN, s=xN, u=np.zeros(env.model.control_dim), c=float(env.terminal_cost.value(tN, xN)),
            s_next=xN, done=True, goal=goal))
    return out


def zero_policy(model):
    m = model.control_dim

    def policy(t, x):
        return np.zeros(np.shape(x)[:-1] + (m,))

    return policy


def null_environment(model, horizon, dt, **kwargs):
    """Environment with zero costs; handy for pure-dynamics experiments."""
    n = model.state_dim
    return EnvironmentSpec(name="null", model=model, running_cost=ZeroCost(n), terminal_cost=ZeroCost(n),
                           horizon=horizon, dt=dt, **kwargs)
