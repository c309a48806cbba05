"""Built-in environments: two LQ problems, a pendulum swing-up and a planar point mass among walls."""
from __future__ import annotations

import numpy as np

from .costs import CosineCost, DistanceCost, QuadraticCost
from .dynamics import ControlAffineModel, EnvironmentSpec, linear_model
from .errors import ContractViolation
from .lq_oracle import double_integrator_problem, scalar_problem


def lq_environment(lq, dt, name, x0_low, x0_high, eval_starts=None):
    """Environment whose dynamics and costs are exactly those of ``lq``."""
    model = linear_model(lq.A, lq.B_mat, lq.R, lq.lam, name=name)
    low = np.asarray(x0_low, dtype=float)
    high = np.asarray(x0_high, dtype=float)
    return EnvironmentSpec(
        name=name, model=model, running_cost=QuadraticCost(lq.Q), terminal_cost=QuadraticCost(lq.Q_f),
        horizon=lq.T, dt=dt, discount=1.0, termination=None,
        initial_state_sampler=lambda rng: rng.uniform(low, high),
        eval_starts=None if eval_starts is None else np.asarray(eval_starts, dtype=float),
        state_scale=np.maximum(np.abs(low), np.abs(high)), lq=lq,
    )


def scalar_lq(a=0.0, b=1.0, q=1.0, q_f=0.0, r=1.0, lam=1.0, T=1.0, dt=0.01, x0_range=2.0):
    lq = scalar_problem(a, b, q, q_f, r, lam, T)
    starts = np.linspace(-x0_range, x0_range, 8)[:, None]
    return lq_environment(lq, dt, "scalar_lq", [-x0_range], [x0_range], starts)


def double_integrator_lq(q_pos=1.0, q_vel=0.1, q_f=1.0, r=1.0, lam=1.0, T=3.0, dt=0.02, x0_range=1.0):
    lq = double_integrator_problem(q_pos, q_vel, q_f, r, lam, T)
    g = np.linspace(-x0_range, x0_range, 4)
    starts = np.array([[p, v] for p in g[[0, 3]] for v in g])
    return lq_environment(lq, dt, "double_integrator_lq", [-x0_range] * 2, [x0_range] * 2, starts)


def pendulum(mass=1.0, length=1.0, gravity=9.81, damping=0.1, r=0.5, lam=0.05, weight=1.0,
             T=3.0, dt=0.05, discount=1.0):
    """Swing-up: angle 0 is upright, the pendulum starts hanging near angle pi."""
    inertia = mass * length**2

    def drift(t, x):
        th, om = x[..., 0], x[..., 1]
        return np.stack([om, (gravity / length) * np.sin(th) - damping / inertia * om], axis=-1)

    model = ControlAffineModel(2, 1, drift, lambda t, x: np.array([[0.0], [1.0 / inertia]]), lam, [[r]],
                               name="pendulum")
    cost = CosineCost(2, 0, 0.0, weight) + QuadraticCost(np.diag([0.0, 0.01]))
    starts = np.column_stack([np.pi + np.linspace(-0.4, 0.4, 8), np.zeros(8)])
    return EnvironmentSpec(
        name="pendulum", model=model, running_cost=cost, terminal_cost=CosineCost(2, 0, 0.0, weight),
        horizon=T, dt=dt, discount=discount,
        initial_state_sampler=lambda rng: np.array([np.pi + rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)]),
        eval_starts=starts, state_scale=np.array([np.pi, 4.0]), value_scale=5.0,
    )


def _inside(p, box):
    x0, x1, y0, y1 = box
    return (p[..., 0] >= x0) & (p[..., 0] <= x1) & (p[..., 1] >= y0) & (p[..., 1] <= y1)


def point_mass_2d_walls(goal=(0.0, 1.0), walls=((-0.7, 0.7, -0.1, 0.1),), arena=2.0, damping=0.5,
                        r=0.1, lam=0.002, weight=1.0, terminal_weight=1.0, penalty=20.0, T=3.0, dt=0.1,
                        discount=0.98, success_radius=0.1, start_x=(-0.9, 0.9), start_y=(-1.1, -0.9), start_speed=0.0,
                        position_scale=None, eval_x=(-0.9, -0.6, -0.3, -0.1, 0.1, 0.3, 0.6, 0.9), eval_y=-1.0):
    """Double integrator in the plane: state ``(px, py, vx, vy)``, control is acceleration.

    Entering a wall rectangle ``(x_min, x_max, y_min, y_max)`` or leaving the
    square arena ``|p| <= arena`` ends the episode with ``penalty``.  The task
    cost is the (smoothed) Euclidean distance of the position to the goal.
    Training starts are uniform on the ``start_x`` x ``start_y`` box outside the
    walls, with velocity components uniform in ``[-start_speed, start_speed]``.
    ``position_scale`` (default ``arena``) normalises positions at the
    value-network input.
    """
    goal = np.asarray(goal, dtype=float)
    walls = tuple(tuple(float(v) for v in w) for w in walls)
    for w in walls:
        if len(w) != 4 or w[0] >= w[1] or w[2] >= w[3]:
            raise ContractViolation(f"wall {w} is not a rectangle (x_min, x_max, y_min, y_max)")

    def drift(t, x):
        v = x[..., 2:4]
        return np.concatenate([v, -damping * v], axis=-1)

    actuation = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    model = ControlAffineModel(4, 2, drift, lambda t, x: actuation, lam, r * np.eye(2), name="point_mass")

    def termination(x):
        p = np.asarray(x)[..., 0:2]
        hit = np.any(np.abs(p) > arena, axis=-1)
        for w in walls:
            hit = hit | _inside(p, w)
        return hit

    def sampler(rng):
        while True:
            p = np.array([rng.uniform(*start_x), rng.uniform(*start_y)])
            if not any(_inside(p, w) for w in walls):
                return np.concatenate([p, rng.uniform(-start_speed, start_speed, size=2)])

    starts = np.array([[x, eval_y, 0.0, 0.0] for x in eval_x])
    ps = arena if position_scale is None else float(position_scale)
    return EnvironmentSpec(
        name="point_mass_2d_walls", model=model,
        running_cost=DistanceCost(4, (0, 1), goal, weight),
        terminal_cost=DistanceCost(4, (0, 1), goal, terminal_weight),
        horizon=T, dt=dt, discount=discount, termination=termination, termination_penalty=penalty,
        initial_state_sampler=sampler, goal=goal, position_indices=(0, 1), success_radius=success_radius,
        eval_starts=starts, state_scale=np.array([ps, ps, 2.0, 2.0]), value_scale=10.0, walls=walls,
    )


ENVIRONMENTS = {
    "scalar_lq": scalar_lq,
    "double_integrator_lq": double_integrator_lq,
    "pendulum": pendulum,
    "point_mass_2d_walls": point_mass_2d_walls,
}


def make_environment(name, **params):
    try:
        builder = ENVIRONMENTS[name]
    except KeyError:
        raise ContractViolation(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return builder(**params)
