"""Off-policy value learning from a replay buffer with one-step Bellman targets."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .value_net import forward, parameter_gradient, polyak_update


@dataclass(frozen=True)
class CriticConfig:
    minibatches: int = 20          # K
    batch_size: int = 64           # N
    step_size: float = 1e-3
    weight_decay: float = 1e-4
    polyak_tau: float = 0.05
    discount: float = 0.98
    dt: float = 0.1
    discount_mode: str = "per_second"   # or "per_step_raw"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.minibatches < 1 or self.batch_size < 1:
            raise ContractViolation("K and N must be at least 1")
        if self.step_size <= 0.0:
            raise ContractViolation("step size must be positive")
        if self.discount_mode not in ("per_second", "per_step_raw"):
            raise ContractViolation(f"unknown discount mode {self.discount_mode!r}")

    @property
    def step_discount(self):
        if self.discount_mode == "per_second":
            return self.discount ** self.dt
        return self.discount


class ReplayBuffer:
    """Fixed-capacity ring of transition tuples; evicts oldest first."""

    def __init__(self, capacity, state_dim, control_dim, goal_dim=0):
        if capacity < 1:
            raise ContractViolation("capacity must be positive")
        self.capacity = int(capacity)
        self.t = np.zeros(capacity)
        self.s = np.zeros((capacity, state_dim))
        self.u = np.zeros((capacity, control_dim))
        self.c = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.goal = np.zeros((capacity, goal_dim))
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    def add(self, tr):
        if not np.isfinite(tr.c):
            raise ContractViolation("transition cost must be finite")
        i = self.inserted % self.capacity
        self.t[i] = tr.t
        self.s[i] = tr.s
        self.u[i] = tr.u
        self.c[i] = tr.c
        self.s_next[i] = tr.s_next
        self.done[i] = tr.done
        self.goal[i] = tr.goal
        self.inserted += 1

    def extend(self, transitions):
        for tr in transitions:
            self.add(tr)

    def sample_indices(self, n, rng):
        return rng.integers(0, len(self), size=n)

    def batch(self, idx):
        return Batch(self.t[idx], self.s[idx], self.u[idx], self.c[idx], self.s_next[idx], self.done[idx],
                     self.goal[idx])


@dataclass(frozen=True)
class Batch:
    t: np.ndarray
    s: np.ndarray
    u: np.ndarray
    c: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    goal: np.ndarray


def _goal_arg(net, goal):
    return goal if net.goal_dim else None


def bellman_target(target_net, transition, config):
    """y = c + gamma_step V_target(t + dt, s_next) unless done, else y = c.

    Accepts a single :class:`TransitionTuple` or a :class:`Batch`.
    """
    t = np.asarray(transition.t, dtype=float)
    t_next = np.minimum(t + config.dt, target_net.horizon)
    goal = np.asarray(transition.goal, dtype=float)
    v_next = forward(target_net, t_next, transition.s_next, _goal_arg(target_net, goal))
    y = np.asarray(transition.c, dtype=float) + np.where(transition.done, 0.0, config.step_discount * v_next)
    return float(y) if np.ndim(y) == 0 else y


class Adam:
    def __init__(self, params, step_size, betas=(0.9, 0.999), eps=1e-8):
        self.step_size = step_size
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.k = 0

    def step(self, params, grads):
        self.k += 1
        out = []
        c1 = 1.0 - self.b1**self.k
        c2 = 1.0 - self.b2**self.k
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            out.append(p - self.step_size * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


class Critic:
    """Holds the live network, its Polyak target and the optimiser state.

    Every update produces new network objects, so a reference held by the
    actor is an immutable snapshot.
    """

    def __init__(self, net, config, target=None):
        self.config = config
        self.net = net
        self.target = target if target is not None else net
        self.optimizer = Adam(net.params, config.step_size, config.adam_betas, config.adam_eps)
        self.updates = 0

    def update(self, buffer, rng):
        """K mini-batch steps followed by one Polyak step.

        Returns ``(loss, mean_target)`` of the final mini-batch, or ``None`` when
        the buffer holds fewer than N tuples.
        """
        cfg = self.config
        if len(buffer) < cfg.batch_size:
            return None
        loss = mean_target = None
        for _ in range(cfg.minibatches):
            batch = buffer.batch(buffer.sample_indices(cfg.batch_size, rng))
            y = bellman_target(self.target, batch, cfg)
            loss, grads = parameter_gradient(self.net, batch.t, batch.s, _goal_arg(self.net, batch.goal), y,
                                             cfg.weight_decay)
            self.net = self.net.with_params(self.optimizer.step(self.net.params, grads))
            mean_target = float(np.mean(y))
        self.target = polyak_update(self.target, self.net, cfg.polyak_tau)
        self.updates += 1
        return loss, mean_target


def update(critic, buffer, rng):
    """Functional alias of :meth:`Critic.update` returning only the loss (or None)."""
    out = critic.update(buffer, rng)
    return None if out is None else out[0]


class MetricsLog:
    """CSV rows ``iteration,loss,buffer_size,mean_target``."""

    header = ("iteration", "loss", "buffer_size", "mean_target")

    def __init__(self, path):
        self.path = path
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(self.header)

    def append(self, iteration, loss, buffer_size, mean_target):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([iteration, f"{loss:.17g}", buffer_size, f"{mean_target:.17g}"])
