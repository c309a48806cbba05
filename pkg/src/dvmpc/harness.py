"""Training driver, evaluation, ablation grid, data export and verification suites."""
from __future__ import annotations

import csv
import datetime as _dt
import itertools
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .critic import Critic, MetricsLog, ReplayBuffer
from .dynamics import simulate, transitions
from .envs import make_environment
from .errors import IntegrationDiverged
from .mpc import MpcPolicy, ValueCostModel, running_cost
from .value_net import NetValue, ValueNet, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

METRIC_FIELDS = ("iteration", "episodes", "mean_return", "success_rate", "critic_loss", "buffer_size",
                 "mean_target", "solver_failures")


class TrainingAborted(RuntimeError):
    pass


def build_environment(cfg):
    return make_environment(cfg.env.name, **cfg.env.params)


def initial_network(cfg, env, rng):
    n = env.model.state_dim
    goal = np.zeros(0) if env.goal is None else np.asarray(env.goal, dtype=float)
    scale = env.state_scale if env.state_scale is not None else np.ones(n)
    shift = np.concatenate([[0.5], np.zeros(n), goal])
    spread = np.concatenate([[0.5], scale, np.ones(len(goal))])
    return ValueNet.initialize(n, len(goal), env.horizon, rng, hidden=tuple(cfg.network.hidden),
                               output_gain=cfg.network.output_gain, input_shift=shift, input_scale=spread,
                               output_scale=env.value_scale, polyak_tau=cfg.critic.polyak_tau)


def as_value_source(source, env):
    """Networks are bound to the environment goal; other value sources pass through."""
    if isinstance(source, ValueNet):
        return NetValue(source, env.goal if source.goal_dim else None)
    return source


def cost_model_for(env, source):
    return ValueCostModel(env.model.R, as_value_source(source, env), env.discount, env.running_cost,
                          env.terminal_cost, env.aux_cost)


def make_actor(env, source, mpc_cfg):
    return MpcPolicy(env.model, cost_model_for(env, source), mpc_cfg, t_end=env.horizon)


# evaluation ---------------------------------------------------------------------

@dataclass
class EvalResult:
    mean_return: float
    success_rate: float
    returns: np.ndarray
    successes: np.ndarray
    trajectories: list = field(repr=False)
    solver_failures: int = 0


def evaluate(source, env, mpc_cfg, start_states=None, n=8):
    """Deterministic closed-loop rollouts from ``n`` start states.

    Success means the final position lies within the success radius and no
    wall was hit.  The return is the path cost of each rollout.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    starts = env.eval_starts if start_states is None else np.asarray(start_states, dtype=float)
    if starts is None:
        raise ValueError(f"environment {env.name} declares no evaluation starts")
    starts = np.atleast_2d(starts)[:n]
    actor = make_actor(env, source, mpc_cfg)
    paths = simulate(env, actor, starts, 0.0, stochastic=False)
    returns = paths.path_costs(env)
    success = ~paths.terminated & np.asarray(env.success(paths.states[:, -1]), dtype=bool)
    return EvalResult(float(np.mean(returns)), float(np.mean(success)), returns, success, paths.trajectories(),
                      actor.failures)


# training -----------------------------------------------------------------------

@dataclass
class TrainResult:
    network: ValueNet
    target: ValueNet
    metrics: list
    run_dir: Optional[str]
    checkpoints: list


def make_run_dir(cfg, root=None, label=None):
    root = cfg.output_dir if root is None else root
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    name = "_".join(p for p in (stamp, label or cfg.name or cfg.env.name) if p)
    path = os.path.join(root, name)
    os.makedirs(path, exist_ok=False)
    with open(os.path.join(path, "config.yaml"), "w") as fh:
        fh.write(cfg.to_yaml())
    return path


def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and np.isnan(v)) else (f"{v:.17g}" if isinstance(v, float) else str(v))


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in METRIC_FIELDS])


def read_metrics(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    ints = {"iteration", "episodes", "buffer_size", "solver_failures"}
    return [{k: (int(v) if k in ints else float(v)) for k, v in row.items()} for row in rows]


def train(cfg, run_dir=None, value_source=None, write=True):
    """Alternate MPC rollouts in the noisy environment with critic updates.

    One iteration collects ``episodes_per_iteration`` episodes in lock step
    with a frozen snapshot of the actor's value source, then performs
    ``updates_per_iteration`` critic updates.  ``value_source`` replaces the
    network inside the actor (the critic still trains).  With
    ``training.start_times: uniform`` the episodes of an iteration start
    together at a time drawn from the control grid, so the critic also sees
    short times-to-go far from the goal.  Everything is derived from
    ``cfg.seed``, so reruns are identical.
    """
    env = build_environment(cfg)
    rng = np.random.default_rng(cfg.seed)
    net = initial_network(cfg, env, rng)
    ccfg = cfg.critic.build(env)
    critic = Critic(net, ccfg)
    buffer = ReplayBuffer(cfg.critic.buffer_capacity, env.model.state_dim, env.model.control_dim, env.goal_dim)
    mpc_cfg = cfg.mpc.build()
    tcfg = cfg.training
    if write and run_dir is None:
        run_dir = make_run_dir(cfg)
    ckpt_dir = None
    if write:
        ckpt_dir = os.path.join(run_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        loss_log = MetricsLog(os.path.join(run_dir, "critic.csv"))
    checkpoints = []

    def checkpoint(it):
        if ckpt_dir is None:
            return
        path = os.path.join(ckpt_dir, f"checkpoint_{it:05d}.txt")
        save_checkpoint(path, {"value": critic.net, "target": critic.target})
        checkpoints.append(path)

    def actor_source():
        if value_source is not None:
            return value_source
        return critic.target if tcfg.actor_network == "target" else critic.net

    metrics = []
    timings = []
    checkpoint(0)
    episodes = 0
    for it in range(1, tcfg.iterations + 1):
        start = time.perf_counter()
        actor = make_actor(env, actor_source(), mpc_cfg)
        X0 = np.array([env.sample_initial_state(rng) for _ in range(tcfg.episodes_per_iteration)])
        t0 = env.dt * int(rng.integers(env.n_steps)) if tcfg.start_times == "uniform" else 0.0
        try:
            paths = simulate(env, actor, X0, t0, stochastic=True, rng=rng)
        except IntegrationDiverged as exc:
            raise TrainingAborted(f"iteration {it}: state diverged at t={exc.time}") from exc
        for traj in paths.trajectories():
            buffer.extend(transitions(traj, env))
        episodes += len(X0)
        loss = mean_target = None
        for _ in range(tcfg.updates_per_iteration):
            out = critic.update(buffer, rng)
            if out is not None:
                loss, mean_target = out
        if loss is not None and not np.isfinite(loss):
            raise TrainingAborted(f"iteration {it}: critic loss is {loss}")
        if write and loss is not None:
            loss_log.append(it, loss, len(buffer), mean_target)
        row = {"iteration": it, "episodes": episodes, "mean_return": float("nan"), "success_rate": float("nan"),
               "critic_loss": float("nan") if loss is None else float(loss), "buffer_size": len(buffer),
               "mean_target": float("nan") if mean_target is None else float(mean_target),
               "solver_failures": actor.failures}
        if it % tcfg.eval_every == 0:
            res = evaluate(actor_source(), env, mpc_cfg, n=tcfg.n_eval)
            row["mean_return"] = res.mean_return
            row["success_rate"] = res.success_rate
            row["solver_failures"] += res.solver_failures
            if write and tcfg.save_eval_trajectories and it % tcfg.checkpoint_every == 0:
                export_trajectories_from(res, os.path.join(run_dir, "trajectories", f"iter_{it:05d}"))
        if actor.failures:
            log.info("iteration %d: %d solves ended without convergence", it, actor.failures)
        metrics.append(row)
        timings.append((it, time.perf_counter() - start))
        if it % tcfg.checkpoint_every == 0:
            checkpoint(it)
        if write:
            write_metrics(os.path.join(run_dir, "metrics.csv"), metrics)
    if write:
        write_metrics(os.path.join(run_dir, "metrics.csv"), metrics)
        with open(os.path.join(run_dir, "timing.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "wall_time"])
            w.writerows([(i, f"{s:.6f}") for i, s in timings])
    return TrainResult(critic.net, critic.target, metrics, run_dir, checkpoints)


def first_success_iteration(metrics, threshold):
    """First iteration whose evaluation success rate reaches ``threshold`` (None if never)."""
    for row in metrics:
        if not np.isnan(row["success_rate"]) and row["success_rate"] >= threshold:
            return row["iteration"]
    return None


def load_actor_network(path, label="target"):
    nets = load_checkpoint(path)
    return nets[label] if label in nets else next(iter(nets.values()))


# ablation -------------------------------------------------------------------------

ABLATION_FIELDS = ("cost_mode", "horizon", "seed", "status") + METRIC_FIELDS


def ablate(cfg, root=None):
    """Train every (cost mode, horizon, seed) cell; a failing cell is recorded and skipped."""
    root = make_run_dir(cfg, root, label="ablation")
    results = {}
    rows = []
    for mode, H, seed in itertools.product(cfg.ablation.cost_modes, cfg.ablation.horizons, cfg.ablation.seeds):
        cell = cfg.with_updates(mpc={"horizon": H, "cost_mode": mode}, seed=seed)
        cell_dir = os.path.join(root, f"{mode}_H{H:g}_seed{seed}")
        os.makedirs(cell_dir)
        with open(os.path.join(cell_dir, "config.yaml"), "w") as fh:
            fh.write(cell.to_yaml())
        try:
            res = train(cell, run_dir=cell_dir)
            results[(mode, H, seed)] = res.metrics
            for m in res.metrics:
                rows.append({"cost_mode": mode, "horizon": H, "seed": seed, "status": "ok", **m})
        except Exception as exc:
            log.warning("ablation cell %s/%s/%s failed: %s", mode, H, seed, exc)
            results[(mode, H, seed)] = exc
            rows.append({"cost_mode": mode, "horizon": H, "seed": seed, "status": f"failed: {exc}",
                         **{k: float("nan") for k in METRIC_FIELDS}})
    with open(os.path.join(root, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in ABLATION_FIELDS])
    return results, root


# exports ---------------------------------------------------------------------------

def running_cost_grid(source, env, t, grid, bounds=None, axes=(0, 1), fixed_state=None):
    """Running cost on a ``W x H`` grid over two state coordinates; returns ``(xs, ys, values)``."""
    W, Hn = grid
    n = env.model.state_dim
    if bounds is None:
        scale = env.state_scale if env.state_scale is not None else np.ones(n)
        bounds = (-scale[axes[0]], scale[axes[0]], -scale[axes[1]], scale[axes[1]])
    xs = np.linspace(bounds[0], bounds[1], W)
    ys = np.linspace(bounds[2], bounds[3], Hn)
    base = np.zeros(n) if fixed_state is None else np.asarray(fixed_state, dtype=float)
    X = np.broadcast_to(base, (Hn, W, n)).copy()
    X[..., axes[0]] = xs[None, :]
    X[..., axes[1]] = ys[:, None]
    cm = cost_model_for(env, source)
    values = running_cost(cm, env.model, t, X)
    return X[..., axes[0]], X[..., axes[1]], values


def export_running_cost_heatmap(source, env, t, grid, path, **kwargs):
    xs, ys, values = running_cost_grid(source, env, t, grid, **kwargs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "l_value"])
        for x, y, v in zip(xs.ravel(), ys.ravel(), values.ravel()):
            w.writerow([f"{x:.17g}", f"{y:.17g}", f"{v:.17g}"])
    return path


def export_trajectories_from(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for k, traj in enumerate(result.trajectories):
        p = os.path.join(out_dir, f"start_{k:02d}.csv")
        traj.to_csv(p)
        paths.append(p)
    return paths


def export_trajectories(source, env, mpc_cfg, out_dir, n=8):
    return export_trajectories_from(evaluate(source, env, mpc_cfg, n=n), out_dir)
