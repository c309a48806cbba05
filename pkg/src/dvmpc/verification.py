"""Self-contained numerical checks, each comparing an estimator or solver with an exact oracle."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .costs import QuadraticCost
from .dynamics import linear_model
from .envs import scalar_lq
from .lq_oracle import (double_integrator_problem, feedback_kl, optimal_policy, policy_from, scalar_problem,
                        solve_discrete_riccati, solve_riccati)
from .mpc import MpcConfig, ValueCostModel, solve
from .stochastic_tools import (estimate_desirability, kl_girsanov, verify_proposition1, verify_theorem1,
                               verify_theorem2)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    elapsed: float = 0.0
    data: dict = field(default_factory=dict, repr=False)


def check_riccati(x0=(1.0, -0.5), T=3.0, dt=0.02):
    """iLQR on the double integrator against the exact dynamic programme of the sampled problem."""
    lq = double_integrator_problem(lam=0.0, T=T)
    model = linear_model(lq.A, lq.B_mat, lq.R, 0.0)
    cm = ValueCostModel(lq.R, None, 1.0, QuadraticCost(lq.Q), QuadraticCost(lq.Q_f))
    cfg = MpcConfig(horizon=T, dt=dt, cost_mode="heuristic_only", tolerance=1e-12, max_iterations=50)
    x0 = np.asarray(x0, dtype=float)
    sol = solve(model, cm, x0, 0.0, cfg, t_end=T)
    exact = solve_discrete_riccati(lq, dt)
    cost_err = abs(sol.cost - exact.cost(x0)) / abs(exact.cost(x0))
    u_err = float(np.max(np.abs(sol.controls[0] - exact.first_control(x0))))
    passed = cost_err <= 1e-6 and u_err <= 1e-6
    detail = f"cost rel err {cost_err:.2e} (tol 1e-6), first control err {u_err:.2e} (tol 1e-6)"
    return passed, detail, {"cost_err": cost_err, "control_err": u_err, "converged": sol.converged}


def check_girsanov(M=10_000, k_a=1.0, k_b=0.5, x0=1.0, seed=11):
    env = scalar_lq(T=1.0, dt=0.01)
    est = kl_girsanov(env, lambda t, X: -k_a * X, lambda t, X: -k_b * X, 0.0, [x0], M,
                      np.random.default_rng(seed))
    exact = feedback_kl(env.lq, [[k_a]], [[k_b]], [x0])
    z = (est.value - exact) / est.stderr
    return abs(z) <= 3.0, f"estimate {est.value:.5f} +- {est.stderr:.5f}, oracle {exact:.5f}, z = {z:+.2f}", {
        "estimate": est.value, "stderr": est.stderr, "oracle": exact}


def check_desirability(M=100_000, probes=(-2.0, -1.0, -0.5, 0.5, 1.5), seed=12):
    env = scalar_lq(T=1.0, dt=0.01)
    sol = solve_riccati(env.lq, 1e-3)
    rng = np.random.default_rng(seed)
    errors = []
    for x in probes:
        est = estimate_desirability(env, policy_from(sol), 0.0, [x], 1.0, M, rng)
        v = float(sol.value(0.0, np.array([x])))
        errors.append(abs(est.value - v) / abs(v))
    worst = max(errors)
    return worst <= 0.02, f"max relative error of -lambda log Psi vs V*: {worst:.4f} (tol 0.02)", {
        "errors": errors}


def check_theorem1(M=10_000, detune=0.5, seed=13):
    lq = scalar_problem(T=1.0)
    sol = solve_riccati(lq, 1e-3)
    report = verify_theorem1(lq, lambda t, X: detune * optimal_policy(sol, t, X), 1.0, M,
                             np.random.default_rng(seed))
    e = report.theorem1
    return e.passed, (f"forward {e.forward_kl:.5f} <= reverse {e.reverse_kl:.5f} + slack -> bound {e.bound:.5f} "
                      f"(E={e.energy_max:.4f}, Var={e.weight_variance:.4f})"), {"entry": e}


def check_theorem2(M=256, amplitudes=(0.1, 0.5), horizons=(0.25, 0.5, 1.0), gamma=0.9, claimed_L=None, seed=14):
    lq = scalar_problem(T=2.0)
    report = verify_theorem2(lq, list(amplitudes), list(horizons), 1.0, gamma, M, np.random.default_rng(seed),
                             seed=seed, claimed_L=claimed_L)
    cells = ", ".join(f"(H={c.H:g}, L={c.L:g}: {c.measured_kl:.2e} vs {c.bound:.2e}{'' if c.passed else ' VIOLATED'})"
                      for c in report.cells)
    mono = ", ".join(f"L={L:g}: {'non-increasing' if ok else 'NOT monotone'}" for L, ok in report.monotone.items())
    return report.passed, f"{cells}; {mono}", {"report": report}


def check_proposition1(M=50, horizons=(0.25, 0.5, 1.0), seed=15):
    lq = scalar_problem(T=2.0)
    rep = verify_proposition1(lq, list(horizons), 1.0, M, np.random.default_rng(seed))
    errs = ", ".join(f"H={H:g}: {e:.2e}" for H, e in zip(rep.horizons, rep.action_errors))
    return rep.passed, f"first-action rel err {errs} (tol 1e-3); identity err {rep.identity_error:.2e} (tol 1e-6)", {
        "report": rep}


SUITES = {
    "riccati": check_riccati,
    "girsanov": check_girsanov,
    "desirability": check_desirability,
    "theorem1": check_theorem1,
    "theorem2": check_theorem2,
    "proposition1": check_proposition1,
}


def run_suite(name, **kwargs):
    start = time.perf_counter()
    try:
        passed, detail, data = SUITES[name](**kwargs)
    except Exception as exc:  # reported as a failing suite
        passed, detail, data = False, f"{type(exc).__name__}: {exc}", {}
    return SuiteResult(name, bool(passed), detail, time.perf_counter() - start, data)


def verify(selection=None, **kwargs):
    """Run the selected suites (all when empty); returns ``(exit_code, results)``."""
    names = list(selection) if selection else list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suites {unknown}; choose from {sorted(SUITES)}")
    results = [run_suite(n, **kwargs.get(n, {})) for n in names]
    return (0 if all(r.passed for r in results) else 1), results
