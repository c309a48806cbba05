"""Receding-horizon iLQR actor whose costs come from a value function.

The horizon problem is

    min_u  gamma^H phi(x(t+H)) + int_t^{t+H} gamma^(tau-t) l(tau, x) + 0.5 u^T R u  dtau
    s.t.   xdot = f(tau, x) + g(tau, x) u

discretised with a left Riemann sum on the running cost and one RK4 step with
zero-order-hold control per interval.  With ``cost_mode="heuristic_plus_running"``
the running cost is built from the value source,

    l = -dV/dt - f^T dV/dx + 0.5 dV/dx^T Xi dV/dx,      Xi = g R^-1 g^T,

and with ``"heuristic_only"`` it is the task cost ``q`` of the environment.  The
heuristic ``phi`` is the value source evaluated at the end of the horizon.

Every routine carries a leading batch axis so that many independent problems
(evaluation starts, Monte-Carlo samples) are solved in lock step.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .costs import CostTerm
from .dynamics import step_deterministic
from .errors import ContractViolation, QuadratizationError

COST_MODES = ("heuristic_only", "heuristic_plus_running")


@dataclass(frozen=True)
class MpcConfig:
    horizon: float = 1.0
    dt: float = 0.1
    max_iterations: int = 50
    tolerance: float = 1e-9
    reg_init: float = 1e-6
    reg_min: float = 1e-6
    reg_max: float = 1e6
    reg_growth: float = 10.0
    reg_shrink: float = 0.5
    line_search_factor: float = 0.5
    min_step: float = 2.0**-10
    cost_mode: str = "heuristic_plus_running"
    psd_eps: float = 1e-6
    fd_step: float = 1e-6
    exact_terminal: bool = False
    verbose: bool = False

    def __post_init__(self):
        if self.cost_mode not in COST_MODES:
            raise ContractViolation(f"unknown cost mode {self.cost_mode!r}")
        if not 0.0 < self.dt <= self.horizon:
            raise ContractViolation("need 0 < dt <= H")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9 * steps:
            raise ContractViolation("dt must divide the horizon")

    def step_sizes(self):
        out = []
        a = 1.0
        while a >= self.min_step * (1.0 - 1e-12):
            out.append(a)
            a *= self.line_search_factor
        return np.array(out)


@dataclass(frozen=True, eq=False)
class ValueCostModel:
    """Where the actor's costs come from.

    ``value_source`` supplies both the heuristic and (in running mode) the
    running cost.  ``task_cost`` is the running cost of ``heuristic_only``
    mode; ``terminal_cost`` replaces the heuristic when there is no value
    source; ``aux_cost`` is added to the running cost in either mode.
    """

    R: np.ndarray
    value_source: object = None
    discount: float = 1.0
    task_cost: Optional[CostTerm] = None
    terminal_cost: Optional[CostTerm] = None
    aux_cost: Optional[CostTerm] = None

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if not np.allclose(R, R.T) or np.linalg.eigvalsh(0.5 * (R + R.T)).min() <= 0.0:
            raise ContractViolation("R must be symmetric positive definite")
        object.__setattr__(self, "R", 0.5 * (R + R.T))

    def with_source(self, source):
        return ValueCostModel(self.R, source, self.discount, self.task_cost, self.terminal_cost, self.aux_cost)


@dataclass(eq=False)
class MpcSolution:
    """Nominal trajectory and local policy; arrays carry a leading batch axis when batched."""

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    feedback: np.ndarray
    feedforward: np.ndarray
    cost: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    diagnostics: list

    @property
    def first_control(self):
        return self.controls[..., 0, :]


def psd_project(H, eps):
    """Clamp the eigenvalues of symmetric matrices from below at ``eps``."""
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    w, V = np.linalg.eigh(H)
    if np.all(w >= eps):
        return H
    w = np.maximum(w, eps)
    return np.einsum("...ij,...j,...kj->...ik", V, w, V)


def drift_jacobian(model, t, x, h=1e-6):
    """Central-difference Jacobian of the drift, shape ``(..., n, n)``."""
    n = model.state_dim
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        cols.append((model.f(t, x + e) - model.f(t, x - e)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def running_cost(cost_model, model, tau, x):
    """-dV/dt - f^T dV/dx + 0.5 dV/dx^T Xi dV/dx, plus the auxiliary cost if any."""
    x = np.asarray(x, dtype=float)
    _, vt, vx = cost_model.value_source.gradients(tau, x)
    f = model.f(tau, x)
    xi = model.xi(tau, x)
    out = -vt - np.einsum("...i,...i->...", f, vx) + 0.5 * np.einsum("...i,...ij,...j->...", vx, xi, vx)
    if cost_model.aux_cost is not None:
        out = out + cost_model.aux_cost.value(tau, x)
    return out


def heuristic_cost(cost_model, t_f, x_f, at_end=None):
    """phi(x_f) = V(t_f, x_f), or the terminal cost when no value source is set.

    Rows flagged in ``at_end`` end at the episode end, where the terminal cost is used instead.
    """
    if cost_model.value_source is not None:
        phi = cost_model.value_source.value(t_f, np.asarray(x_f, dtype=float))
        if at_end is not None and cost_model.terminal_cost is not None and np.any(at_end):
            phi = np.where(at_end, cost_model.terminal_cost.value(t_f, np.asarray(x_f, dtype=float)), phi)
        return phi
    if cost_model.terminal_cost is not None:
        return cost_model.terminal_cost.value(t_f, np.asarray(x_f, dtype=float))
    return np.zeros(np.shape(x_f)[:-1])


def _state_cost(cost_model, model, tau, x, mode):
    if mode == "heuristic_plus_running" and cost_model.value_source is not None:
        return running_cost(cost_model, model, tau, x)
    out = np.zeros(np.shape(x)[:-1])
    if cost_model.task_cost is not None:
        out = out + cost_model.task_cost.value(tau, x)
    if cost_model.aux_cost is not None:
        out = out + cost_model.aux_cost.value(tau, x)
    return out


@dataclass(eq=False)
class LocalCost:
    value: np.ndarray
    lx: np.ndarray
    lxx: np.ndarray
    lu: np.ndarray
    luu: np.ndarray


def quadratize(cost_model, model, tau, x, u, mode="heuristic_plus_running", weight=1.0, psd_eps=1e-6):
    """Gauss-Newton model of ``weight * l(tau, x) + 0.5 u^T R u``.

    In running mode the state gradient of ``l`` is exact up to the variation of
    Xi with ``x``; the state Hessian keeps the second derivatives of V and the
    Jacobian of f, drops third derivatives of V (unless the source provides
    ``dtxx``) and second derivatives of f, and is projected to PSD.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    weight = np.asarray(weight, dtype=float)
    n = model.state_dim
    batch = x.shape[:-1]
    if mode == "heuristic_plus_running" and cost_model.value_source is not None:
        d = cost_model.value_source.derivatives(tau, x)
        f = model.f(tau, x)
        xi = model.xi(tau, x)
        Jf = drift_jacobian(model, tau, x)
        vx, vxx = d.dx, d.dxx
        xi_vx = np.einsum("...ij,...j->...i", xi, vx)
        l = -d.dt - np.einsum("...i,...i->...", f, vx) + 0.5 * np.einsum("...i,...i->...", vx, xi_vx)
        lx = (-d.dtx - np.einsum("...ji,...j->...i", Jf, vx) - np.einsum("...ij,...j->...i", vxx, f)
              + np.einsum("...ij,...j->...i", vxx, xi_vx))
        JtV = np.einsum("...ki,...kj->...ij", Jf, vxx)
        lxx = -(JtV + np.swapaxes(JtV, -1, -2)) + vxx @ xi @ vxx
        if d.dtxx is not None:
            lxx = lxx - d.dtxx
    else:
        l = np.zeros(batch)
        lx = np.zeros(batch + (n,))
        lxx = np.zeros(batch + (n, n))
        if cost_model.task_cost is not None:
            l = l + cost_model.task_cost.value(tau, x)
            lx = lx + cost_model.task_cost.gradient(tau, x)
            lxx = lxx + cost_model.task_cost.hessian(tau, x)
    if cost_model.aux_cost is not None:
        l = l + cost_model.aux_cost.value(tau, x)
        lx = lx + cost_model.aux_cost.gradient(tau, x)
        lxx = lxx + cost_model.aux_cost.hessian(tau, x)
    if not np.all(np.isfinite(lxx)):
        bad = np.argwhere(~np.isfinite(lxx).all(axis=(-1, -2)))[0]
        raise QuadratizationError(np.broadcast_to(tau, batch)[tuple(bad)], x[tuple(bad)])
    lxx = psd_project(lxx, psd_eps)
    w = weight[..., None]
    R = cost_model.R
    return LocalCost(
        value=weight * l + 0.5 * np.einsum("...i,ij,...j->...", u, R, u),
        lx=w * lx,
        lxx=w[..., None] * lxx,
        lu=u @ R,
        luu=np.broadcast_to(R, batch + R.shape),
    )


def _terminal(cost_model, t_f, x, psd_eps, at_end=None):
    src = cost_model.value_source
    term = cost_model.terminal_cost
    if src is not None:
        d = src.derivatives(t_f, x)
        v, vx, vxx = d.value, d.dx, psd_project(d.dxx, psd_eps)
        if at_end is not None and term is not None and np.any(at_end):
            v = np.where(at_end, term.value(t_f, x), v)
            vx = np.where(at_end[:, None], term.gradient(t_f, x), vx)
            vxx = np.where(at_end[:, None, None], psd_project(term.hessian(t_f, x), psd_eps), vxx)
        return v, vx, vxx
    if term is None:
        n = x.shape[-1]
        return np.zeros(x.shape[:-1]), np.zeros(x.shape), np.zeros(x.shape[:-1] + (n, n))
    return term.value(t_f, x), term.gradient(t_f, x), psd_project(term.hessian(t_f, x), psd_eps)


class _HorizonProblem:
    def __init__(self, model, cost_model, config, t0, n_steps, t_end=None):
        self.model = model
        self.cm = cost_model
        self.cfg = config
        self.mode = config.cost_mode
        self.dt = config.dt
        self.N = n_steps
        self.t0 = np.asarray(t0, dtype=float)              # (B,)
        k = np.arange(n_steps)
        self.tau = self.t0[:, None] + self.dt * k          # (B, N)
        self.t_f = self.t0 + self.dt * n_steps
        self.disc = cost_model.discount ** (self.dt * k)   # (N,)
        self.disc_f = cost_model.discount ** (self.dt * n_steps)
        self.at_end = None
        if config.exact_terminal and t_end is not None:
            self.at_end = self.t_f >= float(t_end) - 1e-9 * max(1.0, abs(float(t_end)))

    def sub(self, idx):
        p = object.__new__(_HorizonProblem)
        p.__dict__.update(self.__dict__)
        p.t0 = self.t0[idx]
        p.tau = self.tau[idx]
        p.t_f = self.t_f[idx]
        p.at_end = None if self.at_end is None else self.at_end[idx]
        return p

    def step(self, t, x, u):
        return step_deterministic(self.model, t, x, u, self.dt)

    def rollout(self, x0, U):
        B = x0.shape[0]
        X = np.empty((B, self.N + 1, x0.shape[1]))
        X[:, 0] = x0
        for k in range(self.N):
            X[:, k + 1] = self.step(self.tau[:, k], X[:, k], U[:, k])
        return X

    def rollout_feedback(self, Xbar, Ubar, kff, Kfb, alpha, tau):
        B = Xbar.shape[0]
        X = np.empty_like(Xbar)
        U = np.empty_like(Ubar)
        X[:, 0] = Xbar[:, 0]
        a = alpha[:, None]
        for k in range(self.N):
            dx = X[:, k] - Xbar[:, k]
            U[:, k] = Ubar[:, k] + a * kff[:, k] + np.einsum("bij,bj->bi", Kfb[:, k], dx)
            X[:, k + 1] = self.step(tau[:, k], X[:, k], U[:, k])
        return X, U

    def cost(self, X, U, rows=None):
        tau = self.tau if rows is None else self.tau[rows]
        t_f = self.t_f if rows is None else self.t_f[rows]
        at_end = self.at_end if rows is None or self.at_end is None else self.at_end[rows]
        l = _state_cost(self.cm, self.model, tau, X[:, :-1], self.mode)
        effort = 0.5 * np.einsum("bki,ij,bkj->bk", U, self.cm.R, U)
        running = np.sum((self.disc * l + effort) * self.dt, axis=1)
        phi = heuristic_cost(self.cm, t_f, X[:, -1], at_end)
        J = running + self.disc_f * phi
        return np.where(np.isfinite(J), J, np.inf)

    def linearize(self, X, U):
        n = X.shape[-1]
        m = U.shape[-1]
        h = self.cfg.fd_step
        x = X[:, :-1]
        tau = self.tau
        A = np.empty(x.shape[:2] + (n, n))
        Bm = np.empty(x.shape[:2] + (n, m))
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            A[..., i] = (self.step(tau, x + e, U) - self.step(tau, x - e, U)) / (2 * h)
        for j in range(m):
            e = np.zeros(m)
            e[j] = h
            Bm[..., j] = (self.step(tau, x, U + e) - self.step(tau, x, U - e)) / (2 * h)
        return A, Bm

    def quadratize(self, X, U):
        lc = quadratize(self.cm, self.model, self.tau, X[:, :-1], U, self.mode, self.disc,
                        self.cfg.psd_eps)
        _, phix, phixx = _terminal(self.cm, self.t_f, X[:, -1], self.cfg.psd_eps, self.at_end)
        dt = self.dt
        return (lc.lx * dt, lc.lxx * dt, lc.lu * dt, lc.luu * dt,
                self.disc_f * phix, self.disc_f * phixx)

    def backward(self, A, Bm, quad, mu):
        lx, lxx, lu, luu, Vx, Vxx = quad
        B, N = A.shape[:2]
        m = Bm.shape[-1]
        n = A.shape[-1]
        kff = np.zeros((B, N, m))
        Kfb = np.zeros((B, N, m, n))
        dV = np.zeros((B, 2))
        ok = np.ones(B, dtype=bool)
        eye = np.eye(m)
        for k in range(N - 1, -1, -1):
            Ak, Bk = A[:, k], Bm[:, k]
            AkT = np.swapaxes(Ak, 1, 2)
            BkT = np.swapaxes(Bk, 1, 2)
            Qx = lx[:, k] + np.einsum("bij,bj->bi", AkT, Vx)
            Qu = lu[:, k] + np.einsum("bij,bj->bi", BkT, Vx)
            VA = Vxx @ Ak
            Qxx = lxx[:, k] + AkT @ VA
            Quu = luu[:, k] + BkT @ Vxx @ Bk
            Qux = BkT @ VA
            Quu = 0.5 * (Quu + np.swapaxes(Quu, 1, 2))
            Qreg = Quu + mu[:, None, None] * eye
            good = np.linalg.eigvalsh(Qreg)[:, 0] > 0.0
            ok &= good
            Qreg = np.where(good[:, None, None], Qreg, eye)
            kk = -np.linalg.solve(Qreg, Qu[..., None])[..., 0]
            KK = -np.linalg.solve(Qreg, Qux)
            KKT = np.swapaxes(KK, 1, 2)
            Vx = Qx + np.einsum("bij,bjk,bk->bi", KKT, Quu, kk) + np.einsum("bij,bj->bi", KKT, Qu) \
                + np.einsum("bji,bj->bi", Qux, kk)
            Vxx = Qxx + KKT @ Quu @ KK + KKT @ Qux + np.swapaxes(Qux, 1, 2) @ KK
            Vxx = 0.5 * (Vxx + np.swapaxes(Vxx, 1, 2))
            kff[:, k] = kk
            Kfb[:, k] = KK
            dV[:, 0] += np.einsum("bi,bi->b", kk, Qu)
            dV[:, 1] += 0.5 * np.einsum("bi,bij,bj->b", kk, Quu, kk)
        return kff, Kfb, dV, ok


def horizon_steps(config, t0, t_end=None):
    """Number of solver steps after clipping the horizon at the episode end."""
    span = config.horizon
    if t_end is not None:
        span = min(span, float(t_end) - float(np.max(t0)))
    N = int(np.floor(span / config.dt + 1e-9))
    return max(N, 1)


def solve_batch(model, cost_model, x0, t0, config, t_end=None, U_init=None):
    """Solve ``B`` horizon problems in lock step; ``x0`` is ``(B, n)``."""
    x0 = np.array(x0, dtype=float, ndmin=2)
    B, n = x0.shape
    if n != model.state_dim:
        raise ContractViolation(f"x0 has dimension {n}, expected {model.state_dim}")
    m = model.control_dim
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (B,)).copy()
    N = horizon_steps(config, t0, t_end)
    prob = _HorizonProblem(model, cost_model, config, t0, N, t_end)
    U = np.zeros((B, N, m)) if U_init is None else np.array(U_init, dtype=float).reshape(B, N, m)
    X = prob.rollout(x0, U)
    J = prob.cost(X, U)
    mu = np.full(B, config.reg_init)
    active = np.ones(B, dtype=bool)
    converged = np.zeros(B, dtype=bool)
    iterations = np.zeros(B, dtype=int)
    kff = np.zeros((B, N, m))
    Kfb = np.zeros((B, N, m, n))
    alphas = config.step_sizes()
    diagnostics = []
    for it in range(config.max_iterations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        p = prob.sub(idx)
        Xa, Ua, Ja = X[idx], U[idx], J[idx]
        A, Bm = p.linearize(Xa, Ua)
        quad = p.quadratize(Xa, Ua)
        mua = mu[idx]
        while True:
            kk, KK, dV, ok = p.backward(A, Bm, quad, mua)
            if ok.all():
                break
            mua = np.where(ok, mua, mua * config.reg_growth)
            if np.any(mua > config.reg_max):
                break
        iterations[idx] += 1
        scale = 1.0 + np.abs(Ja)
        # predicted decrease at full step is -(dV1 + dV2)
        small = -(dV[:, 0] + dV[:, 1]) <= config.tolerance * scale
        small &= ok
        # line search: full step for everyone, remaining steps only where rejected
        best_alpha = np.zeros(idx.size)
        Xn, Un = Xa.copy(), Ua.copy()
        Jn = Ja.copy()
        Xt, Ut = p.rollout_feedback(Xa, Ua, kk, KK, np.ones(idx.size), p.tau)
        Jt = p.cost(Xt, Ut)
        acc = ok & (Jt < Ja)
        Xn[acc], Un[acc], Jn[acc], best_alpha[acc] = Xt[acc], Ut[acc], Jt[acc], 1.0
        rej = np.flatnonzero(ok & ~acc & ~small)
        if rej.size and len(alphas) > 1:
            a = alphas[1:]
            na = len(a)
            rep = np.tile(rej, na)
            alpha_vec = np.repeat(a, rej.size)
            Xt, Ut = p.rollout_feedback(Xa[rep], Ua[rep], kk[rep], KK[rep], alpha_vec, p.tau[rep])
            Jt = p.cost(Xt, Ut, rep).reshape(na, rej.size)
            improved = Jt < Ja[rej][None, :]
            first = np.where(improved.any(axis=0), improved.argmax(axis=0), -1)
            for j, r in enumerate(rej):
                if first[j] >= 0:
                    row = first[j] * rej.size + j
                    Xn[r], Un[r], Jn[r] = Xt[row], Ut[row], Jt[first[j], j]
                    best_alpha[r] = a[first[j]]
        accepted = best_alpha > 0.0
        decrease = Ja - Jn
        X[idx], U[idx], J[idx] = Xn, Un, Jn
        kff[idx], Kfb[idx] = kk, KK
        mua = np.where(accepted, np.maximum(mua * config.reg_shrink, config.reg_min), mua)
        mua = np.where(~accepted & ~small, mua * config.reg_growth, mua)
        done = small | (accepted & (decrease <= config.tolerance * scale))
        failed = (~accepted & ~small & (mua > config.reg_max)) | ~ok & (mua > config.reg_max)
        mu[idx] = mua
        converged[idx] = done
        active[idx] = ~(done | failed)
        if config.verbose:
            diagnostics.append((it, float(np.mean(J)), float(np.mean(mu)), float(np.mean(best_alpha))))
    return MpcSolution(
        times=prob.tau[0] if B else None,
        states=X,
        controls=U,
        feedback=Kfb,
        feedforward=kff,
        cost=J,
        iterations=iterations,
        converged=converged,
        diagnostics=diagnostics,
    )


def solve(model, cost_model, x0, t0, config, t_end=None, U_init=None):
    """Single-problem wrapper around :func:`solve_batch`."""
    x0 = np.asarray(x0, dtype=float)
    U = None if U_init is None else np.asarray(U_init, dtype=float)[None]
    sol = solve_batch(model, cost_model, x0[None, :], t0, config, t_end, U)
    return MpcSolution(
        times=sol.times, states=sol.states[0], controls=sol.controls[0], feedback=sol.feedback[0],
        feedforward=sol.feedforward[0], cost=float(sol.cost[0]), iterations=int(sol.iterations[0]),
        converged=bool(sol.converged[0]), diagnostics=sol.diagnostics,
    )


def write_diagnostics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "cost", "regularization", "step_size"])
        for it, cost, reg, step in rows:
            w.writerow([it, f"{cost:.17g}", f"{reg:.17g}", f"{step:.17g}"])


class MpcPolicy:
    """Receding-horizon policy: solve, apply the first control, warm-start the next solve.

    Accepts a single state ``(n,)`` or a batch ``(B, n)``; the warm start is kept
    per batch row, so a batch must keep its row order between calls.
    """

    def __init__(self, model, cost_model, config, t_end=None):
        self.model = model
        self.cost_model = cost_model
        self.config = config
        self.t_end = t_end
        self.last_solution = None
        self.failures = 0
        self.reset()

    def reset(self):
        self._warm = None
        self._last_t = None

    def _warm_start(self, t, B, N):
        if self._warm is None or self._warm.shape[0] != B:
            return None
        shift = int(round((t - self._last_t) / self.config.dt))
        U = self._warm[:, shift:] if shift < self._warm.shape[1] else self._warm[:, -1:]
        if U.shape[1] >= N:
            return U[:, :N]
        pad = np.repeat(U[:, -1:], N - U.shape[1], axis=1)
        return np.concatenate([U, pad], axis=1)

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = x[None] if single else x
        N = horizon_steps(self.config, t, self.t_end)
        U0 = self._warm_start(t, X.shape[0], N)
        sol = solve_batch(self.model, self.cost_model, X, t, self.config, self.t_end, U0)
        self.failures += int(np.sum(~sol.converged))
        self.last_solution = sol
        self._warm = sol.controls
        self._last_t = t
        u = sol.controls[:, 0]
        return u[0] if single else u


def policy_step(model, cost_model, x0, t0, config, t_end=None, previous=None):
    """First control of the horizon problem, warm-started from ``previous`` shifted by one step."""
    U0 = None
    if previous is not None:
        N = horizon_steps(config, t0, t_end)
        prev = np.asarray(previous.controls, dtype=float)
        U = prev[1:] if len(prev) > 1 else prev
        U0 = np.concatenate([U, np.repeat(U[-1:], max(0, N - len(U)), axis=0)])[:N]
    sol = solve(model, cost_model, x0, t0, config, t_end, U0)
    return sol.controls[0], sol
