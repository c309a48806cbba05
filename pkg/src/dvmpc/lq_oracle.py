"""Exact finite-horizon solutions of linear-quadratic problems.

For ``dx = (A x + B u) dt + B dB`` with ``Var[dB] = lambda R^-1 dt``, running
cost ``0.5 x^T Q x`` and terminal cost ``0.5 x^T Q_f x`` the optimal value is
``V*(t, x) = 0.5 x^T P(t) x + c(t)`` with

    -dP/dt = Q + A^T P + P A - P B R^-1 B^T P,      P(T) = Q_f
    -dc/dt = (lambda / 2) Tr[Xi P],                  c(T) = 0

where ``Xi = B R^-1 B^T``.  The discount is fixed at 1 here.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DomainError, OracleFailure
from .value_sources import ValueDerivatives


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


@dataclass(frozen=True, eq=False)
class LqProblem:
    A: np.ndarray
    B_mat: np.ndarray
    Q: np.ndarray
    Q_f: np.ndarray
    R: np.ndarray
    lam: float
    T: float

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        B = np.asarray(self.B_mat, dtype=float).reshape(n, -1)
        m = B.shape[1]
        Q = np.asarray(self.Q, dtype=float).reshape(n, n)
        Qf = np.asarray(self.Q_f, dtype=float).reshape(n, n)
        R = np.asarray(self.R, dtype=float).reshape(m, m)
        for name, M, strict in (("Q", Q, False), ("Q_f", Qf, False), ("R", R, True)):
            if not np.allclose(M, M.T, atol=1e-12):
                raise ContractViolation(f"{name} must be symmetric")
            lo = np.linalg.eigvalsh(_sym(M)).min()
            if (strict and lo <= 0.0) or lo < -1e-12:
                raise ContractViolation(f"{name} must be positive {'definite' if strict else 'semi-definite'}")
        if self.lam < 0.0 or self.T <= 0.0:
            raise ContractViolation("need lambda >= 0 and T > 0")
        for name, value in (("A", A), ("B_mat", B), ("Q", _sym(Q)), ("Q_f", _sym(Qf)), ("R", _sym(R))):
            object.__setattr__(self, name, value)
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "T", float(self.T))

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B_mat.shape[1]

    @property
    def R_inv(self):
        return np.linalg.inv(self.R)

    @property
    def xi(self):
        return self.B_mat @ self.R_inv @ self.B_mat.T

    def riccati_rhs(self, P):
        """dP/dt (note the sign: this is minus the usual right-hand side)."""
        A = self.A
        return -(self.Q + A.T @ P + P @ A - P @ self.xi @ P)

    def offset_rhs(self, P):
        """dc/dt."""
        return -0.5 * self.lam * np.einsum("ij,...ji->...", self.xi, P)


def scalar_problem(a=0.0, b=1.0, q=1.0, q_f=0.0, r=1.0, lam=1.0, T=1.0):
    return LqProblem(A=[[a]], B_mat=[[b]], Q=[[q]], Q_f=[[q_f]], R=[[r]], lam=lam, T=T)


def double_integrator_problem(q_pos=1.0, q_vel=0.1, q_f=1.0, r=1.0, lam=1.0, T=3.0):
    return LqProblem(A=[[0.0, 1.0], [0.0, 0.0]], B_mat=[[0.0], [1.0]], Q=np.diag([q_pos, q_vel]),
                     Q_f=q_f * np.eye(2), R=[[r]], lam=lam, T=T)


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    lq: LqProblem
    times: np.ndarray   # (K,)
    P: np.ndarray       # (K, n, n)
    c: np.ndarray       # (K,)

    @property
    def T(self):
        return self.lq.T

    def _locate(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < -1e-12) or np.any(t > self.T + 1e-12):
            raise DomainError(f"t must lie in [0, {self.T}]")
        t = np.clip(t, 0.0, self.T)
        h = self.times[1] - self.times[0]
        k = np.clip(np.floor(t / h).astype(int), 0, len(self.times) - 2)
        w = (t - self.times[k]) / h
        return k, w

    def interpolate(self, t):
        """Linearly interpolated ``(P(t), c(t))``; ``t`` may be an array."""
        k, w = self._locate(t)
        wP = np.asarray(w)[..., None, None]
        P = (1.0 - wP) * self.P[k] + wP * self.P[k + 1]
        c = (1.0 - w) * self.c[k] + w * self.c[k + 1]
        return _sym(P), c

    # value-source protocol -------------------------------------------------

    def value(self, t, x):
        P, c = self.interpolate(np.broadcast_to(t, np.shape(x)[:-1]))
        return 0.5 * np.einsum("...i,...ij,...j->...", x, P, x) + c

    def gradients(self, t, x):
        d = self.derivatives(t, x)
        return d.value, d.dt, d.dx

    def derivatives(self, t, x):
        x = np.asarray(x, dtype=float)
        P, c = self.interpolate(np.broadcast_to(t, x.shape[:-1]))
        Pdot = self.lq.riccati_rhs(P)
        cdot = self.lq.offset_rhs(P)
        Px = np.einsum("...ij,...j->...i", P, x)
        Pdx = np.einsum("...ij,...j->...i", Pdot, x)
        return ValueDerivatives(
            value=0.5 * np.einsum("...i,...i->...", x, Px) + c,
            dt=0.5 * np.einsum("...i,...i->...", x, Pdx) + cdot,
            dx=Px,
            dxx=P,
            dtx=Pdx,
            dtxx=Pdot,
        )

    def to_csv(self, path):
        """Debug dump of diag(P(t)) and c(t)."""
        n = self.lq.n
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"P{i}{i}" for i in range(n)] + ["c"])
            for k, t in enumerate(self.times):
                w.writerow([f"{v:.17g}" for v in (t, *np.diag(self.P[k]), self.c[k])])


def solve_riccati(lq, dt=1e-3, bound=1e8):
    """Backward RK4 integration of the Riccati and offset equations from ``T``."""
    steps = lq.T / dt
    K = int(round(steps))
    if K < 1 or abs(steps - K) > 1e-9 * steps:
        raise ContractViolation("dt must divide T")
    h = lq.T / K
    n = lq.n
    P = np.empty((K + 1, n, n))
    c = np.empty(K + 1)
    P[K] = lq.Q_f
    c[K] = 0.0

    def rhs(Pk):
        return lq.riccati_rhs(Pk), lq.offset_rhs(Pk)

    for k in range(K, 0, -1):
        Pk, ck = P[k], c[k]
        # integrate backwards: step of -h
        k1P, k1c = rhs(Pk)
        k2P, k2c = rhs(Pk - 0.5 * h * k1P)
        k3P, k3c = rhs(Pk - 0.5 * h * k2P)
        k4P, k4c = rhs(Pk - h * k3P)
        P[k - 1] = _sym(Pk - (h / 6.0) * (k1P + 2 * k2P + 2 * k3P + k4P))
        c[k - 1] = ck - (h / 6.0) * (k1c + 2 * k2c + 2 * k3c + k4c)
        if not np.isfinite(P[k - 1]).all() or np.abs(P[k - 1]).max() > bound:
            raise OracleFailure(f"Riccati integration diverged at t={k * h - h:.6g}")
    return RiccatiSolution(lq=lq, times=np.linspace(0.0, lq.T, K + 1), P=P, c=c)


def optimal_value(sol, t, x):
    """V*(t, x) = 0.5 x^T P(t) x + c(t)."""
    return sol.value(t, np.asarray(x, dtype=float))


def optimal_policy(sol, t, x):
    """u*(t, x) = -R^-1 B^T P(t) x."""
    x = np.asarray(x, dtype=float)
    P, _ = sol.interpolate(np.broadcast_to(t, x.shape[:-1]))
    gain = sol.lq.R_inv @ sol.lq.B_mat.T
    return -np.einsum("ij,...jk,...k->...i", gain, P, x)


def value_derivatives(sol, t, x):
    """``(dV/dt, dV/dx, d2V/dx2)`` from the Riccati right-hand sides."""
    d = sol.derivatives(t, np.asarray(x, dtype=float))
    return d.dt, d.dx, d.dxx


def policy_from(sol):
    def policy(t, x):
        return optimal_policy(sol, t, x)

    return policy


def feedback_policy(sol, scale):
    """``scale * u*``: a detuned copy of the optimal feedback."""
    def policy(t, x):
        return scale * optimal_policy(sol, t, x)

    return policy


def rk4_transition(A, B, h):
    """Exact matrices of one RK4 step on ``xdot = A x + B u`` with ``u`` held constant."""
    n = A.shape[0]
    I = np.eye(n)
    Ah = A * h
    Ad = I + Ah + Ah @ Ah / 2.0 + Ah @ Ah @ Ah / 6.0 + Ah @ Ah @ Ah @ Ah / 24.0
    Bd = (I * h + Ah * h / 2.0 + Ah @ Ah * h / 6.0 + Ah @ Ah @ Ah * h / 24.0) @ B
    return Ad, Bd


@dataclass(frozen=True, eq=False)
class DiscreteLqSolution:
    lq: LqProblem
    dt: float
    P: np.ndarray      # (N+1, n, n)
    gains: np.ndarray  # (N, m, n)

    def cost(self, x0):
        x0 = np.asarray(x0, dtype=float)
        return 0.5 * x0 @ self.P[0] @ x0

    def first_control(self, x0):
        return -self.gains[0] @ np.asarray(x0, dtype=float)

    def controls(self, x0):
        Ad, Bd = rk4_transition(self.lq.A, self.lq.B_mat, self.dt)
        x = np.asarray(x0, dtype=float)
        out = []
        for K in self.gains:
            u = -K @ x
            out.append(u)
            x = Ad @ x + Bd @ u
        return np.array(out)


def solve_discrete_riccati(lq, dt, t0=0.0):
    """Dynamic-programming solution of the sampled problem the iLQR optimises.

    Dynamics are the RK4 step with zero-order-hold control, the running cost is
    the left Riemann sum ``sum (0.5 x^T Q x + 0.5 u^T R u) dt`` and the
    terminal cost is ``0.5 x_N^T Q_f x_N``.  The noise offset is not included.
    """
    span = lq.T - t0
    N = int(round(span / dt))
    if N < 1 or abs(span / dt - N) > 1e-9 * N:
        raise ContractViolation("dt must divide the remaining horizon")
    Ad, Bd = rk4_transition(lq.A, lq.B_mat, dt)
    P = np.empty((N + 1, lq.n, lq.n))
    gains = np.empty((N, lq.m, lq.n))
    P[N] = lq.Q_f
    for k in range(N - 1, -1, -1):
        Pn = P[k + 1]
        H = lq.R * dt + Bd.T @ Pn @ Bd
        K = np.linalg.solve(H, Bd.T @ Pn @ Ad)
        gains[k] = K
        P[k] = _sym(lq.Q * dt + Ad.T @ Pn @ Ad - Ad.T @ Pn @ Bd @ K)
    return DiscreteLqSolution(lq=lq, dt=dt, P=P, gains=gains)


def feedback_kl(lq, K_a, K_b, x0, t0=0.0, dt=1e-4):
    """KL between the path measures of two static linear feedbacks ``u = -K x``.

    Trajectories follow ``u_b``.  The state mean ``m`` and covariance ``S``
    obey ``mdot = A_b m`` and ``Sdot = A_b S + S A_b^T + B Sigma B^T`` with
    ``A_b = A - B K_b`` and ``Sigma = lambda R^-1``; the divergence is
    ``(1 / lambda) int 0.5 Tr[D^T R D (S + m m^T)] dt`` with ``D = K_a - K_b``.
    The moment equations are integrated with RK4 and the integral with the
    trapezoidal rule on the same grid.
    """
    if lq.lam <= 0.0:
        raise DomainError("the divergence is undefined without noise")
    K_a = np.atleast_2d(np.asarray(K_a, dtype=float)).reshape(lq.m, lq.n)
    K_b = np.atleast_2d(np.asarray(K_b, dtype=float)).reshape(lq.m, lq.n)
    D = K_a - K_b
    W = D.T @ lq.R @ D
    Ab = lq.A - lq.B_mat @ K_b
    noise = lq.lam * lq.B_mat @ lq.R_inv @ lq.B_mat.T
    span = lq.T - t0
    K = int(round(span / dt))
    h = span / K

    def rhs(m, S):
        return Ab @ m, Ab @ S + S @ Ab.T + noise

    m = np.asarray(x0, dtype=float).reshape(lq.n)
    S = np.zeros((lq.n, lq.n))
    integrand = np.empty(K + 1)
    for k in range(K + 1):
        integrand[k] = 0.5 * np.trace(W @ (S + np.outer(m, m)))
        if k == K:
            break
        k1 = rhs(m, S)
        k2 = rhs(m + 0.5 * h * k1[0], S + 0.5 * h * k1[1])
        k3 = rhs(m + 0.5 * h * k2[0], S + 0.5 * h * k2[1])
        k4 = rhs(m + h * k3[0], S + h * k3[1])
        m = m + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        S = S + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return float(np.trapezoid(integrand, dx=h)) / lq.lam
