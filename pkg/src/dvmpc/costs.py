"""State cost terms with analytic first and second derivatives.

Every term is evaluated on batches: ``x`` has shape ``(..., n)`` and ``t`` is
anything broadcastable against ``x[..., 0]``.  ``value`` returns ``(...)``,
``gradient`` returns ``(..., n)`` and ``hessian`` returns ``(..., n, n)``.
"""
from __future__ import annotations

import numpy as np


class CostTerm:
    state_dim: int

    def value(self, t, x):
        raise NotImplementedError

    def gradient(self, t, x):
        raise NotImplementedError

    def hessian(self, t, x):
        raise NotImplementedError

    def __add__(self, other):
        return SumCost([self, other])


class ZeroCost(CostTerm):
    def __init__(self, state_dim):
        self.state_dim = int(state_dim)

    def value(self, t, x):
        return np.zeros(np.shape(x)[:-1])

    def gradient(self, t, x):
        return np.zeros(np.shape(x))

    def hessian(self, t, x):
        n = self.state_dim
        return np.zeros(np.shape(x)[:-1] + (n, n))


class QuadraticCost(CostTerm):
    """0.5 (x - ref)^T Q (x - ref)."""

    def __init__(self, Q, ref=None):
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.Q = 0.5 * (self.Q + self.Q.T)
        self.state_dim = self.Q.shape[0]
        self.ref = np.zeros(self.state_dim) if ref is None else np.asarray(ref, dtype=float)

    def value(self, t, x):
        d = np.asarray(x, dtype=float) - self.ref
        return 0.5 * np.einsum("...i,ij,...j->...", d, self.Q, d)

    def gradient(self, t, x):
        d = np.asarray(x, dtype=float) - self.ref
        return d @ self.Q

    def hessian(self, t, x):
        shape = np.shape(x)[:-1]
        return np.broadcast_to(self.Q, shape + self.Q.shape).copy()


class DistanceCost(CostTerm):
    """weight * (sqrt(|p - goal|^2 + eps^2) - eps) over the coordinates ``indices``.

    ``eps`` rounds off the cone tip at the goal so the Hessian stays bounded.
    """

    def __init__(self, state_dim, indices, goal, weight=1.0, eps=0.05):
        self.state_dim = int(state_dim)
        self.indices = np.asarray(indices, dtype=int)
        self.goal = np.asarray(goal, dtype=float)
        self.weight = float(weight)
        self.eps = float(eps)

    def _diff(self, x):
        d = np.asarray(x, dtype=float)[..., self.indices] - self.goal
        r = np.sqrt(np.sum(d * d, axis=-1) + self.eps**2)
        return d, r

    def value(self, t, x):
        _, r = self._diff(x)
        return self.weight * (r - self.eps)

    def gradient(self, t, x):
        d, r = self._diff(x)
        out = np.zeros(np.shape(x))
        out[..., self.indices] = self.weight * d / r[..., None]
        return out

    def hessian(self, t, x):
        d, r = self._diff(x)
        k = len(self.indices)
        block = (np.eye(k) - d[..., :, None] * d[..., None, :] / (r * r)[..., None, None]) / r[..., None, None]
        out = np.zeros(np.shape(x)[:-1] + (self.state_dim, self.state_dim))
        ix = np.ix_(self.indices, self.indices)
        out[(Ellipsis,) + ix] = self.weight * block
        return out


class CosineCost(CostTerm):
    """weight * (1 - cos(x[index] - target)); used for angle-valued states."""

    def __init__(self, state_dim, index, target=0.0, weight=1.0):
        self.state_dim = int(state_dim)
        self.index = int(index)
        self.target = float(target)
        self.weight = float(weight)

    def value(self, t, x):
        return self.weight * (1.0 - np.cos(np.asarray(x)[..., self.index] - self.target))

    def gradient(self, t, x):
        out = np.zeros(np.shape(x))
        out[..., self.index] = self.weight * np.sin(np.asarray(x)[..., self.index] - self.target)
        return out

    def hessian(self, t, x):
        n = self.state_dim
        out = np.zeros(np.shape(x)[:-1] + (n, n))
        out[..., self.index, self.index] = self.weight * np.cos(np.asarray(x)[..., self.index] - self.target)
        return out


class SumCost(CostTerm):
    def __init__(self, terms):
        self.terms = list(terms)
        self.state_dim = self.terms[0].state_dim

    def value(self, t, x):
        return sum(term.value(t, x) for term in self.terms)

    def gradient(self, t, x):
        return sum(term.gradient(t, x) for term in self.terms)

    def hessian(self, t, x):
        return sum(term.hessian(t, x) for term in self.terms)
