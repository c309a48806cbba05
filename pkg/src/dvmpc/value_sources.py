"""Value sources consumed by the MPC actor.

A value source offers three vectorised calls on ``(t, x)`` with ``x`` of shape
``(..., n)``:

* ``value(t, x)`` -> ``(...)``
* ``gradients(t, x)`` -> ``(V, dV/dt, dV/dx)``
* ``derivatives(t, x)`` -> :class:`ValueDerivatives`

``dtxx`` (the time derivative of the state Hessian) is optional; sources that
cannot provide it cheaply return ``None`` and the actor treats it as zero.
"""
from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np


class ValueDerivatives(NamedTuple):
    value: np.ndarray
    dt: np.ndarray
    dx: np.ndarray
    dxx: np.ndarray
    dtx: np.ndarray
    dtxx: Optional[np.ndarray] = None


class ZeroValue:
    def __init__(self, state_dim):
        self.state_dim = state_dim

    def value(self, t, x):
        return np.zeros(np.shape(x)[:-1])

    def gradients(self, t, x):
        z = np.zeros(np.shape(x)[:-1])
        return z, z.copy(), np.zeros(np.shape(x))

    def derivatives(self, t, x):
        shape = np.shape(x)[:-1]
        n = np.shape(x)[-1]
        return ValueDerivatives(np.zeros(shape), np.zeros(shape), np.zeros(np.shape(x)),
                                np.zeros(shape + (n, n)), np.zeros(np.shape(x)), np.zeros(shape + (n, n)))


class SinePerturbation:
    """``base + amplitude * sin(w^T x + b)``; its sup-norm distance to ``base`` is ``amplitude``."""

    def __init__(self, base, amplitude, w, b):
        self.base = base
        self.amplitude = float(amplitude)
        self.w = np.asarray(w, dtype=float)
        self.b = float(b)

    def _phase(self, x):
        return np.asarray(x, dtype=float) @ self.w + self.b

    def value(self, t, x):
        return self.base.value(t, x) + self.amplitude * np.sin(self._phase(x))

    def gradients(self, t, x):
        V, Vt, Vx = self.base.gradients(t, x)
        ph = self._phase(x)
        return (V + self.amplitude * np.sin(ph), Vt,
                Vx + self.amplitude * np.cos(ph)[..., None] * self.w)

    def derivatives(self, t, x):
        d = self.base.derivatives(t, x)
        ph = self._phase(x)
        a = self.amplitude
        return d._replace(
            value=d.value + a * np.sin(ph),
            dx=d.dx + a * np.cos(ph)[..., None] * self.w,
            dxx=d.dxx - a * np.sin(ph)[..., None, None] * np.outer(self.w, self.w),
        )
