"""Goal- and time-conditioned MLP value function with analytic derivatives.

Input layout is ``[(T - t) / T, x, goal]``, standardised by fixed per-feature
shift and scale; hidden layers use tanh and the output layer is linear.  The
value is ``output_scale * y``.

Derivatives with respect to ``(t, x)`` are propagated in forward mode (value,
Jacobian and Hessian of every layer); parameter gradients use ordinary
reverse-mode backpropagation.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractViolation
from .value_sources import ValueDerivatives

CHECKPOINT_MAGIC = "dvmpc-value-network v1"


@dataclass(frozen=True, eq=False)
class ValueNet:
    weights: tuple
    biases: tuple
    horizon: float
    state_dim: int
    goal_dim: int = 0
    input_shift: np.ndarray = None
    input_scale: np.ndarray = None
    output_scale: float = 1.0
    polyak_tau: float = 1.0
    activation: str = "tanh"

    def __post_init__(self):
        d = self.input_dim
        if self.weights[0].shape[1] != d:
            raise ContractViolation(f"first layer expects {self.weights[0].shape[1]} inputs, layout has {d}")
        if self.activation != "tanh":
            raise ContractViolation("only tanh hidden activations are supported")
        shift = np.zeros(d) if self.input_shift is None else np.asarray(self.input_shift, dtype=float)
        scale = np.ones(d) if self.input_scale is None else np.asarray(self.input_scale, dtype=float)
        object.__setattr__(self, "input_shift", shift)
        object.__setattr__(self, "input_scale", scale)
        object.__setattr__(self, "weights", tuple(np.asarray(W, dtype=float) for W in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=float) for b in self.biases))

    @property
    def input_dim(self):
        return 1 + self.state_dim + self.goal_dim

    @property
    def sizes(self):
        return (self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights)

    @property
    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_params(self, params):
        return replace(self, weights=tuple(params[0::2]), biases=tuple(params[1::2]))

    @classmethod
    def initialize(cls, state_dim, goal_dim, horizon, rng, hidden=(12, 12, 12), output_gain=1.0, **kwargs):
        """Glorot-uniform weights, zero biases; the output layer is scaled by ``output_gain``."""
        sizes = (1 + state_dim + goal_dim,) + tuple(hidden) + (1,)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        weights[-1] = output_gain * weights[-1]
        return cls(tuple(weights), tuple(biases), float(horizon), int(state_dim), int(goal_dim), **kwargs)

    # value-source conveniences -------------------------------------------

    def bind(self, goal=None):
        return NetValue(self, goal)


def _raw_inputs(net, t, x, goal):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.state_dim:
        raise ContractViolation(f"state has dimension {x.shape[-1]}, network expects {net.state_dim}")
    batch = x.shape[:-1]
    if net.goal_dim:
        if goal is None:
            raise ContractViolation("network is goal-conditioned but no goal was given")
        goal = np.asarray(goal, dtype=float)
        if goal.shape[-1] != net.goal_dim:
            raise ContractViolation(f"goal has dimension {goal.shape[-1]}, network expects {net.goal_dim}")
        batch = np.broadcast_shapes(batch, goal.shape[:-1], np.shape(t))
        goal = np.broadcast_to(goal, batch + (net.goal_dim,))
    else:
        batch = np.broadcast_shapes(batch, np.shape(t))
    ttg = (net.horizon - np.broadcast_to(np.asarray(t, dtype=float), batch)) / net.horizon
    parts = [ttg[..., None], np.broadcast_to(x, batch + (net.state_dim,))]
    if net.goal_dim:
        parts.append(goal)
    raw = np.concatenate(parts, axis=-1)
    z = (raw - net.input_shift) / net.input_scale
    return z.reshape(-1, net.input_dim), batch


def _forward_layers(net, z):
    acts = [z]
    a = z
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        s = a @ W.T + b
        a = s if i == last else np.tanh(s)
        acts.append(a)
    return acts


def forward(net, t, x, goal=None):
    """V(t, x | goal)."""
    z, batch = _raw_inputs(net, t, x, goal)
    y = _forward_layers(net, z)[-1][:, 0]
    return (net.output_scale * y).reshape(batch)


def _input_chain(net):
    """d(z)/d(t, x) for the time and state columns."""
    d = np.zeros(1 + net.state_dim)
    d[0] = -1.0 / (net.horizon * net.input_scale[0])
    d[1:] = 1.0 / net.input_scale[1:1 + net.state_dim]
    return d


def _reverse_input_gradient(net, z):
    acts = _forward_layers(net, z)
    last = len(net.weights) - 1
    delta = np.ones((z.shape[0], 1))
    for i in range(last, -1, -1):
        if i != last:
            delta = delta * (1.0 - acts[i + 1] ** 2)
        delta = delta @ net.weights[i]
    return acts[-1][:, 0], delta


def gradients(net, t, x, goal=None):
    """``(V, dV/dt, dV/dx)`` by reverse-mode differentiation."""
    z, batch = _raw_inputs(net, t, x, goal)
    y, dz = _reverse_input_gradient(net, z)
    chain = _input_chain(net)
    dtx = net.output_scale * dz[:, : 1 + net.state_dim] * chain
    n = net.state_dim
    return ((net.output_scale * y).reshape(batch), dtx[:, 0].reshape(batch), dtx[:, 1:].reshape(batch + (n,)))


def input_gradient(net, t, x, goal=None):
    """``(dV/dt, dV/dx)``; the time derivative carries the -1/T of the time-to-go feature."""
    _, vt, vx = gradients(net, t, x, goal)
    return vt, vx


def _jet(net, z):
    """Value, Jacobian and Hessian of the output w.r.t. (t, x)."""
    p = 1 + net.state_dim
    B = z.shape[0]
    chain = _input_chain(net)
    W0 = net.weights[0]
    a = z
    J = None
    H = None
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        s = a @ W.T + b
        if i == 0:
            Js = np.broadcast_to(W0[:, :p] * chain, (B,) + (W0.shape[0], p))
            Hs = None
        else:
            Js = np.einsum("ij,bjp->bip", W, J)
            Hs = np.einsum("ij,bjpq->bipq", W, H)
        if i == last:
            a, J, H = s, Js, Hs
            break
        a = np.tanh(s)
        d1 = 1.0 - a * a
        d2 = -2.0 * a * d1
        J = d1[:, :, None] * Js
        H = d2[:, :, None, None] * Js[:, :, :, None] * Js[:, :, None, :]
        if Hs is not None:
            H = H + d1[:, :, None, None] * Hs
    if H is None:
        H = np.zeros((B, 1, p, p))
    k = net.output_scale
    return k * a[:, 0], k * J[:, 0], k * H[:, 0]


def derivatives(net, t, x, goal=None):
    """All first and second derivatives in ``(t, x)`` as :class:`ValueDerivatives`.

    ``dtxx`` is a third derivative and is not computed.
    """
    z, batch = _raw_inputs(net, t, x, goal)
    y, J, H = _jet(net, z)
    n = net.state_dim
    return ValueDerivatives(
        value=y.reshape(batch),
        dt=J[:, 0].reshape(batch),
        dx=J[:, 1:].reshape(batch + (n,)),
        dxx=H[:, 1:, 1:].reshape(batch + (n, n)),
        dtx=H[:, 0, 1:].reshape(batch + (n,)),
        dtxx=None,
    )


def input_hessian(net, t, x, goal=None):
    """d2V/dx2; symmetric by construction."""
    H = derivatives(net, t, x, goal).dxx
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def parameter_gradient(net, t, x, goal, y, weight_decay=0.0):
    """Gradient of ``mean((y - V)^2) + 0.5 * weight_decay * sum |W|^2``.

    The targets ``y`` are constants (semi-gradient).  Returns ``(mse, grads)``
    with ``grads`` aligned to ``net.params``.
    """
    z, _ = _raw_inputs(net, t, x, goal)
    y = np.asarray(y, dtype=float).reshape(-1)
    if z.shape[0] == 0 or z.shape[0] != y.shape[0]:
        raise ContractViolation("batch must be non-empty and match the number of targets")
    acts = _forward_layers(net, z)
    v = net.output_scale * acts[-1][:, 0]
    err = v - y
    N = len(y)
    delta = (2.0 / N) * err[:, None] * net.output_scale
    last = len(net.weights) - 1
    grads = [None] * (2 * len(net.weights))
    for i in range(last, -1, -1):
        if i != last:
            delta = delta * (1.0 - acts[i + 1] ** 2)
        grads[2 * i] = delta.T @ acts[i] + weight_decay * net.weights[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        delta = delta @ net.weights[i]
    return float(np.mean(err**2)), grads


def polyak_update(target, net, tau):
    """theta_target <- (1 - tau) theta_target + tau theta."""
    if target.sizes != net.sizes:
        raise ContractViolation(f"architectures differ: {target.sizes} vs {net.sizes}")
    if not 0.0 <= tau <= 1.0:
        raise ContractViolation("Polyak coefficient must lie in [0, 1]")
    params = [(1.0 - tau) * a + tau * b for a, b in zip(target.params, net.params)]
    return target.with_params(params)


class NetValue:
    """A network with a fixed goal, exposed through the value-source protocol."""

    def __init__(self, net, goal=None):
        self.net = net
        self.goal = None if goal is None else np.asarray(goal, dtype=float)

    def value(self, t, x):
        return forward(self.net, t, x, self.goal)

    def gradients(self, t, x):
        return gradients(self.net, t, x, self.goal)

    def derivatives(self, t, x):
        return derivatives(self.net, t, x, self.goal)


# checkpoint I/O ---------------------------------------------------------------

def _fmt(values):
    return " ".join(repr(float(v)) for v in np.ravel(values))


def dump_network(net, label="value"):
    lines = [
        f"network {label}",
        "sizes " + " ".join(str(s) for s in net.sizes),
        f"activation {net.activation}",
        f"horizon {net.horizon!r}",
        f"state_dim {net.state_dim}",
        f"goal_dim {net.goal_dim}",
        "input_shift " + _fmt(net.input_shift),
        "input_scale " + _fmt(net.input_scale),
        f"output_scale {float(net.output_scale)!r}",
        f"polyak_tau {float(net.polyak_tau)!r}",
    ]
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"W{i} {W.shape[0]} {W.shape[1]}")
        lines.extend(_fmt(row) for row in W)
        lines.append(f"b{i} {b.shape[0]}")
        lines.append(_fmt(b))
    lines.append("end")
    return lines


def save_checkpoint(path, networks):
    """Write ``{label: ValueNet}`` to a plain-text checkpoint."""
    lines = [CHECKPOINT_MAGIC]
    for label, net in networks.items():
        lines.extend(dump_network(net, label))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`; returns ``{label: ValueNet}``."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{path}: not a value-network checkpoint")
    out = {}
    pos = 1
    while pos < len(lines):
        head, label = lines[pos].split(maxsplit=1)
        if head != "network":
            raise ContractViolation(f"{path}:{pos + 1}: expected 'network', got {head!r}")
        pos += 1
        meta = {}
        while not lines[pos].startswith("W0 "):
            key, _, rest = lines[pos].partition(" ")
            meta[key] = rest
            pos += 1
        sizes = [int(v) for v in meta["sizes"].split()]
        weights, biases = [], []
        for i in range(len(sizes) - 1):
            _, rows, cols = lines[pos].split()
            rows, cols = int(rows), int(cols)
            W = np.array([[float(v) for v in lines[pos + 1 + r].split()] for r in range(rows)]).reshape(rows, cols)
            pos += 1 + rows
            _, blen = lines[pos].split()
            b = np.array([float(v) for v in lines[pos + 1].split()]).reshape(int(blen))
            pos += 2
            weights.append(W)
            biases.append(b)
        if lines[pos] != "end":
            raise ContractViolation(f"{path}:{pos + 1}: expected 'end'")
        pos += 1
        out[label] = ValueNet(
            weights=tuple(weights), biases=tuple(biases), horizon=float(meta["horizon"]),
            state_dim=int(meta["state_dim"]), goal_dim=int(meta["goal_dim"]),
            input_shift=np.array([float(v) for v in meta["input_shift"].split()]),
            input_scale=np.array([float(v) for v in meta["input_scale"].split()]),
            output_scale=float(meta["output_scale"]), polyak_tau=float(meta["polyak_tau"]),
            activation=meta["activation"],
        )
    return out
