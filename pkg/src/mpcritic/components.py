"""Learnable pieces of an MPC problem: dynamics, controllers, costs, constraints.

All components work on batches (leading axis = sample).  Each exposes a
``forward`` returning its output plus a cache, and a ``backward`` that maps an
upstream gradient to input gradients and a ``{param_name: grad}`` dict.
Parameters live in ``self.params`` so a :class:`~mpcritic.diffcore.ParamVector`
can bind them.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .diffcore import ParamVector, Slot
from .errors import ConfigError

COST = "cost"
REWARD = "reward"


def _sym(X):
    return 0.5 * (X + X.T)


def _rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


# ---------------------------------------------------------------------------
# multilayer perceptron


class Mlp:
    """Fully connected ReLU network with a linear output layer."""

    def __init__(self, sizes, rng: np.random.Generator):
        if len(sizes) < 2:
            raise ConfigError("an Mlp needs at least input and output widths")
        self.sizes = tuple(int(s) for s in sizes)
        self.params = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            self.params[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params[f"b{i}"] = rng.uniform(-bound, bound, size=fan_out)

    @property
    def depth(self):
        return len(self.sizes) - 1

    def forward(self, x):
        p = self.params
        h = x
        inputs = []
        for i in range(self.depth):
            inputs.append(h)
            z = h @ p[f"W{i}"] + p[f"b{i}"]
            h = np.maximum(z, 0.0) if i < self.depth - 1 else z
        return h, inputs

    def backward(self, inputs, dy):
        p = self.params
        grads = {}
        dz = dy
        for i in reversed(range(self.depth)):
            h = inputs[i]
            grads[f"W{i}"] = h.T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            dh = dz @ p[f"W{i}"].T
            # inputs[i] for i > 0 is relu(z_{i-1}); its positive part marks the active units
            dz = dh * (h > 0) if i > 0 else dh
        return dz, grads


# ---------------------------------------------------------------------------
# dynamics


class LinearDynamics:
    """x' = A x + B u."""

    def __init__(self, A, B):
        A = np.array(A, dtype=np.float64, ndmin=2)
        B = np.array(B, dtype=np.float64, ndmin=2)
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise ConfigError(f"inconsistent dynamics shapes A{A.shape} B{B.shape}")
        self.params = {"A": A, "B": B}

    @classmethod
    def random(cls, n, m, rng):
        return cls(rng.standard_normal((n, n)), rng.standard_normal((n, m)))

    @property
    def A(self):
        return self.params["A"]

    @property
    def B(self):
        return self.params["B"]

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def forward(self, x, u):
        return x @ self.A.T + u @ self.B.T, (x, u)

    def backward(self, cache, dy):
        x, u = cache
        return dy @ self.A, dy @ self.B, {"A": dy.T @ x, "B": dy.T @ u}


class MlpDynamics:
    """x' = x + net([x, u]) with a ReLU network (residual form)."""

    def __init__(self, n, m, hidden=(64, 64), rng=None, residual=True):
        rng = np.random.default_rng() if rng is None else rng
        self.n, self.m = n, m
        self.residual = residual
        self.net = Mlp((n + m, *hidden, n), rng)
        self.params = self.net.params

    def forward(self, x, u):
        y, cache = self.net.forward(np.concatenate([x, u], axis=1))
        return (x + y if self.residual else y), cache

    def backward(self, cache, dy):
        dxu, grads = self.net.backward(cache, dy)
        dx, du = dxu[:, : self.n], dxu[:, self.n:]
        if self.residual:
            dx = dx + dy
        return dx, du, grads


# ---------------------------------------------------------------------------
# controllers


class LinearGainController:
    """mu(x) = -K x."""

    def __init__(self, K):
        self.params = {"K": np.array(K, dtype=np.float64, ndmin=2)}

    @classmethod
    def random(cls, n, m, rng):
        return cls(rng.standard_normal((m, n)))

    @property
    def K(self):
        return self.params["K"]

    def forward(self, x):
        return -x @ self.K.T, x

    def backward(self, x, du):
        return -du @ self.K, {"K": -du.T @ x}


class MlpController:
    """ReLU network squashed by tanh into the action box ``[low, high]``."""

    def __init__(self, n, m, hidden=(100, 100), low=-1.0, high=1.0, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        low = np.broadcast_to(np.asarray(low, dtype=np.float64), (m,)).copy()
        high = np.broadcast_to(np.asarray(high, dtype=np.float64), (m,)).copy()
        if np.any(low >= high):
            raise ConfigError("action box needs low < high")
        self.n, self.m = n, m
        self.center = 0.5 * (high + low)
        self.half = 0.5 * (high - low)
        self.net = Mlp((n, *hidden, m), rng)
        self.params = self.net.params

    def forward(self, x):
        z, cache = self.net.forward(x)
        t = np.tanh(z)
        return self.center + self.half * t, (cache, t)

    def backward(self, cache, du):
        net_cache, t = cache
        return self.net.backward(net_cache, du * self.half * (1.0 - t * t))


# ---------------------------------------------------------------------------
# stage costs (forward returns cost convention, shape (batch,))


class QuadraticStageCost:
    """x'Mx + u'Ru; with ``convention="reward"`` the same form is read as a reward."""

    def __init__(self, M, R, convention=COST):
        if convention not in (COST, REWARD):
            raise ConfigError(f"unknown convention {convention!r}")
        self.params = {"M": _sym(np.array(M, dtype=np.float64, ndmin=2)),
                       "R": _sym(np.array(R, dtype=np.float64, ndmin=2))}
        self.convention = convention
        self.sign = 1.0 if convention == COST else -1.0

    @property
    def M(self):
        return self.params["M"]

    @property
    def R(self):
        return self.params["R"]

    def forward(self, x, u):
        xM, uR = x @ self.M, u @ self.R
        c = self.sign * (np.einsum("bi,bi->b", xM, x) + np.einsum("bi,bi->b", uR, u))
        return c, (x, u, xM, uR)

    def backward(self, cache, dc):
        x, u, xM, uR = cache
        g = self.sign * dc[:, None]
        dx = g * (xM + x @ self.M.T)
        du = g * (uR + u @ self.R.T)
        return dx, du, {"M": (g * x).T @ x, "R": (g * u).T @ u}


class GaussianStageCost:
    """Negated Gaussian reward on one state coordinate, exp(-(goal - x_i)^2 / (2 var))."""

    def __init__(self, goal, var, index=1):
        if var <= 0:
            raise ConfigError("Gaussian width must be positive")
        self.goal, self.var, self.index = float(goal), float(var), int(index)
        self.params = {}

    def reward(self, x):
        d = self.goal - _rows(x)[:, self.index]
        return np.exp(-d * d / (2 * self.var))

    def forward(self, x, u):
        d = self.goal - x[:, self.index]
        r = np.exp(-d * d / (2 * self.var))
        return -r, (x, u, d, r)

    def backward(self, cache, dc):
        x, u, d, r = cache
        dx = np.zeros_like(x)
        # d(-r)/dx_i = -r * d / var
        dx[:, self.index] = -dc * r * d / self.var
        return dx, np.zeros_like(u), {}


# ---------------------------------------------------------------------------
# terminal values (cost convention)


class QuadraticTerminal:
    """V(x) = x'Px.

    ``form="sym"`` stores an unconstrained square W with P = (W + W')/2;
    ``form="factor"`` stores L with P = L L', which keeps P positive
    semidefinite throughout learning.
    """

    uses_action = False

    def __init__(self, W, form="sym"):
        if form not in ("sym", "factor"):
            raise ConfigError(f"unknown terminal form {form!r}")
        self.form = form
        key = "W" if form == "sym" else "L"
        self.params = {key: np.array(W, dtype=np.float64, ndmin=2)}

    @classmethod
    def random(cls, n, rng, form="sym"):
        return cls(rng.standard_normal((n, n)), form)

    @classmethod
    def from_matrix(cls, P, form="sym"):
        P = _sym(np.array(P, dtype=np.float64, ndmin=2))
        if form == "sym":
            return cls(P, form)
        w, U = np.linalg.eigh(P)
        return cls(U * np.sqrt(np.maximum(w, 0.0)), form)

    @property
    def P(self):
        if self.form == "sym":
            return _sym(self.params["W"])
        L = self.params["L"]
        return L @ L.T

    def forward(self, x, u=None):
        xP = x @ self.P
        return np.einsum("bi,bi->b", xP, x), (x, xP)

    def backward(self, cache, dv):
        x, xP = cache
        g = dv[:, None]
        G = (g * x).T @ x
        if self.form == "sym":
            return 2.0 * g * xP, None, {"W": G}
        return 2.0 * g * xP, None, {"L": 2.0 * G @ self.params["L"]}


class MlpTerminal:
    uses_action = False

    def __init__(self, n, hidden=(64, 64), rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.net = Mlp((n, *hidden, 1), rng)
        self.params = self.net.params

    def forward(self, x, u=None):
        y, cache = self.net.forward(x)
        return y[:, 0], cache

    def backward(self, cache, dv):
        dx, grads = self.net.backward(cache, dv[:, None])
        return dx, None, grads


class MlpQ:
    """Q(s, a) network on the concatenated state-action vector (reward convention)."""

    def __init__(self, n, m, hidden=(256,), rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.n, self.m = n, m
        self.net = Mlp((n + m, *hidden, 1), rng)
        self.params = self.net.params

    def forward(self, s, a):
        y, cache = self.net.forward(np.concatenate([s, a], axis=1))
        return y[:, 0], cache

    def backward(self, cache, dq):
        dsa, grads = self.net.backward(cache, dq[:, None])
        return dsa[:, : self.n], dsa[:, self.n:], grads

    def value(self, s, a):
        return self.forward(_rows(s), _rows(a))[0]


class CriticTerminal:
    """Terminal cost from an external critic: V(x) = -Q(x, mu(x)).

    The rollout supplies ``u = mu(x_N)``; this wrapper shares parameters with
    the wrapped :class:`MlpQ`.
    """

    uses_action = True

    def __init__(self, q: MlpQ):
        self.q = q
        self.params = q.params

    def forward(self, x, u):
        v, cache = self.q.forward(x, u)
        return -v, cache

    def backward(self, cache, dv):
        return self.q.backward(cache, -dv)


# ---------------------------------------------------------------------------
# constraints


class BoxConstraint:
    """lower <= x <= upper, evaluated as elementwise violations."""

    def __init__(self, lower, upper):
        lower = np.atleast_1d(np.asarray(lower, dtype=np.float64))
        upper = np.atleast_1d(np.asarray(upper, dtype=np.float64))
        lower, upper = np.broadcast_arrays(lower, upper)
        if np.any(lower >= upper):
            raise ConfigError("box needs lower < upper elementwise")
        self.lower, self.upper = lower.copy(), upper.copy()

    @classmethod
    def symmetric(cls, n, bound=1.0):
        return cls(-bound * np.ones(n), bound * np.ones(n))

    def violation(self, x):
        """Stacked (lower-side, upper-side) violations, each nonnegative."""
        x = np.asarray(x, dtype=np.float64)
        return np.concatenate([np.maximum(self.lower - x, 0.0),
                               np.maximum(x - self.upper, 0.0)], axis=-1)

    def penalty(self, x):
        """L1 norm of the violation, per sample."""
        return (np.maximum(self.lower - x, 0.0) + np.maximum(x - self.upper, 0.0)).sum(axis=-1)

    def penalty_grad(self, x):
        return (x > self.upper).astype(np.float64) - (x < self.lower)

    def contains(self, x):
        x = np.asarray(x)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)

    def clip(self, x):
        return np.clip(x, self.lower, self.upper)


# ---------------------------------------------------------------------------
# single-sample conveniences


def predict(f, x, u):
    x, u = np.asarray(x, dtype=np.float64), np.asarray(u, dtype=np.float64)
    y = f.forward(_rows(x), _rows(u))[0]
    return y[0] if x.ndim == 1 else y


def act(mu, x):
    x = np.asarray(x, dtype=np.float64)
    u = mu.forward(_rows(x))[0]
    return u[0] if x.ndim == 1 else u


def stage_cost(ell, x, u):
    x = np.asarray(x, dtype=np.float64)
    c = ell.forward(_rows(x), _rows(u))[0]
    return float(c[0]) if x.ndim == 1 else c


def terminal_value(V, x, u=None):
    x = np.asarray(x, dtype=np.float64)
    v = V.forward(_rows(x), None if u is None else _rows(u))[0]
    return float(v[0]) if x.ndim == 1 else v


def violation(h: BoxConstraint, x):
    return h.violation(x)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ParamVector, meta=None):
    """Write layout and float64 values; round trip is bit-exact."""
    layout = [[s.name, s.offset, list(s.shape)] for s in params.layout]
    header = json.dumps({"layout": layout, "meta": meta or {}}, sort_keys=True)
    with open(Path(path), "wb") as fh:
        np.savez(fh, values=params.values, header=np.array(header))


def load_checkpoint(path):
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        values = data["values"].astype(np.float64, copy=True)
    layout = tuple(Slot(name, off, tuple(shape)) for name, off, shape in header["layout"])
    return ParamVector(values, layout), header["meta"]
