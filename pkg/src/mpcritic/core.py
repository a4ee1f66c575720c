"""The MPC-structured Q-function and the losses that train it.

The critic rolls a model forward under a fictitious controller, starting from
``(x0, u0) = (s, a)``, and returns the averaged cost

    (1/N) * (sum_t l(x_t, u_t) + V(x_N) + rho * sum_t |max(h(x_t), 0)|_1)

for t = 0..N-1.  The RL-facing Q-value is its negation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from .components import BoxConstraint
from .diffcore import Loss, ParamVector
from .errors import ConfigError, NumericalError

ROLES = ("l", "V", "f", "mu")


@dataclass
class MpcCriticSpec:
    stage_cost: object
    terminal: object
    dynamics: object
    controller: object
    state_constraint: Optional[BoxConstraint] = None
    rho: float = 10.0
    horizon: int = 1
    gamma: float = 0.99
    discount_in_rollout: bool = False

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise ConfigError("horizon must be at least 1")
        if self.rho <= 0:
            raise ConfigError("penalty weight rho must be positive")
        if not 0 < self.gamma <= 1:
            raise ConfigError("discount must lie in (0, 1]")
        self.horizon = int(self.horizon)

    def components(self) -> dict:
        return {"l": self.stage_cost, "V": self.terminal, "f": self.dynamics, "mu": self.controller}

    def bind(self, roles=ROLES, extra: Mapping[str, object] | None = None) -> ParamVector:
        """Bind the parameters of the chosen roles (plus ``extra``) into one vector."""
        comps = {r: c for r, c in self.components().items() if r in roles}
        comps.update(extra or {})
        return ParamVector.bind(comps)

    def step_weights(self) -> np.ndarray:
        """Weights of x_0..x_N in the averaged sum (last entry weights V)."""
        N = self.horizon
        if self.discount_in_rollout:
            w = self.gamma ** np.arange(N + 1)
        else:
            w = np.ones(N + 1)
        return w / N


@dataclass
class Rollout:
    states: np.ndarray       # (B, N+1, n)
    actions: np.ndarray      # (B, N, m)
    stage_costs: np.ndarray  # (B, N)
    violations: np.ndarray   # (B, N), L1 magnitude of state-box violation
    terminal: np.ndarray     # (B,)

    def sample(self, i: int) -> "Rollout":
        return Rollout(self.states[i], self.actions[i], self.stage_costs[i],
                       self.violations[i], self.terminal[i])


@dataclass
class _Tape:
    xs: list
    us: list
    mu_caches: list = field(default_factory=list)
    l_caches: list = field(default_factory=list)
    f_caches: list = field(default_factory=list)
    v_cache: object = None
    v_mu_cache: object = None


def _rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _forward(spec: MpcCriticSpec, s, a):
    N = spec.horizon
    w = spec.step_weights()
    h = spec.state_constraint
    x, u = s, a
    tape = _Tape(xs=[], us=[])
    B = s.shape[0]
    stage = np.zeros((B, N))
    viol = np.zeros((B, N))
    total = np.zeros(B)
    for t in range(N):
        if t > 0:
            u, c = spec.controller.forward(x)
            tape.mu_caches.append(c)
        tape.xs.append(x)
        tape.us.append(u)
        lc, c = spec.stage_cost.forward(x, u)
        tape.l_caches.append(c)
        stage[:, t] = lc
        total += w[t] * lc
        if h is not None:
            viol[:, t] = h.penalty(x)
            total += w[t] * spec.rho * viol[:, t]
        x, c = spec.dynamics.forward(x, u)
        tape.f_caches.append(c)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite state at rollout step {t + 1}", step=t + 1)
    tape.xs.append(x)
    uN = None
    if spec.terminal.uses_action:
        uN, tape.v_mu_cache = spec.controller.forward(x)
    vN, tape.v_cache = spec.terminal.forward(x, uN)
    total += w[N] * vN
    rollout = Rollout(np.stack(tape.xs, axis=1), np.stack(tape.us, axis=1), stage, viol, vN)
    return total, rollout, tape


def _accumulate(store, role, grads):
    if not grads:
        return
    slot = store.setdefault(role, {})
    for k, g in grads.items():
        slot[k] = slot[k] + g if k in slot else g


def _backward(spec: MpcCriticSpec, tape: _Tape, dcost, roles=ROLES):
    """Reverse pass of the rollout.  Returns (ds, da, {role: {param: grad}})."""
    N = spec.horizon
    w = spec.step_weights()
    h = spec.state_constraint
    grads: dict = {}
    want_mu = "mu" in roles
    dx, du_term, g = spec.terminal.backward(tape.v_cache, w[N] * dcost)
    if "V" in roles:
        _accumulate(grads, "V", g)
    if spec.terminal.uses_action:
        dxm, g = spec.controller.backward(tape.v_mu_cache, du_term)
        dx = dx + dxm
        if want_mu:
            _accumulate(grads, "mu", g)
    du = None
    for t in reversed(range(N)):
        dx_prev, du, g = spec.dynamics.backward(tape.f_caches[t], dx)
        if "f" in roles:
            _accumulate(grads, "f", g)
        lx, lu, g = spec.stage_cost.backward(tape.l_caches[t], w[t] * dcost)
        if "l" in roles:
            _accumulate(grads, "l", g)
        dx = dx_prev + lx
        du = du + lu
        if h is not None:
            dx = dx + (w[t] * spec.rho * dcost)[:, None] * h.penalty_grad(tape.xs[t])
        if t > 0:
            dxm, g = spec.controller.backward(tape.mu_caches[t - 1], du)
            dx = dx + dxm
            if want_mu:
                _accumulate(grads, "mu", g)
    return dx, du, grads


def q_cost(spec: MpcCriticSpec, s, a):
    """Averaged rollout cost and the rollout itself.

    Accepts one sample (1-D ``s``, ``a``) or a batch (2-D).
    """
    single = np.ndim(s) == 1
    total, rollout, _ = _forward(spec, _rows(s), _rows(a))
    if single:
        return float(total[0]), rollout.sample(0)
    return total, rollout


def q_reward(spec: MpcCriticSpec, s, a):
    """Reward-convention Q-value, the negation of :func:`q_cost`."""
    c, _ = q_cost(spec, s, a)
    return -c


def q_cost_and_grad(spec: MpcCriticSpec, s, a, dcost=None, roles=ROLES):
    """Batched cost plus gradients of ``sum(dcost * cost)`` w.r.t. s, a and parameters."""
    s, a = _rows(s), _rows(a)
    total, _, tape = _forward(spec, s, a)
    if dcost is None:
        dcost = np.ones_like(total)
    ds, da, grads = _backward(spec, tape, dcost, roles)
    return total, ds, da, grads


def td_target(critic, reward, next_state, done, policy, gamma):
    """q = r + gamma * (1 - done) * Q(s', policy(s')); no gradient flows through it.

    ``critic`` is an :class:`MpcCriticSpec` (evaluated through :func:`q_reward`)
    or any callable returning reward-convention Q-values for batched (s, a).
    ``policy`` is a controller component or a callable on batched states.
    """
    if not 0 <= gamma <= 1:
        raise ConfigError("discount must lie in [0, 1]")
    reward = np.asarray(reward, dtype=np.float64)
    done = np.asarray(done, dtype=np.float64)
    if gamma == 0:
        return reward.copy()
    s2 = _rows(next_state)
    a2 = policy(s2) if callable(policy) else policy.forward(s2)[0]
    if isinstance(critic, MpcCriticSpec):
        q2 = -_forward(critic, s2, a2)[0]
    else:
        q2 = np.asarray(critic(s2, a2), dtype=np.float64)
    return reward + gamma * (1.0 - done) * q2


def critic_loss(spec: MpcCriticSpec, s, a, targets) -> float:
    q = -_forward(spec, _rows(s), _rows(a))[0]
    return float(np.mean((q - np.asarray(targets)) ** 2))


def actor_loss(spec: MpcCriticSpec, s, controller=None) -> float:
    mu = spec.controller if controller is None else controller
    s = _rows(s)
    return float(np.mean(_forward(spec, s, mu.forward(s)[0])[0]))


def model_loss(f, s, a, s_next) -> float:
    y = f.forward(_rows(s), _rows(a))[0]
    return float(np.mean(np.sum((y - _rows(s_next)) ** 2, axis=1)))


# ---------------------------------------------------------------------------
# Loss objects for value_and_grad


class _SpecLoss(Loss):
    """Shared plumbing: maps critic roles onto component ids of a bound vector."""

    def __init__(self, spec: MpcCriticSpec, params: ParamVector, wrt, ids: Mapping[str, str] | None = None):
        self.spec = spec
        self.params = params
        self.ids = {r: r for r in ROLES}
        self.ids.update(ids or {})
        present = set(params.components)
        self.wrt = tuple(w for w in wrt if self.ids[w] in present)

    @property
    def trainable(self):
        return tuple(self.ids[w] for w in self.wrt)

    def _slots(self, grads):
        out = {}
        for role in self.wrt:
            for pname, g in grads.get(role, {}).items():
                out[f"{self.ids[role]}.{pname}"] = g
        return out


class CriticLoss(_SpecLoss):
    """mean((Q(s, a) - q)^2) with Q = -q_cost; batch keys ``s``, ``a``, ``q``."""

    def __init__(self, spec, params, wrt=("l", "V"), ids=None):
        super().__init__(spec, params, wrt, ids)

    def evaluate(self, batch):
        s, a, q = _rows(batch["s"]), _rows(batch["a"]), np.asarray(batch["q"])
        cost, _, tape = _forward(self.spec, s, a)
        resid = -cost - q
        B = len(q)
        _, _, grads = _backward(self.spec, tape, -2.0 * resid / B, self.wrt)
        return float(np.mean(resid ** 2)), self._slots(grads)


class ActorLoss(_SpecLoss):
    """mean(q_cost(s, mu(s))); batch key ``s``.  Gradients reach only mu."""

    def __init__(self, spec, params, wrt=("mu",), ids=None):
        super().__init__(spec, params, wrt, ids)

    def evaluate(self, batch):
        s = _rows(batch["s"])
        mu = self.spec.controller
        a, mu_cache = mu.forward(s)
        cost, _, tape = _forward(self.spec, s, a)
        B = len(cost)
        roles = tuple(self.wrt)
        _, da, grads = _backward(self.spec, tape, np.full(B, 1.0 / B), roles)
        if "mu" in roles:
            _, g = mu.backward(mu_cache, da)
            _accumulate(grads, "mu", g)
        return float(np.mean(cost)), self._slots(grads)


class ModelLoss(Loss):
    """mean ||f(s, a) - s'||^2; batch keys ``s``, ``a``, ``s2``."""

    def __init__(self, dynamics, params: ParamVector, component_id="f"):
        self.dynamics = dynamics
        self.params = params
        self.cid = component_id

    @property
    def trainable(self):
        return (self.cid,)

    def evaluate(self, batch):
        s, a, s2 = _rows(batch["s"]), _rows(batch["a"]), _rows(batch["s2"])
        y, cache = self.dynamics.forward(s, a)
        err = y - s2
        B = len(err)
        _, _, g = self.dynamics.backward(cache, 2.0 * err / B)
        return float(np.mean(np.sum(err ** 2, axis=1))), {f"{self.cid}.{k}": v for k, v in g.items()}


def with_terminal(spec: MpcCriticSpec, terminal) -> MpcCriticSpec:
    return replace(spec, terminal=terminal)

