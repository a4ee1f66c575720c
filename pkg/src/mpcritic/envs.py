"""Benchmark environments, policy rollouts and offline datasets.

Environments are value-like: ``step(s, a, t)`` is a pure function of its
arguments (plus an optional noise generator) and returns ``(s', r, done)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .components import BoxConstraint
from .errors import ConfigError
from .lqr import laplacian_system

log = logging.getLogger(__name__)


def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


class Env:
    """Common episode plumbing; subclasses define ``transition`` and ``reward``."""

    n: int
    m: int
    horizon: int
    state_box: BoxConstraint
    action_box: BoxConstraint

    def transition(self, s, a, noise_rng=None):
        raise NotImplementedError

    def reward(self, s, a):
        raise NotImplementedError

    def reset(self, rng):
        raise NotImplementedError

    def step(self, s, a, t=0, noise_rng=None):
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        if not np.all(self.action_box.contains(a)):
            log.debug("action %s outside the box, clipping", a)
            a = self.action_box.clip(a)
        s2 = self.transition(s, a, noise_rng)
        return s2, float(self.reward(s, a)), t + 1 >= self.horizon

    def is_violation(self, s) -> bool:
        return not bool(self.state_box.contains(s))


class LqrEnv(Env):
    """Unstable Laplacian system x' = A x + B u with quadratic reward -(x'Mx + u'Ru)."""

    def __init__(self, n=4, m=None, M=None, R=None, horizon=50, diag=1.01, off=0.01,
                 noise_std=0.0):
        m = n if m is None else m
        A, B = laplacian_system(n, diag, off)
        if m != n:
            B = np.eye(n, m)
        self.n, self.m = n, m
        self.A, self.B = A, B
        self.M = 1e-3 * np.eye(n) if M is None else np.asarray(M, dtype=np.float64)
        self.R = np.eye(m) if R is None else np.asarray(R, dtype=np.float64)
        self.horizon = horizon
        self.noise_std = noise_std
        self.state_box = BoxConstraint.symmetric(n)
        self.action_box = BoxConstraint.symmetric(m)

    def transition(self, s, a, noise_rng=None):
        s2 = self.A @ s + self.B @ a
        if self.noise_std > 0 and noise_rng is not None:
            s2 = s2 + self.noise_std * noise_rng.standard_normal(self.n)
        return s2

    def transition_batch(self, S, U):
        return S @ self.A.T + U @ self.B.T

    def reward(self, s, a):
        return -(s @ self.M @ s + a @ self.R @ a)

    def reward_batch(self, S, U):
        return -(np.einsum("bi,ij,bj->b", S, self.M, S) + np.einsum("bi,ij,bj->b", U, self.R, U))

    def reset(self, rng):
        return rng.uniform(-1.0, 1.0, self.n)


class NonlinearEnv(Env):
    """Interface for nonlinear benchmarks with the Gaussian setpoint reward."""

    goal: float
    reward_var: float
    reward_index: int

    def reward(self, s, a):
        d = self.goal - s[self.reward_index]
        return np.exp(-d * d / (2.0 * self.reward_var))


class ReactorEnv(NonlinearEnv):
    """Isothermal series reaction A -> B -> C with a 2A -> D side reaction.

    State (c_A, c_B) in normalised units, one input mapped from [-1, 1] to a
    feed (dilution) rate in [0, max_feed].  Integrated with RK4.  The reward
    peaks when c_B reaches ``goal``.  With the defaults the goal is reachable on
    two feed branches; the faster high-feed branch pushes c_A above the
    state-box bound of 1, the slow low-feed branch stays inside.
    """

    def __init__(self, goal=0.6, reward_var=0.0025, horizon=50, dt=0.1,
                 k1=1.0, k2=0.2, k3=0.3, feed_conc=2.0, max_feed=3.0,
                 state_upper=(1.0, 1.0), init_low=(0.0, 0.0), init_high=(0.2, 0.2),
                 noise_std=0.0):
        self.n, self.m = 2, 1
        self.goal, self.reward_var, self.reward_index = goal, reward_var, 1
        self.horizon = horizon
        self.dt = dt
        self.k1, self.k2, self.k3 = k1, k2, k3
        self.feed_conc, self.max_feed = feed_conc, max_feed
        self.state_box = BoxConstraint([-1.0, -1.0], state_upper)
        self.action_box = BoxConstraint.symmetric(1)
        self.init_low, self.init_high = np.asarray(init_low), np.asarray(init_high)
        self.noise_std = noise_std

    def feed(self, a):
        return 0.5 * (np.asarray(a)[..., 0] + 1.0) * self.max_feed

    def _rates(self, x, q):
        cA, cB = x[..., 0], x[..., 1]
        dA = q * (self.feed_conc - cA) - self.k1 * cA - self.k3 * cA * cA
        dB = -q * cB + self.k1 * cA - self.k2 * cB
        return np.stack([dA, dB], axis=-1)

    def transition(self, s, a, noise_rng=None):
        q = self.feed(a)
        h = self.dt
        k1 = self._rates(s, q)
        k2 = self._rates(s + 0.5 * h * k1, q)
        k3 = self._rates(s + 0.5 * h * k2, q)
        k4 = self._rates(s + h * k3, q)
        s2 = s + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if self.noise_std > 0 and noise_rng is not None:
            s2 = s2 + self.noise_std * noise_rng.standard_normal(s2.shape)
        return s2

    def reset(self, rng):
        return rng.uniform(self.init_low, self.init_high)

    def steady_state(self, a):
        """Equilibrium (c_A, c_B) for a constant input."""
        q = float(self.feed(np.atleast_1d(a)))
        # k3 cA^2 + (q + k1) cA - q cAf = 0
        b, c = q + self.k1, -q * self.feed_conc
        cA = (-b + np.sqrt(b * b - 4 * self.k3 * c)) / (2 * self.k3)
        return np.array([cA, self.k1 * cA / (q + self.k2)])


class ZeroEnv(Env):
    """x' = 0 with zero reward; a degenerate fixture for harness checks."""

    def __init__(self, n=2, m=2, horizon=50):
        self.n, self.m, self.horizon = n, m, horizon
        self.state_box = BoxConstraint.symmetric(n)
        self.action_box = BoxConstraint.symmetric(m)

    def transition(self, s, a, noise_rng=None):
        return np.zeros(self.n)

    def reward(self, s, a):
        return 0.0

    def reset(self, rng):
        return np.zeros(self.n)


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    done: bool


@dataclass
class RolloutStats:
    returns: np.ndarray
    violations: np.ndarray
    trajectories: list = field(default_factory=list)  # rows (episode, t, s, a, r, violation)

    def write_csv(self, path, seed=0):
        write_trajectory_csv(path, [(seed, self.trajectories)])


TRAJECTORY_HEADER = ("seed", "episode", "t")


def rollout_policy(env: Env, policy, episodes: int, seed) -> RolloutStats:
    """Run ``policy(s, t)`` for whole episodes.

    A step counts as a violation when the state reached after it leaves the
    state box (strict inequality).
    """
    if episodes < 0:
        raise ConfigError("episodes must be nonnegative")
    rng = _rng(seed)
    returns, violations, rows = [], [], []
    for ep in range(episodes):
        s = env.reset(rng)
        total, count = 0.0, 0
        for t in range(env.horizon):
            a = np.asarray(policy(s, t), dtype=np.float64)
            s2, r, done = env.step(s, a, t)
            v = env.is_violation(s2)
            rows.append((ep, t, s.copy(), a.copy(), r, int(v)))
            total += r
            count += v
            s = s2
            if done:
                break
        returns.append(total)
        violations.append(count)
    return RolloutStats(np.asarray(returns), np.asarray(violations, dtype=int), rows)


def write_trajectory_csv(path, runs, n=None, m=None):
    """Write ``runs``, an iterable of (seed, rows) pairs, as one CSV with a header.

    ``n`` and ``m`` are only needed when there are no rows to infer widths from.
    """
    runs = [(seed, rows) for seed, rows in runs if rows]
    if runs:
        first = runs[0][1][0]
        n, m = len(first[2]), len(first[3])
    elif n is None or m is None:
        raise ConfigError("state and action widths are required for an empty trajectory file")
    header = [*TRAJECTORY_HEADER, *(f"s{i}" for i in range(n)), *(f"a{j}" for j in range(m)),
              "r", "violation"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for seed, rows in runs:
            for ep, t, s, a, r, v in rows:
                w.writerow([seed, ep, t, *(repr(float(x)) for x in s),
                            *(repr(float(x)) for x in a), repr(float(r)), v])


def sample_offline_dataset(env, count: int, seed) -> dict:
    """Uniform states and actions in [-1, 1] with next states from the true model."""
    if count < 1:
        raise ConfigError("count must be at least 1")
    rng = _rng(seed)
    S = rng.uniform(-1.0, 1.0, (count, env.n))
    U = rng.uniform(-1.0, 1.0, (count, env.m))
    if hasattr(env, "transition_batch"):
        S2 = env.transition_batch(S, U)
        r = env.reward_batch(S, U)
    else:
        S2 = np.stack([env.transition(s, u) for s, u in zip(S, U)])
        r = np.array([env.reward(s, u) for s, u in zip(S, U)])
    return {"s": S, "a": U, "r": r, "s2": S2, "done": np.zeros(count)}
