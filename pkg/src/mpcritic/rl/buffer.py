"""Replay storage and Gaussian exploration around a deterministic policy."""

from __future__ import annotations

import numpy as np

from ..components import BoxConstraint
from ..errors import ConfigError, EmptyBufferError


class ReplayBuffer:
    """Fixed-capacity FIFO ring of (s, a, r, s2, done) with uniform sampling."""

    def __init__(self, capacity: int, n: int, m: int, seed=0):
        if capacity < 1:
            raise ConfigError("capacity must be positive")
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, n))
        self.a = np.zeros((capacity, m))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, n))
        self.done = np.zeros(capacity)
        self.size = 0
        self.head = 0
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def __len__(self):
        return self.size

    def push(self, s, a, r, s2, done=False):
        i = self.head
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, float(done)
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def indices(self, k: int) -> np.ndarray:
        if self.size == 0:
            raise EmptyBufferError("cannot sample from an empty buffer")
        return self.rng.integers(0, self.size, k)

    def sample(self, k: int) -> dict:
        """``k`` transitions drawn uniformly with replacement."""
        idx = self.indices(k)
        return {"s": self.s[idx], "a": self.a[idx], "r": self.r[idx],
                "s2": self.s2[idx], "done": self.done[idx]}


class ExplorationPolicy:
    """a = clip(mean(s) + sigma * half_width * eps), eps ~ N(0, I)."""

    def __init__(self, mean, sigma: float, box: BoxConstraint, rng: np.random.Generator):
        if sigma < 0:
            raise ConfigError("sigma must be nonnegative")
        self.mean, self.sigma, self.box, self.rng = mean, sigma, box, rng
        self.scale = sigma * 0.5 * (box.upper - box.lower)

    def __call__(self, s, t=0):
        a = np.asarray(self.mean(s, t), dtype=np.float64)
        if self.sigma > 0:
            a = a + self.scale * self.rng.standard_normal(a.shape)
        return self.box.clip(a)
