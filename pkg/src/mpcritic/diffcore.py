"""Flat parameter vectors, the value-and-gradient contract, and first-order steps.

Every trainable component keeps its arrays as views into one flat float64
buffer (:class:`ParamVector`).  Losses report gradients per slot; the helpers
here assemble those into a :class:`GradVector` with the same layout, so
optimizers, Polyak averaging and checkpoints all operate on plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ConfigError, NumericalError

DESCENT = "descent"
ASCENT = "ascent"


@dataclass(frozen=True)
class Slot:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=int))

    @property
    def component(self) -> str:
        return self.name.split(".", 1)[0]

    @property
    def span(self) -> slice:
        return slice(self.offset, self.offset + self.size)


def _make_layout(shapes: Iterable[tuple[str, tuple]]) -> tuple[Slot, ...]:
    layout, offset, seen = [], 0, set()
    for name, shape in shapes:
        if name in seen:
            raise ConfigError(f"duplicate parameter slot {name!r}")
        seen.add(name)
        slot = Slot(name, offset, tuple(int(d) for d in shape))
        layout.append(slot)
        offset += slot.size
    return tuple(layout)


class ParamVector:
    """Flat float64 array plus an ordered, contiguous slot layout."""

    def __init__(self, values: np.ndarray, layout: tuple[Slot, ...]):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise ConfigError("parameter values must be a flat array")
        end = layout[-1].offset + layout[-1].size if layout else 0
        if end != values.size:
            raise ConfigError(f"layout covers {end} entries, values hold {values.size}")
        self.values = values
        self.layout = layout
        self._index = {s.name: s for s in layout}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        layout = _make_layout((k, v.shape) for k, v in arrays.items())
        if arrays:
            values = np.concatenate([v.ravel() for v in arrays.values()])
        else:
            values = np.zeros(0)
        return cls(values, layout)

    @classmethod
    def bind(cls, components: Mapping[str, object]) -> "ParamVector":
        """Pack ``component.params`` into one buffer and rebind them as views.

        After binding, writing to ``vector.values`` changes the components
        and vice versa.
        """
        arrays = {}
        for cid, comp in components.items():
            for pname, arr in comp.params.items():
                arrays[f"{cid}.{pname}"] = arr
        vec = cls.from_arrays(arrays)
        for cid, comp in components.items():
            for pname in list(comp.params):
                comp.params[pname] = vec.view(f"{cid}.{pname}")
        return vec

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        names = ", ".join(s.name for s in self.layout)
        return f"{type(self).__name__}(size={len(self)}, slots=[{names}])"

    @property
    def components(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(s.component for s in self.layout))

    def slot(self, name: str) -> Slot:
        try:
            return self._index[name]
        except KeyError:
            raise ConfigError(f"no parameter slot {name!r}") from None

    def view(self, name: str) -> np.ndarray:
        slot = self.slot(name)
        return self.values[slot.span].reshape(slot.shape)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.view(name)

    def mask(self, components: Iterable[str]) -> np.ndarray:
        """Boolean mask selecting every slot owned by ``components``."""
        wanted = set(components)
        unknown = wanted - set(self.components)
        if unknown:
            raise ConfigError(f"unknown components {sorted(unknown)}")
        out = np.zeros(len(self), dtype=bool)
        for s in self.layout:
            if s.component in wanted:
                out[s.span] = True
        return out

    def copy(self) -> "ParamVector":
        return type(self)(self.values.copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return type(self)(np.zeros_like(self.values), self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def load(self, other: "ParamVector") -> None:
        """Copy ``other``'s values into this buffer in place."""
        if not self.same_layout(other):
            raise ConfigError("parameter layouts differ")
        np.copyto(self.values, other.values)


class GradVector(ParamVector):
    """Gradient with the layout of the :class:`ParamVector` it differentiates."""

    @classmethod
    def from_slots(cls, layout: tuple[Slot, ...], grads: Mapping[str, np.ndarray]) -> "GradVector":
        size = layout[-1].offset + layout[-1].size if layout else 0
        g = cls(np.zeros(size), layout)
        for name, arr in grads.items():
            slot = g.slot(name)
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != slot.shape:
                raise ConfigError(f"gradient for {name!r} has shape {arr.shape}, expected {slot.shape}")
            g.values[slot.span] += arr.ravel()
        return g


class Loss:
    """A scalar objective of the parameters bound in ``self.params``.

    Subclasses implement :meth:`evaluate`, returning the loss value and a
    mapping from slot name to gradient array.  Slots missing from the mapping
    receive exact zeros.  ``trainable`` names the components the loss
    differentiates; every other slot of its gradient is exactly zero.
    """

    params: ParamVector

    @property
    def trainable(self) -> tuple[str, ...]:
        return self.params.components

    def evaluate(self, batch) -> tuple[float, Mapping[str, np.ndarray]]:
        raise NotImplementedError


def _batch_size(batch) -> int:
    if batch is None:
        return 0
    if isinstance(batch, Mapping):
        first = next(iter(batch.values()), None)
        return 0 if first is None else len(first)
    return len(batch)


def value_and_grad(loss: Loss, params: ParamVector, batch) -> tuple[float, GradVector]:
    """Evaluate ``loss`` at ``params`` on ``batch``; return value and exact gradient."""
    if _batch_size(batch) == 0:
        raise ConfigError("batch must be non-empty")
    bound = loss.params
    if params is not bound:
        if not bound.same_layout(params):
            raise ConfigError("parameter layout does not match the loss's registered components")
        bound.load(params)
    value, grads = loss.evaluate(batch)
    grad = GradVector.from_slots(bound.layout, grads)
    for slot in bound.layout:
        if not np.all(np.isfinite(grad.values[slot.span])):
            raise NumericalError(f"non-finite gradient in {slot.name}", component=slot.component)
    if not np.isfinite(value):
        raise NumericalError("non-finite loss value")
    return float(value), grad


def sgd_step(params: ParamVector, grad: GradVector, rate: float, direction: str = DESCENT) -> ParamVector:
    if rate <= 0:
        raise ConfigError("rate must be positive")
    if not params.same_layout(grad):
        raise ConfigError("gradient layout does not match parameters")
    if direction == DESCENT:
        return type(params)(params.values - rate * grad.values, params.layout)
    if direction == ASCENT:
        return type(params)(params.values + rate * grad.values, params.layout)
    raise ConfigError(f"unknown direction {direction!r}")


class Sgd:
    """In-place gradient step restricted to a subset of components.

    A zero rate is allowed and freezes the components.
    """

    def __init__(self, params: ParamVector, rate: float, components=None, direction=DESCENT):
        if rate < 0:
            raise ConfigError("rate must be nonnegative")
        self.params = params
        self.rate = rate
        self.sign = -1.0 if direction == DESCENT else 1.0
        comps = params.components if components is None else components
        self.index = np.flatnonzero(params.mask(comps))

    def step(self, grad: GradVector) -> None:
        idx = self.index
        self.params.values[idx] += self.sign * self.rate * grad.values[idx]


class Adam(Sgd):
    """Adam with the usual defaults, acting in place on selected components."""

    def __init__(self, params, rate, components=None, direction=DESCENT,
                 betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, rate, components, direction)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(self.index.size)
        self.v = np.zeros(self.index.size)
        self.t = 0

    def step(self, grad: GradVector) -> None:
        g = grad.values[self.index]
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        self.params.values[self.index] += self.sign * self.rate * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, params: ParamVector, rate: float, components=None, **kw):
    if kind == "sgd":
        return Sgd(params, rate, components)
    if kind == "adam":
        return Adam(params, rate, components, **kw)
    raise ConfigError(f"unknown optimizer {kind!r}")


def polyak_update(target: ParamVector, online: ParamVector, rate: float) -> None:
    """target <- (1 - rate) * target + rate * online, in place."""
    if not target.same_layout(online):
        raise ConfigError("target and online layouts differ")
    target.values *= 1.0 - rate
    target.values += rate * online.values


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor * (1 + max|n|))."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = floor * (1.0 + np.max(np.abs(numeric), initial=0.0))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)
    return np.abs(analytic - numeric) / denom


def gradient_check(loss: Loss, params: ParamVector, batch, step: float = 1e-5) -> float:
    """Largest elementwise relative error between analytic and central-difference gradients."""
    params = params.copy()
    _, grad = value_and_grad(loss, params, batch)

    def fn(v):
        return value_and_grad(loss, ParamVector(v, params.layout), batch)[0]

    mask = params.mask(loss.trainable)
    numeric = np.zeros_like(params.values)
    base = params.values.copy()
    idx = np.flatnonzero(mask)
    numeric[idx] = central_difference(
        lambda sub: fn(_scatter(base, idx, sub)), base[idx], step)
    loss.params.load(params)
    return float(np.max(relative_error(grad.values[idx], numeric[idx]), initial=0.0))


def _scatter(base, idx, sub):
    out = base.copy()
    out[idx] = sub
    return out
