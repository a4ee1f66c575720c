"""Offline recovery of LQR-optimal MPC components from uniform transitions."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from ..components import LinearDynamics, LinearGainController, QuadraticStageCost, QuadraticTerminal
from ..core import ActorLoss, CriticLoss, ModelLoss, MpcCriticSpec, td_target
from ..diffcore import make_optimizer, polyak_update, value_and_grad
from ..envs import LqrEnv, sample_offline_dataset
from ..errors import DivergenceError
from ..lqr import LqrProblem, closed_loop_rmse, param_rmse, solve_discounted
from .config import TrainConfig, offline_defaults

log = logging.getLogger(__name__)


@dataclass
class GroundTruth:
    A: np.ndarray
    B: np.ndarray
    K: np.ndarray
    P: np.ndarray  # terminal matrix the one-step critic converges to

    @classmethod
    def for_env(cls, env: LqrEnv, gamma: float):
        """Discount-consistent optimum: K is optimal for the gamma-discounted cost,
        and the one-step critic's terminal matrix equals gamma * P_gamma."""
        sol = solve_discounted(LqrProblem(env.A, env.B, env.M, env.R), gamma)
        return cls(env.A, env.B, sol.K, gamma * sol.P)


@dataclass
class ValidationRun:
    n: int
    m: int
    seed: int
    steps: np.ndarray
    closed_loop: np.ndarray
    model_rmse: float
    gain_rmse: float
    terminal_rmse: float
    terminal_bias: float
    critic_loss: list = field(default_factory=list)
    actor_loss: list = field(default_factory=list)
    model_loss: list = field(default_factory=list)

    @property
    def final_rmse(self) -> float:
        return float(self.closed_loop[-1])


class OfflineLearner:
    """One MPCritic instance with linear model, linear gain and quadratic terminal.

    ``init`` may be ``"random"`` (entries ~ N(0, 1)) or a :class:`GroundTruth`.
    """

    def __init__(self, env: LqrEnv, cfg: TrainConfig, rng: np.random.Generator, init="random"):
        n, m = env.n, env.m
        if isinstance(init, GroundTruth):
            f = LinearDynamics(init.A.copy(), init.B.copy())
            mu = LinearGainController(init.K.copy())
            V = QuadraticTerminal.from_matrix(init.P, cfg.terminal_form)
        else:
            f = LinearDynamics.random(n, m, rng)
            V = QuadraticTerminal.random(n, rng, cfg.terminal_form)
            mu = LinearGainController.random(n, m, rng)
        ell = QuadraticStageCost(env.M, env.R)
        self.cfg = cfg
        self.spec = MpcCriticSpec(ell, V, f, mu, None, cfg.rho, cfg.horizon, cfg.gamma)
        self.params = self.spec.bind()
        self.target = copy.deepcopy(self.spec)
        self.target_params = self.target.bind()
        self.critic = CriticLoss(self.spec, self.params, wrt=("V",))
        self.actor = ActorLoss(self.spec, self.params)
        self.model = ModelLoss(f, self.params)
        opt = cfg.optimizer
        self.opt_V = make_optimizer(opt, self.params, cfg.lr_critic, ("V",))
        self.opt_mu = make_optimizer(opt, self.params, cfg.lr_actor, ("mu",))
        self.opt_f = make_optimizer(opt, self.params, cfg.lr_model, ("f",))
        self._base_rates = [(o, o.rate) for o in (self.opt_V, self.opt_mu, self.opt_f)]

    def set_progress(self, frac: float):
        """Apply the learning-rate schedule at training fraction ``frac`` in [0, 1]."""
        if self.cfg.lr_schedule == "constant":
            return
        scale = 1.0 - (1.0 - self.cfg.lr_final_frac) * min(max(frac, 0.0), 1.0)
        for opt, rate in self._base_rates:
            opt.rate = rate * scale

    def update(self, batch):
        """Critic, actor and model steps on one minibatch, then target averaging."""
        cfg = self.cfg
        q = td_target(self.target, batch["r"], batch["s2"], batch["done"],
                      self.target.controller, cfg.gamma)
        lc, g = value_and_grad(self.critic, self.params, {"s": batch["s"], "a": batch["a"], "q": q})
        self.opt_V.step(g)
        la, g = value_and_grad(self.actor, self.params, batch)
        self.opt_mu.step(g)
        lm, g = value_and_grad(self.model, self.params, batch)
        self.opt_f.step(g)
        polyak_update(self.target_params, self.params, cfg.tau)
        return lc, la, lm

    @property
    def A(self):
        return self.spec.dynamics.A

    @property
    def B(self):
        return self.spec.dynamics.B

    @property
    def K(self):
        return self.spec.controller.K

    @property
    def P(self):
        return self.spec.terminal.P


def validate_offline(n: int, m: int, seed: int, cfg: TrainConfig | None = None,
                     init="random", env: LqrEnv | None = None) -> ValidationRun:
    """Learn (A, B, P, K) from a fixed uniform dataset; track closed-loop RMSE."""
    cfg = offline_defaults() if cfg is None else cfg
    env = LqrEnv(n, m) if env is None else env
    ss = np.random.SeedSequence(seed)
    data_rng, init_rng, batch_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    data = sample_offline_dataset(env, cfg.dataset_size, data_rng)
    truth = GroundTruth.for_env(env, cfg.gamma)
    if init == "truth":
        init = truth
    learner = OfflineLearner(env, cfg, init_rng, init)

    def rmse():
        return closed_loop_rmse(learner.A, learner.B, learner.K, truth.A, truth.B, truth.K)

    steps, curve = [0], [rmse()]
    losses = ([], [], [])
    size = len(data["s"])
    for step in range(1, cfg.total_steps + 1):
        idx = batch_rng.integers(0, size, cfg.batch_size)
        batch = {k: v[idx] for k, v in data.items()}
        learner.set_progress((step - 1) / cfg.total_steps)
        out = learner.update(batch)
        if step % cfg.record_every == 0 or step == cfg.total_steps:
            err = rmse()
            if not np.isfinite(err) or err > cfg.divergence_rmse:
                raise DivergenceError(f"closed-loop RMSE {err:.3g} at step {step} (n={n}, seed={seed})")
            steps.append(step)
            curve.append(err)
            for store, v in zip(losses, out):
                store.append(v)
    AB = np.hstack([learner.A, learner.B])
    AB_ref = np.hstack([truth.A, truth.B])
    P_err = learner.P - truth.P
    return ValidationRun(
        n=n, m=m, seed=seed,
        steps=np.asarray(steps), closed_loop=np.asarray(curve),
        model_rmse=param_rmse(AB, AB_ref),
        gain_rmse=param_rmse(learner.K, truth.K),
        terminal_rmse=param_rmse(learner.P, truth.P),
        terminal_bias=float(np.mean(P_err)),
        critic_loss=losses[0], actor_loss=losses[1], model_loss=losses[2],
    )


def run_offline_validation(cfg: TrainConfig, sizes, seeds=None, init="random"):
    """Validation runs for every (n, m) in ``sizes`` and every seed."""
    seeds = cfg.seeds if seeds is None else seeds
    out = {}
    for n, m in sizes:
        out[(n, m)] = [validate_offline(n, m, s, cfg, init) for s in seeds]
        finals = [r.final_rmse for r in out[(n, m)]]
        log.info("n=m=%d final closed-loop RMSE mean %.3g", n, float(np.mean(finals)))
    return out
