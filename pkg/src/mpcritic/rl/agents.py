"""Learning agents: the MPCritic online LQR agent, a TD3 baseline and the
nonlinear arms (vanilla, guided, constrained).

Every agent exposes ``act(s, t)`` for the environment loop, ``update(batch,
step)`` for one update block and ``reset_episode()``.
"""

from __future__ import annotations

import copy

import numpy as np

from ..components import (BoxConstraint, CriticTerminal, GaussianStageCost, LinearDynamics,
                          LinearGainController, MlpController, MlpDynamics, MlpQ,
                          QuadraticStageCost, QuadraticTerminal)
from ..core import ActorLoss, CriticLoss, ModelLoss, MpcCriticSpec, q_cost, td_target
from ..diffcore import Loss, ParamVector, make_optimizer, polyak_update, value_and_grad
from ..errors import ConfigError
from ..lqr import LqrProblem, closed_loop_rmse, solve_discounted
from ..mpc import QpMpcProblem, solve_mpc
from .config import TrainConfig


class TwinQLoss(Loss):
    """sum over critics of mean((Q_i(s, a) - q)^2); batch keys ``s``, ``a``, ``q``."""

    def __init__(self, critics, params: ParamVector, ids):
        if len(critics) != len(ids):
            raise ConfigError("one id per critic")
        self.critics, self.params, self.ids = list(critics), params, tuple(ids)

    @property
    def trainable(self):
        return self.ids

    def evaluate(self, batch):
        s, a, q = batch["s"], batch["a"], np.asarray(batch["q"])
        B = len(q)
        total, out = 0.0, {}
        for net, cid in zip(self.critics, self.ids):
            y, cache = net.forward(s, a)
            resid = y - q
            total += float(np.mean(resid ** 2))
            _, _, g = net.backward(cache, 2.0 * resid / B)
            out.update({f"{cid}.{k}": v for k, v in g.items()})
        return total, out


class PolicyLoss(Loss):
    """-mean Q(s, pi(s)); gradients reach only the policy."""

    def __init__(self, actor, critic, params: ParamVector, actor_id="pi"):
        self.actor, self.critic, self.params, self.aid = actor, critic, params, actor_id

    @property
    def trainable(self):
        return (self.aid,)

    def evaluate(self, batch):
        s = batch["s"]
        a, ac = self.actor.forward(s)
        y, qc = self.critic.forward(s, a)
        B = len(y)
        _, da, _ = self.critic.backward(qc, np.full(B, -1.0 / B))
        _, g = self.actor.backward(ac, da)
        return float(-np.mean(y)), {f"{self.aid}.{k}": v for k, v in g.items()}


def _smoothed(actor, box: BoxConstraint, sigma, clip, rng):
    """Target policy with clipped Gaussian smoothing noise."""
    half = 0.5 * (box.upper - box.lower)

    def policy(S):
        A = actor.forward(S)[0]
        if sigma > 0:
            eps = np.clip(sigma * rng.standard_normal(A.shape), -clip, clip)
            A = A + half * eps
        return box.clip(A)

    return policy


def _psd(X, floor=0.0):
    X = 0.5 * (X + X.T)
    w, U = np.linalg.eigh(X)
    return (U * np.maximum(w, floor)) @ U.T


class _Agent:
    def __init__(self, cfg: TrainConfig, box: BoxConstraint, rng: np.random.Generator):
        self.cfg, self.box, self.rng = cfg, box, rng

    def _schedule(self, frac):
        if self.cfg.lr_schedule == "constant":
            return
        scale = 1.0 - (1.0 - self.cfg.lr_final_frac) * min(max(frac, 0.0), 1.0)
        for opt, rate in self._base_rates:
            opt.rate = rate * scale

    def reset_episode(self):
        pass

    def rmse(self):
        return None


class Td3Agent(_Agent):
    """DNN actor (tanh-bounded) with twin Q critics and the usual TD3 stabilizers."""

    def __init__(self, n, m, box: BoxConstraint, cfg: TrainConfig, rng: np.random.Generator):
        super().__init__(cfg, box, rng)
        self.actor = MlpController(n, m, cfg.hidden, box.lower, box.upper, rng)
        self.q1 = MlpQ(n, m, cfg.critic_hidden, rng)
        self.q2 = MlpQ(n, m, cfg.critic_hidden, rng)
        comps = {"pi": self.actor, "q1": self.q1, "q2": self.q2}
        self.params = ParamVector.bind(comps)
        tgt = copy.deepcopy(comps)
        self.t_actor, self.t_q1, self.t_q2 = tgt["pi"], tgt["q1"], tgt["q2"]
        self.target_params = ParamVector.bind(tgt)
        self.critic_loss = TwinQLoss([self.q1, self.q2], self.params, ("q1", "q2"))
        self.policy_loss = PolicyLoss(self.actor, self.q1, self.params)
        self.opt_q = make_optimizer(cfg.optimizer, self.params, cfg.lr_critic, ("q1", "q2"))
        self.opt_pi = make_optimizer(cfg.optimizer, self.params, cfg.lr_actor, ("pi",))
        self._base_rates = [(self.opt_q, cfg.lr_critic), (self.opt_pi, cfg.lr_actor)]
        self._target_policy = _smoothed(self.t_actor, box, cfg.target_noise, cfg.target_noise_clip, rng)

    def act(self, s, t=0):
        return self.actor.forward(np.asarray(s)[None, :])[0][0]

    def _target_q(self, S, A):
        return np.minimum(self.t_q1.forward(S, A)[0], self.t_q2.forward(S, A)[0])

    def update(self, batch, step):
        cfg = self.cfg
        q = td_target(self._target_q, batch["r"], batch["s2"], batch["done"],
                      self._target_policy, cfg.gamma)
        lc, g = value_and_grad(self.critic_loss, self.params, {"s": batch["s"], "a": batch["a"], "q": q})
        self.opt_q.step(g)
        la = None
        if step % cfg.policy_delay == 0:
            la, g = value_and_grad(self.policy_loss, self.params, batch)
            self.opt_pi.step(g)
            polyak_update(self.target_params, self.params, cfg.tau)
        return lc, la, None


class MpcCriticAgent(_Agent):
    """Linear model, linear fictitious controller, quadratic terminal(s); acts by online MPC.

    With ``cfg.twin`` two terminal matrices share the model and controller and
    the TD target takes the smaller Q.  Actions come from the constrained QP
    built from the current (A, B, M, R, P).
    """

    def __init__(self, env, cfg: TrainConfig, rng: np.random.Generator):
        super().__init__(cfg, env.action_box, rng)
        n, m = env.n, env.m
        self.env = env
        f = LinearDynamics.random(n, m, rng)
        mu = LinearGainController.random(n, m, rng)
        V1 = QuadraticTerminal.random(n, rng, cfg.terminal_form)
        ell = QuadraticStageCost(env.M, env.R)
        comps = {"l": ell, "V1": V1, "f": f, "mu": mu}
        if cfg.twin:
            comps["V2"] = QuadraticTerminal.random(n, rng, cfg.terminal_form)
        self.comps = comps
        self.params = ParamVector.bind(comps)
        tgt = copy.deepcopy(comps)
        self.target_params = ParamVector.bind(tgt)
        self.specs = [self._spec(comps, "V1")]
        self.target_specs = [self._spec(tgt, "V1")]
        if cfg.twin:
            self.specs.append(self._spec(comps, "V2"))
            self.target_specs.append(self._spec(tgt, "V2"))
        wrt = ("l", "V") if cfg.learn_stage_cost else ("V",)
        self.critic_losses = [CriticLoss(self.specs[0], self.params, wrt, {"V": "V1"})]
        opt = cfg.optimizer
        self.opt_critic = [make_optimizer(opt, self.params, cfg.lr_critic, ("V1",))]
        if cfg.twin:
            self.critic_losses.append(CriticLoss(self.specs[1], self.params, ("V",), {"V": "V2"}))
            self.opt_critic.append(make_optimizer(opt, self.params, cfg.lr_critic, ("V2",)))
        self.opt_stage = (make_optimizer(opt, self.params, cfg.lr_stage, ("l",))
                          if cfg.learn_stage_cost else None)
        self.actor_loss = ActorLoss(self.specs[0], self.params, ids={"V": "V1"})
        self.model_loss = ModelLoss(f, self.params, "f")
        self.opt_mu = make_optimizer(opt, self.params, cfg.lr_actor, ("mu",))
        self.opt_f = make_optimizer(opt, self.params, cfg.lr_model, ("f",))
        self._base_rates = [(o, o.rate) for o in (*self.opt_critic, self.opt_mu, self.opt_f)]
        self._target_policy = _smoothed(tgt["mu"], env.action_box, cfg.target_noise,
                                        cfg.target_noise_clip, rng)
        truth = solve_discounted(LqrProblem(env.A, env.B, env.M, env.R), cfg.gamma)
        self._truth_K = truth.K
        self._warm = None
        self.solver_failures = 0

    def _spec(self, comps, vid):
        cfg = self.cfg
        return MpcCriticSpec(comps["l"], comps[vid], comps["f"], comps["mu"], None,
                             cfg.rho, cfg.horizon, cfg.gamma)

    @property
    def dynamics(self):
        return self.comps["f"]

    def problem(self) -> QpMpcProblem:
        """The online QP assembled from the current learned components."""
        cfg, f, ell = self.cfg, self.comps["f"], self.comps["l"]
        P = _psd(self.comps["V1"].P)
        return QpMpcProblem(f.A, f.B, _psd(ell.M), _psd(ell.R, 1e-6), P, cfg.mpc_horizon,
                            self.env.action_box, self.env.state_box, cfg.qp_rho)

    def reset_episode(self):
        self._warm = None

    def act(self, s, t=0):
        warm = None if self._warm is None else np.vstack([self._warm[1:], self._warm[-1:]])
        res = solve_mpc(self.problem().with_state(s), self.cfg.qp_tol, self.cfg.qp_max_iter, warm)
        if not res.converged:
            self.solver_failures += 1
        self._warm = res.actions
        return res.first_action

    def _target_q(self, S, A):
        qs = [-q_cost(spec, S, A)[0] for spec in self.target_specs]
        return np.minimum.reduce(qs)

    def update(self, batch, step):
        cfg = self.cfg
        q = td_target(self._target_q, batch["r"], batch["s2"], batch["done"],
                      self._target_policy, cfg.gamma)
        cb = {"s": batch["s"], "a": batch["a"], "q": q}
        lc = 0.0
        for i, (loss, opt) in enumerate(zip(self.critic_losses, self.opt_critic)):
            val, g = value_and_grad(loss, self.params, cb)
            opt.step(g)
            if i == 0 and self.opt_stage is not None:
                self.opt_stage.step(g)
            lc += val
        lm, g = value_and_grad(self.model_loss, self.params, batch)
        self.opt_f.step(g)
        la = None
        if step % cfg.policy_delay == 0:
            la, g = value_and_grad(self.actor_loss, self.params, batch)
            self.opt_mu.step(g)
            polyak_update(self.target_params, self.params, cfg.tau)
        return lc, la, lm

    def rmse(self):
        f, mu = self.comps["f"], self.comps["mu"]
        return closed_loop_rmse(f.A, f.B, mu.K, self.env.A, self.env.B, self._truth_K)


class NonlinearAgent(_Agent):
    """Neural actor, twin neural critics and a learned neural model.

    ``arm="vanilla"`` trains the actor by maximizing Q(s, mu(s)).  The guided
    arms instead minimize the MPCritic rollout cost built from the fixed
    Gaussian stage cost, the learned model and V(x_N) = -Q(x_N, mu(x_N));
    ``arm="constrained"`` adds the state-box penalty to that rollout.
    """

    def __init__(self, env, cfg: TrainConfig, rng: np.random.Generator, arm="guided"):
        if arm not in ("vanilla", "guided", "constrained"):
            raise ConfigError(f"unknown arm {arm!r}")
        box = env.action_box
        super().__init__(cfg, box, rng)
        n, m = env.n, env.m
        self.arm = arm
        self.actor = MlpController(n, m, cfg.hidden, box.lower, box.upper, rng)
        self.q1 = MlpQ(n, m, cfg.critic_hidden, rng)
        self.q2 = MlpQ(n, m, cfg.critic_hidden, rng)
        self.f = MlpDynamics(n, m, cfg.model_hidden, rng)
        comps = {"pi": self.actor, "q1": self.q1, "q2": self.q2, "f": self.f}
        self.params = ParamVector.bind(comps)
        tgt = copy.deepcopy(comps)  # the target model copy is carried along but unused
        self.t_actor, self.t_q1, self.t_q2 = tgt["pi"], tgt["q1"], tgt["q2"]
        self.target_params = ParamVector.bind(tgt)
        self.critic_loss = TwinQLoss([self.q1, self.q2], self.params, ("q1", "q2"))
        self.model_loss = ModelLoss(self.f, self.params, "f")
        if arm == "vanilla":
            self.spec = None
            self.actor_loss = PolicyLoss(self.actor, self.q1, self.params)
        else:
            ell = GaussianStageCost(env.goal, cfg.guided_stage_var, env.reward_index)
            h = env.state_box if arm == "constrained" else None
            self.spec = MpcCriticSpec(ell, CriticTerminal(self.q1), self.f, self.actor, h,
                                      cfg.rho, cfg.horizon, cfg.gamma)
            self.actor_loss = ActorLoss(self.spec, self.params,
                                        ids={"mu": "pi", "V": "q1", "f": "f", "l": "l"})
        opt = cfg.optimizer
        self.opt_q = make_optimizer(opt, self.params, cfg.lr_critic, ("q1", "q2"))
        self.opt_pi = make_optimizer(opt, self.params, cfg.lr_actor, ("pi",))
        self.opt_f = make_optimizer(opt, self.params, cfg.lr_model, ("f",))
        self._base_rates = [(self.opt_q, cfg.lr_critic), (self.opt_pi, cfg.lr_actor),
                            (self.opt_f, cfg.lr_model)]
        self._target_policy = _smoothed(self.t_actor, box, cfg.target_noise, cfg.target_noise_clip, rng)

    def act(self, s, t=0):
        return self.actor.forward(np.asarray(s)[None, :])[0][0]

    def _target_q(self, S, A):
        return np.minimum(self.t_q1.forward(S, A)[0], self.t_q2.forward(S, A)[0])

    def update(self, batch, step):
        cfg = self.cfg
        q = td_target(self._target_q, batch["r"], batch["s2"], batch["done"],
                      self._target_policy, cfg.gamma)
        lc, g = value_and_grad(self.critic_loss, self.params, {"s": batch["s"], "a": batch["a"], "q": q})
        self.opt_q.step(g)
        lm, g = value_and_grad(self.model_loss, self.params, batch)
        self.opt_f.step(g)
        la = None
        if step % cfg.policy_delay == 0:
            la, g = value_and_grad(self.actor_loss, self.params, batch)
            self.opt_pi.step(g)
            polyak_update(self.target_params, self.params, cfg.tau)
        return lc, la, lm
