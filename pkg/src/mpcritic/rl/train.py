"""Environment loops and the experiment recipes built on the agents."""

from __future__ import annotations

import logging
import time
from pathlib import Path

import numpy as np

from ..components import save_checkpoint
from ..envs import LqrEnv, ReactorEnv
from ..errors import DivergenceError
from .agents import MpcCriticAgent, NonlinearAgent, Td3Agent
from .buffer import ExplorationPolicy, ReplayBuffer
from .config import TrainConfig
from .logs import TrainLog

log = logging.getLogger(__name__)


def seed_streams(seed: int):
    """Independent generators for (resets, exploration, replay sampling, agent)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def run_agent(env, agent, cfg: TrainConfig, seed: int, name: str, streams=None,
              checkpoint_dir=None) -> TrainLog:
    """Interact for ``cfg.total_steps`` environment steps with update blocks after warm-up.

    Before ``cfg.learning_starts`` actions are uniform in the action box.
    Episodes end only at the horizon; that truncation is stored as not done so
    targets keep bootstrapping.  With ``cfg.checkpoint_every > 0`` and a
    ``checkpoint_dir`` the online parameters are saved every that many steps.
    """
    reset_rng, explore_rng, buffer_rng, _ = streams or seed_streams(seed)
    buffer = ReplayBuffer(min(cfg.buffer_size, max(cfg.total_steps, 1)), env.n, env.m, buffer_rng)
    explore = ExplorationPolicy(agent.act, cfg.explore_sigma, env.action_box, explore_rng)
    box = env.action_box
    out = TrainLog(name, seed)
    t0 = time.perf_counter()
    s = env.reset(reset_rng)
    t, episode, ret, viols, updates = 0, 0, 0.0, 0, 0
    acc = [[], [], []]
    for step in range(1, cfg.total_steps + 1):
        if step <= cfg.learning_starts:
            a = explore_rng.uniform(box.lower, box.upper)
        else:
            a = explore(s, t)
        s2, r, done = env.step(s, a, t)
        if not np.all(np.isfinite(s2)):
            raise DivergenceError(f"non-finite state at step {step} ({name}, seed {seed})")
        buffer.push(s, a, r, s2, False)
        if step > cfg.learning_starts and len(buffer) >= cfg.batch_size:
            agent._schedule(step / max(cfg.total_steps, 1))
            for _ in range(cfg.update_ratio):
                updates += 1
                for store, v in zip(acc, agent.update(buffer.sample(cfg.batch_size), updates)):
                    if v is not None:
                        store.append(v)
        ret += r
        viols += int(env.is_violation(s2))
        s, t = s2, t + 1
        if checkpoint_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"{name}_seed{seed}_step{step}.npz"
            save_checkpoint(path, agent.params, {"agent": name, "seed": seed, "step": step})
        if done:
            losses = tuple(float(np.mean(x)) if x else None for x in acc)
            out.add(step, episode, ret, viols, losses, agent.rmse())
            episode += 1
            s, t, ret, viols = env.reset(reset_rng), 0, 0.0, 0
            acc = [[], [], []]
            agent.reset_episode()
    out.wall_time = time.perf_counter() - t0
    out.solver_failures = getattr(agent, "solver_failures", 0)
    out.learner = agent
    return out


def _lqr_env(cfg: TrainConfig, env):
    return LqrEnv(4, horizon=cfg.episode_length) if env is None else env


def run_online_mpcritic(cfg: TrainConfig, env=None, seed: int | None = None,
                        checkpoint_dir=None) -> TrainLog:
    """MPC-acting agent on the constrained LQR task; one log per call."""
    env = _lqr_env(cfg, env)
    seed = cfg.seeds[0] if seed is None else seed
    streams = seed_streams(seed)
    agent = MpcCriticAgent(env, cfg, streams[3])
    out = run_agent(env, agent, cfg, seed, "mpcritic", streams, checkpoint_dir)
    if out.solver_failures:
        log.warning("MPC solver missed tolerance %d times (seed %d)", out.solver_failures, seed)
    return out


def run_online_baseline(cfg: TrainConfig, env=None, seed: int | None = None,
                        checkpoint_dir=None) -> TrainLog:
    """TD3 with a ReLU actor and twin one-hidden-layer critics on the same task."""
    env = _lqr_env(cfg, env)
    seed = cfg.seeds[0] if seed is None else seed
    streams = seed_streams(seed)
    agent = Td3Agent(env.n, env.m, env.action_box, cfg, streams[3])
    return run_agent(env, agent, cfg, seed, "dnn", streams, checkpoint_dir)


def run_nonlinear_guided(cfg: TrainConfig, env=None, seed: int | None = None, arms=None,
                         checkpoint_dir=None) -> dict:
    """Run each requested arm on the nonlinear benchmark with the same seed.

    Returns ``{arm: TrainLog}``.
    """
    env = ReactorEnv(horizon=cfg.episode_length) if env is None else env
    seed = cfg.seeds[0] if seed is None else seed
    arms = cfg.arms if arms is None else arms
    logs = {}
    for arm in arms:
        streams = seed_streams(seed)
        agent = NonlinearAgent(env, cfg, streams[3], arm)
        logs[arm] = run_agent(env, agent, cfg, seed, arm, streams, checkpoint_dir)
    return logs


def online_defaults(**kw) -> TrainConfig:
    """Constrained online LQR: MPC horizon 10, one-step critic, factored terminal."""
    base = dict(optimizer="adam", lr_critic=1e-2, lr_actor=1e-2, lr_model=1e-2,
                gamma=0.99, horizon=1, mpc_horizon=10, terminal_form="factor",
                tau=0.05, total_steps=20_000, learning_starts=1000, seeds=(0, 1, 2, 3, 4))
    base.update(kw)
    return TrainConfig(**base)


def baseline_defaults(**kw) -> TrainConfig:
    """TD3 on the same task with the stock learning rates."""
    base = dict(optimizer="adam", lr_critic=1e-3, lr_actor=1e-3, gamma=0.99, tau=0.005,
                total_steps=20_000, learning_starts=1000, seeds=(0, 1, 2, 3, 4))
    base.update(kw)
    return TrainConfig(**base)


def nonlinear_defaults(**kw) -> TrainConfig:
    """Reactor benchmark: three arms, rollout horizon 5, modest network widths."""
    base = dict(optimizer="adam", lr_critic=1e-3, lr_actor=1e-3, lr_model=1e-3,
                gamma=0.95, horizon=5, rho=10.0, tau=0.005, hidden=(64, 64),
                critic_hidden=(64, 64), model_hidden=(64, 64), total_steps=20_000,
                learning_starts=1000, seeds=(0, 1, 2, 3, 4))
    base.update(kw)
    return TrainConfig(**base)
