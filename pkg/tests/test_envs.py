import csv

import numpy as np
import pytest

from mpcritic.envs import (LqrEnv, ReactorEnv, RolloutStats, ZeroEnv, rollout_policy,
                           sample_offline_dataset, write_trajectory_csv)
from mpcritic.errors import ConfigError
from mpcritic.lqr import spectral_radius


def test_lqr_step_examples():
    env = LqrEnv(2)
    s2, r, done = env.step(np.zeros(2), np.zeros(2))
    assert np.array_equal(s2, np.zeros(2)) and r == 0.0 and not done
    s2, _, _ = env.step(np.ones(2), np.zeros(2))
    assert np.allclose(s2, [1.02, 1.02], atol=1e-15)
    _, r, _ = env.step(np.array([1.0, 0.0]), np.zeros(2))
    assert r == pytest.approx(-1e-3, abs=1e-18)


def test_lqr_env_invariants(rng):
    env = LqrEnv(4)
    assert spectral_radius(env.A) > 1
    for _ in range(50):
        assert env.step(rng.uniform(-3, 3, 4), rng.uniform(-1, 1, 4))[1] <= 0.0


def test_done_only_at_horizon():
    env = LqrEnv(2, horizon=5)
    flags = [env.step(np.zeros(2), np.zeros(2), t)[2] for t in range(5)]
    assert flags == [False] * 4 + [True]


def test_open_loop_norm_grows():
    env = LqrEnv(4)
    s = np.ones(4)
    norms = [np.linalg.norm(s)]
    for t in range(50):
        s, _, _ = env.step(s, np.zeros(4), t)
        norms.append(np.linalg.norm(s))
    assert all(b > a for a, b in zip(norms, norms[1:]))


def test_out_of_box_action_is_clipped():
    env = LqrEnv(2)
    s2, r, _ = env.step(np.zeros(2), np.array([3.0, -3.0]))
    assert np.allclose(s2, [1.0, -1.0])
    assert r == -2.0


def test_process_noise_is_seeded():
    env = LqrEnv(2, noise_std=0.1)
    a = env.step(np.ones(2), np.zeros(2), 0, np.random.default_rng(1))[0]
    b = env.step(np.ones(2), np.zeros(2), 0, np.random.default_rng(1))[0]
    assert np.array_equal(a, b)
    assert not np.allclose(a, [1.02, 1.02])


def test_reactor_step_deterministic(rng):
    env = ReactorEnv()
    s, a = env.reset(rng), np.array([0.2])
    assert np.array_equal(env.step(s, a)[0], env.step(s, a)[0])


def test_reactor_reward_peak_and_range(rng):
    env = ReactorEnv()
    assert env.reward(np.array([0.3, env.goal]), np.zeros(1)) == 1.0
    for _ in range(50):
        r = env.reward(rng.uniform(0, 2, 2), np.zeros(1))
        assert 0.0 <= r <= 1.0


def test_reactor_steady_state_is_fixed_point():
    env = ReactorEnv()
    for a in (-0.9, -0.2, 0.1, 0.8):
        x = env.steady_state(np.array([a]))
        assert np.allclose(env.transition(x, np.array([a])), x, atol=1e-12)


def test_reactor_goal_reachable_on_two_branches():
    env = ReactorEnv()
    grid = np.linspace(-1, 1, 2001)
    cb = np.array([env.steady_state(np.array([a]))[1] for a in grid])
    crossings = np.flatnonzero(np.diff(np.sign(cb - env.goal)))
    assert len(crossings) == 2
    ca_hi = env.steady_state(np.array([grid[crossings[1]]]))[0]
    ca_lo = env.steady_state(np.array([grid[crossings[0]]]))[0]
    assert ca_hi > env.state_box.upper[0] > ca_lo


def test_zero_env_zero_policy():
    stats = rollout_policy(ZeroEnv(), lambda s, t: np.zeros(2), 3, seed=0)
    assert np.array_equal(stats.returns, np.zeros(3))
    assert np.array_equal(stats.violations, np.zeros(3))


class JumpEnv(ZeroEnv):
    """Jumps to a state with sup-norm 2 after the first step and stays there."""

    def transition(self, s, a, noise_rng=None):
        return np.array([2.0, 0.0])


def test_violation_count_worst_case():
    env = JumpEnv(horizon=50)
    # the state reached after step t is counted; s_0 is inside, s_1..s_50 are outside
    stats = rollout_policy(env, lambda s, t: np.zeros(2), 1, seed=0)
    assert stats.violations[0] == 50
    # the states visited before the final step, x_1..x_49, account for 49 of them
    assert sum(r[5] for r in stats.trajectories[:-1]) == 49


def test_violation_strictness():
    env = ZeroEnv()
    assert not env.is_violation(np.array([1.0, -1.0]))
    assert env.is_violation(np.array([1.0 + 1e-12, 0.0]))


def test_clipping_policy_on_stable_system_never_violates(rng):
    env = LqrEnv(3, diag=0.5, off=0.1)
    policy = lambda s, t: np.clip(-0.5 * s, -1, 1)
    stats = rollout_policy(env, policy, 5, seed=3)
    assert np.all(stats.violations == 0)


def test_rollout_is_reproducible(rng):
    env = ReactorEnv()
    pol = lambda s, t: np.array([np.sin(t + s[0])])
    a = rollout_policy(env, pol, 2, seed=11)
    b = rollout_policy(env, pol, 2, seed=11)
    assert np.array_equal(a.returns, b.returns) and np.array_equal(a.violations, b.violations)
    with pytest.raises(ConfigError):
        rollout_policy(env, pol, -1, seed=0)


def test_trajectory_csv(tmp_path):
    env = LqrEnv(2, horizon=3)
    stats = rollout_policy(env, lambda s, t: -s, 2, seed=0)
    path = tmp_path / "traj.csv"
    stats.write_csv(path, seed=4)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["seed", "episode", "t", "s0", "s1", "a0", "a1", "r", "violation"]
    assert len(rows) == 1 + 6
    assert rows[1][:3] == ["4", "0", "0"]
    empty = tmp_path / "empty.csv"
    write_trajectory_csv(empty, [], n=2, m=1)
    assert open(empty).read().strip() == "seed,episode,t,s0,s1,a0,r,violation"
    with pytest.raises(ConfigError):
        write_trajectory_csv(empty, [])


def test_offline_dataset_examples():
    env = LqrEnv(3)
    one_a = sample_offline_dataset(env, 1, 5)
    one_b = sample_offline_dataset(env, 1, 5)
    for k in one_a:
        assert np.array_equal(one_a[k], one_b[k])
    big = sample_offline_dataset(env, 100_000, 0)
    assert np.all(np.abs(big["s"]) <= 1) and np.all(np.abs(big["a"]) <= 1)
    assert np.all(np.abs(big["s"].mean(axis=0)) < 0.01)
    assert np.allclose(big["s2"][:10], big["s"][:10] @ env.A.T + big["a"][:10] @ env.B.T)
    assert np.allclose(big["r"][:10], [env.reward(s, a) for s, a in zip(big["s"][:10], big["a"][:10])])
    with pytest.raises(ConfigError):
        sample_offline_dataset(env, 0, 0)


def test_offline_dataset_nonlinear_env():
    env = ReactorEnv()
    d = sample_offline_dataset(env, 5, 1)
    assert d["s2"].shape == (5, 2)
    assert np.allclose(d["s2"][0], env.transition(d["s"][0], d["a"][0]))
