import numpy as np
import pytest
from scipy.optimize import minimize

from mpcritic.components import (BoxConstraint, LinearDynamics, LinearGainController, MlpController,
                                 MlpDynamics, QuadraticStageCost, QuadraticTerminal)
from mpcritic.core import MpcCriticSpec
from mpcritic.envs import LqrEnv
from mpcritic.errors import ConfigError
from mpcritic.lqr import LqrProblem, solve_dare
from mpcritic.mpc import (MpcPolicy, QpMpcProblem, TIMING_COLUMNS, benchmark_problem, mpc_sensitivity,
                          qp_objective, solve_mpc, solve_mpc_nonlinear, time_forward_backward)


def random_qp(rng, n=2, m=2, N=3, rho=None, ubound=0.7, xbound=0.5):
    A, B = rng.normal(size=(n, n)), rng.normal(size=(n, m))
    G = rng.normal(size=(n, n))
    return QpMpcProblem(A, B, G @ G.T + 0.1 * np.eye(n), 0.1 * np.eye(m), np.eye(n), N,
                        BoxConstraint.symmetric(m, ubound), BoxConstraint.symmetric(n, xbound),
                        rng.choice([0.5, 3.0, 1e3]) if rho is None else rho)


def slack_oracle(prob, rng, starts=4):
    """Solve the same problem as a smooth NLP in (u, e) with e >= state-box excess."""
    N, n, m = prob.horizon, prob.n, prob.m
    lo, hi = prob.state_box.lower, prob.state_box.upper

    def states(u):
        x, out = prob.s, []
        for t in range(N):
            x = prob.A @ x + prob.B @ u[t * m:(t + 1) * m]
            out.append(x)
        return np.concatenate(out)

    def cost(v):
        u, e = v[:N * m], v[N * m:]
        return qp_objective(prob.__class__(prob.A, prob.B, prob.M, prob.R, prob.P, N, None, None,
                                           prob.rho, prob.s), u) + prob.rho * e.sum()

    cons = [{"type": "ineq", "fun": lambda v: v[N * m:] - (states(v[:N * m]) - np.tile(hi, N))},
            {"type": "ineq", "fun": lambda v: v[N * m:] - (np.tile(lo, N) - states(v[:N * m]))}]
    bounds = [(l, h) for l, h in zip(np.tile(prob.action_box.lower, N), np.tile(prob.action_box.upper, N))]
    bounds += [(0.0, None)] * (N * n)
    lo_u, hi_u = np.tile(prob.action_box.lower, N), np.tile(prob.action_box.upper, N)
    best = np.inf
    for _ in range(starts):
        u0 = rng.uniform(-0.5, 0.5, N * m)
        e0 = np.maximum(np.abs(states(u0)) - 0.5, 0) + 1.0
        res = minimize(cost, np.concatenate([u0, e0]), method="SLSQP", bounds=bounds,
                       constraints=cons, options={"ftol": 1e-14, "maxiter": 2000})
        # score the action part exactly, so a sloppy slack cannot flatter the oracle
        best = min(best, qp_objective(prob, np.clip(res.x[:N * m], lo_u, hi_u)))
    return best


# ---------------------------------------------------------------------------
# construction


def test_problem_validation():
    with pytest.raises(ConfigError):
        QpMpcProblem(np.eye(2), np.eye(2), np.eye(3), np.eye(2), np.eye(2))
    with pytest.raises(ConfigError):
        QpMpcProblem(np.eye(1), np.eye(1), np.eye(1), np.eye(1), np.eye(1), horizon=0)
    with pytest.raises(ConfigError):
        QpMpcProblem(np.eye(1), np.eye(1), np.eye(1), np.eye(1), np.eye(1), rho=0.0)
    prob = QpMpcProblem(np.eye(1), np.eye(1), np.eye(1), np.eye(1), np.eye(1))
    with pytest.raises(ConfigError):
        solve_mpc(prob)  # no state
    bad_R = QpMpcProblem(np.eye(1), np.eye(1), np.eye(1), [[0.0]], np.eye(1), s=[1.0])
    with pytest.raises(ConfigError):
        solve_mpc(bad_R)


def test_condensed_prediction_matches_simulation(rng):
    prob = random_qp(rng, 3, 2, 4).with_state(rng.normal(size=3))
    Phi, Gamma, H, F, _ = prob.condense()
    u = rng.normal(size=8)
    x, sim = prob.s, []
    for t in range(4):
        x = prob.A @ x + prob.B @ u[2 * t:2 * t + 2]
        sim.append(x)
    assert np.allclose(Phi @ prob.s + Gamma @ u, np.concatenate(sim), atol=1e-12)
    assert np.allclose(H, H.T)


# ---------------------------------------------------------------------------
# examples


def test_zero_state_gives_zero_plan(rng):
    prob = random_qp(rng, 3, 2, 5).with_state(np.zeros(3))
    res = solve_mpc(prob)
    assert np.array_equal(res.actions, np.zeros((5, 2)))
    assert res.objective == 0.0 and res.converged


@pytest.mark.parametrize("N", [1, 10, 20])
def test_matches_lqr_gain_when_unconstrained(N, rng):
    env = LqrEnv(4)
    sol = solve_dare(LqrProblem(env.A, env.B, env.M, env.R))
    prob = QpMpcProblem(env.A, env.B, env.M, env.R, sol.P, N)
    for _ in range(100):
        s = rng.uniform(-1, 1, 4)
        res = solve_mpc(prob.with_state(s))
        assert res.converged
        assert np.max(np.abs(res.first_action + sol.K @ s)) <= 1e-5


def test_scalar_box_clips_to_nearer_edge():
    a = 1.2
    sol = solve_dare(LqrProblem([[a]], [[1.0]], [[1.0]], [[1.0]]))
    k = sol.K[0, 0]
    prob = QpMpcProblem([[a]], [[1.0]], [[1.0]], [[1.0]], sol.P, 1, BoxConstraint([-0.5], [0.5]),
                        BoxConstraint([-100.0], [100.0]))
    free = solve_mpc(QpMpcProblem([[a]], [[1.0]], [[1.0]], [[1.0]], sol.P, 1, s=[0.8 / k]))
    assert free.first_action[0] == pytest.approx(-0.8, abs=1e-12)
    res = solve_mpc(prob.with_state([0.8 / k]))
    assert res.first_action[0] == -0.5


def test_actions_inside_box_and_descent_is_monotone(rng):
    for _ in range(30):
        prob = random_qp(rng).with_state(rng.uniform(-2, 2, 2))
        res = solve_mpc(prob)
        assert res.converged
        assert np.all(res.actions >= prob.action_box.lower) and np.all(res.actions <= prob.action_box.upper)
        h = res.history
        assert all(b <= a + 1e-12 * max(1.0, abs(a)) for a, b in zip(h, h[1:]))
        assert res.objective == pytest.approx(qp_objective(prob, res.actions), rel=1e-10, abs=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_matches_slack_reformulation(rng):
    for _ in range(15):
        prob = random_qp(rng).with_state(rng.uniform(-2, 2, 2))
        res = solve_mpc(prob)
        ref = slack_oracle(prob, rng)
        assert res.objective <= ref + 1e-7 * max(1.0, abs(ref))
        assert res.objective == pytest.approx(ref, rel=1e-5, abs=1e-7)


def test_objective_scale_invariance(rng):
    for _ in range(20):
        prob = random_qp(rng).with_state(rng.uniform(-2, 2, 2))
        u1 = solve_mpc(prob).actions
        u10 = solve_mpc(prob.scaled(10.0)).actions
        assert np.max(np.abs(u1 - u10)) <= 1e-6


def test_warm_start_reaches_same_solution(rng):
    for _ in range(10):
        prob = random_qp(rng).with_state(rng.uniform(-2, 2, 2))
        cold = solve_mpc(prob)
        warm = solve_mpc(prob, warm_start=rng.uniform(-3, 3, (3, 2)))
        assert warm.objective == pytest.approx(cold.objective, rel=1e-9, abs=1e-12)


def test_max_iter_returns_best_iterate(rng):
    prob = random_qp(rng, 3, 3, 6).with_state(rng.uniform(-3, 3, 3))
    res = solve_mpc(prob, max_iter=1)
    assert res.iterations == 1
    full = solve_mpc(prob)
    assert full.converged and full.objective <= res.objective


def test_receding_horizon_tracks_lqr_closed_loop(rng):
    env = LqrEnv(4)
    sol = solve_dare(LqrProblem(env.A, env.B, env.M, env.R))
    policy = MpcPolicy(QpMpcProblem(env.A, env.B, env.M, env.R, sol.P, 10, env.action_box,
                                    env.state_box))
    Acl = sol.closed_loop(LqrProblem(env.A, env.B, env.M, env.R))
    s = rng.uniform(-1, 1, 4)
    x_ref = s.copy()
    for t in range(50):
        s, _, _ = env.step(s, policy(s, t), t)
        x_ref = Acl @ x_ref
        assert np.max(np.abs(s - x_ref)) <= 1e-5
    assert policy.failures == 0


# ---------------------------------------------------------------------------
# sensitivity


def test_sensitivity_matches_finite_differences(rng):
    checked = 0
    while checked < 8:
        n = m = 2
        A, B = 0.6 * rng.normal(size=(n, n)), rng.normal(size=(n, m))
        mats = {"A": A, "B": B, "M": np.eye(n), "R": 0.5 * np.eye(m), "P": 2.0 * np.eye(n)}
        s = rng.uniform(-2, 2, n)
        w = rng.normal(size=m)

        def build(**kw):
            d = {**mats, **kw}
            return QpMpcProblem(d["A"], d["B"], d["M"], d["R"], d["P"], 3, BoxConstraint.symmetric(m, 0.6),
                                BoxConstraint.symmetric(n, 0.8), 5.0, s)

        prob = build()
        res = solve_mpc(prob)
        # skip degenerate solutions where the active set changes under tiny perturbations
        X = res.states[1:]
        if np.min(np.abs(np.abs(X) - 0.8)) < 1e-4 and not np.any(np.abs(res.state_modes) == 1):
            continue
        grad = mpc_sensitivity(prob, res, w)
        h = 1e-6
        for name, base in mats.items():
            num = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                Xp, Xm = base.copy(), base.copy()
                Xp[idx] += h
                Xm[idx] -= h
                num[idx] = (w @ solve_mpc(build(**{name: Xp})).first_action
                            - w @ solve_mpc(build(**{name: Xm})).first_action) / (2 * h)
            an = grad[name]
            if name in "MRP":  # the problem symmetrizes these, so compare symmetric parts
                an, num = 0.5 * (an + an.T), 0.5 * (num + num.T)
            assert np.allclose(an, num, atol=1e-5 * (1 + np.max(np.abs(num)))), name
        checked += 1


# ---------------------------------------------------------------------------
# nonlinear shooting


def linear_spec(prob):
    return MpcCriticSpec(QuadraticStageCost(prob.M, prob.R), QuadraticTerminal.from_matrix(prob.P),
                         LinearDynamics(prob.A, prob.B),
                         LinearGainController(np.zeros((prob.m, prob.n))), prob.state_box,
                         prob.rho, prob.horizon)


def test_nonlinear_solver_agrees_with_qp(rng):
    for _ in range(10):
        prob = random_qp(rng, rho=3.0)
        prob = QpMpcProblem(0.7 * prob.A, prob.B, prob.M, np.eye(2), prob.P, 3, prob.action_box,
                            None, 1.0, rng.uniform(-2, 2, 2))
        qp = solve_mpc(prob)
        nl = solve_mpc_nonlinear(linear_spec(prob), prob.s, tol=1e-10, max_iter=5000,
                                 action_box=prob.action_box)
        assert nl.objective == pytest.approx(qp.objective, rel=1e-6)
        assert np.allclose(nl.states[1:], qp.states[1:], atol=1e-4)


def test_nonlinear_warm_start_at_optimum_converges_immediately():
    # zero dynamics with zero controller: the warm start u = 0 is the exact minimizer
    spec = MpcCriticSpec(QuadraticStageCost(np.eye(2), np.eye(1)), QuadraticTerminal(np.eye(2)),
                         LinearDynamics(np.zeros((2, 2)), np.zeros((2, 1))),
                         LinearGainController(np.zeros((1, 2))), horizon=4)
    res = solve_mpc_nonlinear(spec, np.array([0.3, -0.2]))
    assert res.converged and res.iterations <= 2
    assert np.array_equal(res.actions, np.zeros((4, 1)))


def test_nonlinear_restarts_are_monotone(rng):
    spec = MpcCriticSpec(QuadraticStageCost(np.eye(2), 0.1 * np.eye(1)), QuadraticTerminal(np.eye(2)),
                         MlpDynamics(2, 1, (8,), rng), MlpController(2, 1, (8,), rng=rng),
                         BoxConstraint.symmetric(2, 0.5), 10.0, 3)
    s = np.array([0.8, -0.4])
    objs = [solve_mpc_nonlinear(spec, s, max_iter=200, restarts=k, seed=7).objective for k in (1, 2, 4)]
    assert objs[0] >= objs[1] >= objs[2]
    with pytest.raises(ConfigError):
        solve_mpc_nonlinear(spec, s, restarts=0)


def test_nonlinear_actions_respect_box(rng):
    spec = MpcCriticSpec(QuadraticStageCost(np.eye(2), 1e-3 * np.eye(1)), QuadraticTerminal(10 * np.eye(2)),
                         MlpDynamics(2, 1, (8,), rng), MlpController(2, 1, (8,), low=-0.3, high=0.2, rng=rng),
                         None, 1.0, 4)
    res = solve_mpc_nonlinear(spec, np.array([2.0, -1.0]), restarts=3)
    assert np.all(res.actions >= -0.3) and np.all(res.actions <= 0.2)


# ---------------------------------------------------------------------------
# timing harness


def test_timing_records_shape():
    fwd, bwd = time_forward_backward("mu", 4, batch=8, seeds=range(3), hidden=(10, 10))
    assert (fwd.direction, bwd.direction) == ("forward", "backward")
    assert len(fwd.times) == 3 and fwd.std_s >= 0
    assert set(fwd.row()) == set(TIMING_COLUMNS)
    with pytest.raises(ConfigError):
        time_forward_backward("mu", 4, batch=0)
    with pytest.raises(ConfigError):
        time_forward_backward("lqr", 4)


def test_mu_forward_workload_monotone():
    small, _ = time_forward_backward("mu", 16, batch=1, seeds=range(10))
    big, _ = time_forward_backward("mu", 16, batch=256, seeds=range(10))
    assert small.mean_s <= big.mean_s


def test_solver_iteration_counts_deterministic():
    a, _ = time_forward_backward("mpc", 4, batch=16, seeds=[3, 4])
    b, _ = time_forward_backward("mpc", 4, batch=16, seeds=[3, 4])
    assert a.iterations == b.iterations


def test_benchmark_problem_uses_riccati_terminal():
    prob = benchmark_problem(3)
    env = LqrEnv(3)
    assert np.allclose(prob.P, solve_dare(LqrProblem(env.A, env.B, env.M, env.R)).P)
    assert prob.horizon == 1
