"""Online MPC: exact finite-horizon solves used as the acting policy.

The linear-quadratic problem is condensed onto the action sequence and solved
by a primal active-set method for the piecewise quadratic objective

    x_0'Mx_0 + sum_{t<N} (x_t'Mx_t + u_t'Ru_t) + x_N'Px_N + rho * sum_{t=1..N} |viol(x_t)|_1

(the first term only shifts the value) under a hard action box.  Every step
moves toward the minimizer of the current quadratic piece, so the objective
never increases.  ``mpc_sensitivity`` differentiates the solution through its
KKT system, and ``solve_mpc_nonlinear`` handles neural components by
projected-gradient shooting.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .components import BoxConstraint, MlpController
from .errors import ConfigError

log = logging.getLogger(__name__)

# state modes: inside, pinned at a bound, or outside (linear penalty active)
INSIDE, PIN_HI, PIN_LO, ABOVE, BELOW = 0, 1, -1, 2, -2


def _sym(X):
    X = np.array(X, dtype=np.float64, ndmin=2)
    return 0.5 * (X + X.T)


@dataclass
class QpMpcProblem:
    A: np.ndarray
    B: np.ndarray
    M: np.ndarray
    R: np.ndarray
    P: np.ndarray
    horizon: int = 10
    action_box: BoxConstraint | None = None
    state_box: BoxConstraint | None = None
    rho: float = 1e3
    s: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.array(self.A, dtype=np.float64, ndmin=2)
        self.B = np.array(self.B, dtype=np.float64, ndmin=2)
        self.M, self.R, self.P = _sym(self.M), _sym(self.R), _sym(self.P)
        n, m = self.B.shape
        if self.A.shape != (n, n) or self.M.shape != (n, n) or self.P.shape != (n, n) \
                or self.R.shape != (m, m):
            raise ConfigError("MPC matrices are not conformable")
        if int(self.horizon) < 1:
            raise ConfigError("horizon must be at least 1")
        if self.rho <= 0:
            raise ConfigError("rho must be positive")
        self.horizon = int(self.horizon)
        if self.s is not None:
            self.s = np.asarray(self.s, dtype=np.float64).reshape(n)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def with_state(self, s) -> "QpMpcProblem":
        return replace(self, s=np.asarray(s, dtype=np.float64))

    def scaled(self, c: float) -> "QpMpcProblem":
        """Same problem with the whole objective multiplied by ``c``."""
        return replace(self, M=c * self.M, R=c * self.R, P=c * self.P, rho=c * self.rho)

    def condense(self):
        """Return (Phi, Gamma, H, F): states x_1..x_N = Phi s + Gamma u and
        the smooth part 0.5 u'Hu + (F s)'u + const."""
        A, B, N, n, m = self.A, self.B, self.horizon, self.n, self.m
        Phi = np.zeros((N * n, n))
        Gamma = np.zeros((N * n, N * m))
        powers = [np.eye(n)]
        for _ in range(N):
            powers.append(A @ powers[-1])
        for t in range(1, N + 1):
            Phi[(t - 1) * n: t * n] = powers[t]
            for k in range(t):
                Gamma[(t - 1) * n: t * n, k * m:(k + 1) * m] = powers[t - 1 - k] @ B
        Q = np.zeros((N * n, N * n))
        for t in range(N):
            Q[t * n:(t + 1) * n, t * n:(t + 1) * n] = self.P if t == N - 1 else self.M
        GQ = Gamma.T @ Q
        Rbar = np.kron(np.eye(N), self.R)
        H = 2.0 * (GQ @ Gamma + Rbar)
        F = 2.0 * GQ @ Phi
        return Phi, Gamma, 0.5 * (H + H.T), F, Q


@dataclass
class MpcResult:
    actions: np.ndarray      # (N, m)
    states: np.ndarray       # (N+1, n), states[0] = s
    objective: float
    iterations: int
    converged: bool
    wall_time: float
    residual: float = 0.0
    history: list = field(default_factory=list)
    action_modes: np.ndarray | None = None
    state_modes: np.ndarray | None = None

    @property
    def first_action(self) -> np.ndarray:
        return self.actions[0]


def _bounds(box: BoxConstraint | None, size: int, reps: int):
    if box is None:
        return np.full(size * reps, -np.inf), np.full(size * reps, np.inf)
    return np.tile(box.lower, reps), np.tile(box.upper, reps)


def qp_objective(prob: QpMpcProblem, u) -> float:
    """Full objective of a (flattened or (N, m)) action sequence."""
    x = prob.s
    total = float(x @ prob.M @ x)
    U = np.asarray(u, dtype=np.float64).reshape(prob.horizon, prob.m)
    for t in range(prob.horizon):
        total += float(U[t] @ prob.R @ U[t])
        x = prob.A @ x + prob.B @ U[t]
        W = prob.P if t == prob.horizon - 1 else prob.M
        total += float(x @ W @ x)
        if prob.state_box is not None:
            total += prob.rho * float(prob.state_box.penalty(x))
    return total


def solve_mpc(prob: QpMpcProblem, tol: float = 1e-9, max_iter: int = 500,
              warm_start=None) -> MpcResult:
    """Minimize the condensed objective over the action sequence.

    ``warm_start`` is an optional (N, m) initial guess, clipped into the box.
    """
    if prob.s is None:
        raise ConfigError("the problem has no current state; use with_state(s)")
    if np.any(np.linalg.eigvalsh(prob.R) <= 0):
        raise ConfigError("R must be positive definite")
    t0 = time.perf_counter()
    N, n, m, rho = prob.horizon, prob.n, prob.m, prob.rho
    Phi, Gamma, H, F, Q = prob.condense()
    s = prob.s
    g = F @ s
    z0 = Phi @ s
    const = float(s @ prob.M @ s + z0 @ Q @ z0)
    ulo, uhi = _bounds(prob.action_box, m, N)
    has_state = prob.state_box is not None
    zlo, zhi = _bounds(prob.state_box, n, N)

    u = np.zeros(N * m) if warm_start is None else np.asarray(warm_start, dtype=np.float64).reshape(N * m)
    u = np.clip(u, ulo, uhi)
    z = z0 + Gamma @ u
    amode = np.zeros(N * m, dtype=int)
    smode = np.zeros(N * n, dtype=int)
    if has_state:
        smode[z > zhi] = ABOVE
        smode[z < zlo] = BELOW

    def objective(u, z):
        val = 0.5 * u @ H @ u + g @ u + const
        if has_state:
            val += rho * float(np.sum(np.maximum(zlo - z, 0.0) + np.maximum(z - zhi, 0.0)))
        return float(val)

    history = [objective(u, z)]
    at_min = False  # True right after a full, unblocked step
    residual = np.inf
    converged = False
    it = 0
    scale = 1.0 + np.max(np.abs(H))
    for it in range(1, max_iter + 1):
        sigma = (smode == ABOVE).astype(float) - (smode == BELOW)
        q = g + rho * (Gamma.T @ sigma) if has_state else g
        a_idx = np.flatnonzero(amode)
        s_idx = np.flatnonzero(np.abs(smode) == 1)
        rows = [amode[a_idx, None] * np.eye(N * m)[a_idx]]
        rhs = [np.where(amode[a_idx] > 0, uhi[a_idx], -ulo[a_idx])]
        if s_idx.size:
            sgn = smode[s_idx]
            rows.append(sgn[:, None] * Gamma[s_idx])
            bound = np.where(sgn > 0, zhi[s_idx], -zlo[s_idx])
            rhs.append(bound - sgn * z0[s_idx])
        W = np.vstack(rows)
        w = np.concatenate(rhs)
        k = W.shape[0]
        K = np.block([[H, W.T], [W, np.zeros((k, k))]])
        sol = _kkt_solve(K, np.concatenate([-q, w]))
        u_star, lam = sol[: N * m], sol[N * m:]
        d = u_star - u
        small = np.max(np.abs(d), initial=0.0) <= 1e-13 * (1.0 + np.max(np.abs(u), initial=0.0))
        if at_min or small:
            # at the minimizer of the working-set subproblem: check multipliers
            at_min = False
            lam_a, lam_s = lam[: a_idx.size], lam[a_idx.size:]
            viol_a = np.maximum(-lam_a, 0.0)
            viol_lo = np.maximum(-lam_s, 0.0)
            viol_hi = np.maximum(lam_s - rho, 0.0)
            residual = float(max(viol_a.max(initial=0.0), viol_lo.max(initial=0.0),
                                 viol_hi.max(initial=0.0)))
            if residual <= tol * scale:
                converged = True
                break
            cand = [(viol_a.max(initial=0.0), "a"), (viol_lo.max(initial=0.0), "in"),
                    (viol_hi.max(initial=0.0), "out")]
            _, kind = max(cand)
            if kind == "a":
                amode[a_idx[np.argmax(viol_a)]] = 0
            elif kind == "in":
                smode[s_idx[np.argmax(viol_lo)]] = INSIDE
            else:
                j = s_idx[np.argmax(viol_hi)]
                smode[j] = ABOVE if smode[j] == PIN_HI else BELOW
            continue
        alpha, block = 1.0, None
        free = amode == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            up = free & (d > 0)
            ratio = np.where(up, (uhi - u) / d, np.inf)
            dn = free & (d < 0)
            ratio = np.where(dn, (ulo - u) / d, ratio)
        j = int(np.argmin(ratio)) if ratio.size else 0
        if ratio.size and ratio[j] < alpha:
            alpha, block = max(ratio[j], 0.0), ("a", j, PIN_HI if d[j] > 0 else PIN_LO)
        if has_state:
            dz = Gamma @ d
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.full(N * n, np.inf)
                ins = smode == INSIDE
                r = np.where(ins & (dz > 0), (zhi - z) / dz, r)
                r = np.where(ins & (dz < 0), (zlo - z) / dz, r)
                r = np.where((smode == ABOVE) & (dz < 0), (zhi - z) / dz, r)
                r = np.where((smode == BELOW) & (dz > 0), (zlo - z) / dz, r)
            j = int(np.argmin(r))
            if r[j] < alpha:
                pin = PIN_HI if (smode[j] == ABOVE or (smode[j] == INSIDE and dz[j] > 0)) else PIN_LO
                alpha, block = max(r[j], 0.0), ("s", j, pin)
        u = u + alpha * d
        if block is not None:
            kind, j, pin = block
            if kind == "a":
                amode[j] = pin
            else:
                smode[j] = pin
        at_min = block is None
        # pinned actions sit exactly on their bound despite rounding in d
        u = np.where(amode == PIN_HI, uhi, np.where(amode == PIN_LO, ulo, u))
        z = z0 + Gamma @ u
        history.append(objective(u, z))
    else:
        log.warning("MPC solve hit max_iter=%d (residual %.3g)", max_iter, residual)
    U = u.reshape(N, m)
    X = np.vstack([s, z.reshape(N, n)])
    return MpcResult(U, X, history[-1], it, converged, time.perf_counter() - t0,
                     residual, history, amode.copy(), smode.copy())


def _kkt_solve(K, rhs):
    try:
        return np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(K, rhs, rcond=None)[0]


# ---------------------------------------------------------------------------
# sensitivity through the KKT system


def mpc_sensitivity(prob: QpMpcProblem, result: MpcResult, du0=None) -> dict:
    """Gradient of ``du0 . u_0*`` w.r.t. (A, B, M, R, P) by implicit differentiation.

    Works in the lifted (x_1..x_N, u_0..u_{N-1}) space with the solution's
    active set held fixed, which is exact wherever the active set is locally
    constant.  ``du0`` defaults to all ones (sum of first-action entries).
    """
    N, n, m, rho = prob.horizon, prob.n, prob.m, prob.rho
    A, B, M, R, P, s = prob.A, prob.B, prob.M, prob.R, prob.P, prob.s
    du0 = np.ones(m) if du0 is None else np.asarray(du0, dtype=np.float64)
    nx, nu = N * n, N * m
    ny = nx + nu

    def xi(t):  # slice of x_t (t >= 1) in y
        return slice((t - 1) * n, t * n)

    def ui(t):
        return slice(nx + t * m, nx + (t + 1) * m)

    G = np.zeros((ny, ny))
    for t in range(1, N + 1):
        G[xi(t), xi(t)] = 2.0 * (P if t == N else M)
    for t in range(N):
        G[ui(t), ui(t)] = 2.0 * R
    h = np.zeros(ny)
    smode = result.state_modes if result.state_modes is not None else np.zeros(nx, dtype=int)
    h[:nx] = rho * ((smode == ABOVE).astype(float) - (smode == BELOW))

    E = np.zeros((nx, ny))
    e = np.zeros(nx)
    for t in range(N):
        r = slice(t * n, (t + 1) * n)
        E[r, xi(t + 1)] = -np.eye(n)
        E[r, ui(t)] = B
        if t == 0:
            e[r] = -A @ s
        else:
            E[r, xi(t)] = A
    ulo, uhi = _bounds(prob.action_box, m, N)
    zlo, zhi = _bounds(prob.state_box, n, N)
    rows, rhs = [], []
    amode = result.action_modes if result.action_modes is not None else np.zeros(nu, dtype=int)
    for j in np.flatnonzero(amode):
        row = np.zeros(ny)
        row[nx + j] = amode[j]
        rows.append(row)
        rhs.append(uhi[j] if amode[j] > 0 else -ulo[j])
    for j in np.flatnonzero(np.abs(smode) == 1):
        row = np.zeros(ny)
        row[j] = smode[j]
        rows.append(row)
        rhs.append(zhi[j] if smode[j] > 0 else -zlo[j])
    W = np.array(rows).reshape(-1, ny)
    k = W.shape[0]
    C = np.vstack([E, W])
    K = np.block([[G, C.T], [C, np.zeros((nx + k, nx + k))]])
    sol = _kkt_solve(K, np.concatenate([-h, e, np.asarray(rhs, dtype=np.float64)]))
    y, nu_dyn = sol[:ny], sol[ny: ny + nx]
    rhs_adj = np.zeros(ny + nx + k)
    rhs_adj[ui(0)] = du0
    adj = _kkt_solve(K, rhs_adj)
    zeta, xi_dyn = adj[:ny], adj[ny: ny + nx]

    xs = [s] + [y[xi(t)] for t in range(1, N + 1)]
    us = [y[ui(t)] for t in range(N)]
    zx = [np.zeros(n)] + [zeta[xi(t)] for t in range(1, N + 1)]
    zu = [zeta[ui(t)] for t in range(N)]
    gA, gB = np.zeros_like(A), np.zeros_like(B)
    gM, gR, gP = np.zeros_like(M), np.zeros_like(R), np.zeros_like(P)
    for t in range(N):
        nt, ct = nu_dyn[t * n:(t + 1) * n], xi_dyn[t * n:(t + 1) * n]
        gA += np.outer(nt, zx[t]) + np.outer(ct, xs[t])
        gB += np.outer(nt, zu[t]) + np.outer(ct, us[t])
        gR += np.outer(zu[t], us[t]) + np.outer(us[t], zu[t])
    for t in range(1, N):
        gM += np.outer(zx[t], xs[t]) + np.outer(xs[t], zx[t])
    gP += np.outer(zx[N], xs[N]) + np.outer(xs[N], zx[N])
    return {"A": -gA, "B": -gB, "M": -gM, "R": -gR, "P": -gP}


# ---------------------------------------------------------------------------
# nonlinear shooting


def _shoot(spec, s, U, box, want_grad=True):
    """Objective sum_{t<N} l + V(x_N) + rho * sum_{t=1..N} pen(x_t) and its gradient in U."""
    N = U.shape[0]
    h = spec.state_constraint
    x = s[None, :]
    f_caches, l_caches, xs = [], [], [x]
    total = 0.0
    for t in range(N):
        u = U[t][None, :]
        c, lc = spec.stage_cost.forward(x, u)
        l_caches.append(lc)
        total += float(c[0])
        x, fc = spec.dynamics.forward(x, u)
        f_caches.append(fc)
        xs.append(x)
        if h is not None:
            total += spec.rho * float(h.penalty(x)[0])
    uN, mc = (spec.controller.forward(x) if spec.terminal.uses_action else (None, None))
    v, vc = spec.terminal.forward(x, uN)
    total += float(v[0])
    if not np.isfinite(total):
        return np.inf, None
    if not want_grad:
        return total, None
    one = np.ones(1)
    dx, du_term, _ = spec.terminal.backward(vc, one)
    if spec.terminal.uses_action:
        dxm, _ = spec.controller.backward(mc, du_term)
        dx = dx + dxm
    G = np.zeros_like(U)
    for t in reversed(range(N)):
        if h is not None:
            dx = dx + spec.rho * h.penalty_grad(xs[t + 1])
        dxp, du, _ = spec.dynamics.backward(f_caches[t], dx)
        lx, lu, _ = spec.stage_cost.backward(l_caches[t], one)
        G[t] = (du + lu)[0]
        dx = dxp + lx
    return total, G


def _action_box(spec, action_box, m):
    if action_box is not None:
        return action_box
    mu = spec.controller
    if isinstance(mu, MlpController):
        return BoxConstraint(mu.center - mu.half, mu.center + mu.half)
    return BoxConstraint.symmetric(m)


def _projected_descent(spec, s, U, box, tol, max_iter):
    J, G = _shoot(spec, s, U, box)
    step = 1.0
    history = [J]
    residual = np.inf
    for it in range(max_iter + 1):
        residual = float(np.max(np.abs(box.clip(U - G) - U)))
        if residual <= tol:
            return U, J, it, True, residual, history
        if it == max_iter:
            break
        step = min(step * 2.0, 1e6)
        while True:
            Un = box.clip(U - step * G)
            D = Un - U
            Jn, _ = _shoot(spec, s, Un, box, want_grad=False)
            if Jn <= J + float(np.sum(G * D)) + float(np.sum(D * D)) / (2.0 * step):
                break
            step *= 0.5
            if step < 1e-16:
                return U, J, it, False, residual, history
        U = Un
        J, G = _shoot(spec, s, U, box)
        history.append(J)
    return U, J, max_iter, False, residual, history


def solve_mpc_nonlinear(spec, s, tol: float = 1e-6, max_iter: int = 500, restarts: int = 1,
                        seed=0, action_box: BoxConstraint | None = None) -> MpcResult:
    """Projected-gradient shooting over u_0..u_{N-1} for arbitrary differentiable components.

    The first run is warm-started from the controller's own rollout; further
    runs start from uniform draws in the action box.  The best run is returned.
    """
    if restarts < 1:
        raise ConfigError("restarts must be at least 1")
    t0 = time.perf_counter()
    s = np.asarray(s, dtype=np.float64)
    N = spec.horizon
    x = s[None, :]
    warm = []
    for _ in range(N):
        u = spec.controller.forward(x)[0]
        warm.append(u[0])
        x = spec.dynamics.forward(x, u)[0]
    warm = np.array(warm)
    box = _action_box(spec, action_box, warm.shape[1])
    rng = np.random.default_rng(seed)
    starts = [box.clip(warm)]
    for _ in range(restarts - 1):
        starts.append(rng.uniform(box.lower, box.upper, warm.shape))
    best = None
    for U0 in starts:
        run = _projected_descent(spec, s, U0, box, tol, max_iter)
        if best is None or run[1] < best[1]:
            best = run
    U, J, it, ok, res, hist = best
    X = [s[None, :]]
    for t in range(N):
        X.append(spec.dynamics.forward(X[-1], U[t][None, :])[0])
    return MpcResult(U, np.vstack(X), J, it, ok, time.perf_counter() - t0, res, hist)


# ---------------------------------------------------------------------------
# policies and timing


class MpcPolicy:
    """Receding-horizon policy: re-solves at every state and applies u_0.

    ``problem`` supplies the model and costs; the previous solution, shifted
    by one step, warm-starts the next solve.
    """

    def __init__(self, problem: QpMpcProblem, tol=1e-9, max_iter=500):
        self.problem = problem
        self.tol, self.max_iter = tol, max_iter
        self.failures = 0
        self._warm = None

    def reset(self):
        self._warm = None

    def __call__(self, s, t=0):
        warm = None
        if self._warm is not None:
            warm = np.vstack([self._warm[1:], self._warm[-1:]])
        res = solve_mpc(self.problem.with_state(s), self.tol, self.max_iter, warm)
        if not res.converged:
            self.failures += 1
        self._warm = res.actions
        return res.first_action


@dataclass
class TimingRecord:
    n: int
    m: int
    batch: int
    policy: str
    direction: str
    times: list
    iterations: list = field(default_factory=list)

    @property
    def mean_s(self) -> float:
        return float(np.mean(self.times))

    @property
    def std_s(self) -> float:
        return float(np.std(self.times, ddof=1)) if len(self.times) > 1 else 0.0

    def row(self) -> dict:
        return {"n": self.n, "m": self.m, "batch": self.batch, "policy": self.policy,
                "direction": self.direction, "mean_s": self.mean_s, "std_s": self.std_s,
                "seeds": len(self.times)}


TIMING_COLUMNS = ("n", "m", "batch", "policy", "direction", "mean_s", "std_s", "seeds")


def benchmark_problem(n: int, m: int | None = None, horizon: int = 1, rho: float = 1e3):
    """Laplacian system with default weights and its DARE terminal matrix."""
    from .envs import LqrEnv
    from .lqr import LqrProblem, solve_dare

    env = LqrEnv(n, m)
    sol = solve_dare(LqrProblem(env.A, env.B, env.M, env.R))
    return QpMpcProblem(env.A, env.B, env.M, env.R, sol.P, horizon,
                        env.action_box, env.state_box, rho)


def time_forward_backward(policy: str, n: int, m: int | None = None, batch: int = 256,
                          seeds=range(10), horizon: int = 1, hidden=(100, 100),
                          problem: QpMpcProblem | None = None):
    """Time forward and backward passes over a batch of states s ~ U(-1, 1)^n.

    ``policy="mu"`` evaluates a ReLU controller on the whole batch and
    backpropagates the summed outputs into its weights.  ``policy="mpc"``
    solves one QP per state and differentiates each first action through the
    KKT system.  Returns (forward, backward) :class:`TimingRecord` objects with
    one wall time per seed.
    """
    m = n if m is None else m
    if batch < 1:
        raise ConfigError("batch must be at least 1")
    if policy not in ("mu", "mpc"):
        raise ConfigError(f"unknown policy {policy!r}")
    fwd = TimingRecord(n, m, batch, policy, "forward", [])
    bwd = TimingRecord(n, m, batch, policy, "backward", [])
    if policy == "mpc" and problem is None:
        problem = benchmark_problem(n, m, horizon)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        S = rng.uniform(-1.0, 1.0, (batch, n))
        if policy == "mu":
            mu = MlpController(n, m, hidden, rng=rng)
            t0 = time.perf_counter()
            out, cache = mu.forward(S)
            t1 = time.perf_counter()
            mu.backward(cache, np.ones_like(out))
            t2 = time.perf_counter()
            fwd.times.append(t1 - t0)
            bwd.times.append(t2 - t1)
            continue
        results, its = [], 0
        t0 = time.perf_counter()
        for s in S:
            res = solve_mpc(problem.with_state(s))
            results.append(res)
            its += res.iterations
        t1 = time.perf_counter()
        for s, res in zip(S, results):
            mpc_sensitivity(problem.with_state(s), res)
        t2 = time.perf_counter()
        fwd.times.append(t1 - t0)
        bwd.times.append(t2 - t1)
        fwd.iterations.append(its)
    return fwd, bwd
