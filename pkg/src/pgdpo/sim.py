"""Euler forward simulation of wealth and factors on the tape.

A whole chunk of Monte Carlo paths is simulated at once: wealth is an (M, 1)
Var, factors are (M, k), and every step applies batched 2-D primitives.  The
Brownian increments, per-path time grids, and all market constants enter as
constant leaves, so the only differentiable inputs are x0, y0, and whatever
parameters the policy loads.

Policies are callables
    policy(tape, step, t_col, X, Y) -> (M, n) Var
where t_col is the per-path time column as a plain array.  A policy decides
for itself whether it reads X and Y through the live Vars or through detached
copies; the training/costate stack always detaches (the policy is treated as
a control process along the path, so pathwise adjoints follow the open-loop
recursion exactly).

Path normals are a pure function of (seed, stream name, global path index):
they are drawn in fixed 256-path blocks from named substreams, so any
partition of paths across threads reproduces the same numbers.
"""

import numpy as np

from . import tape as T
from .market import assemble_and_factor
from .parallel import CHUNK
from .rng import substream

WEALTH_FLOOR = 0.1


class SimError(Exception):
    pass


class InitialState:
    __slots__ = ("t0", "x0", "y0")

    def __init__(self, t0, x0, y0):
        self.t0 = float(t0)
        self.x0 = float(x0)
        self.y0 = np.asarray(y0, dtype=np.float64).reshape(-1)


def state_bounds(p):
    """Factor sampling box: theta +- 3 diagonal sigma_Y, pooled across factors."""
    d = np.diag(p.sigma_Y)
    return float(np.min(p.theta_Y - 3.0 * d)), float(np.max(p.theta_Y + 3.0 * d))


def sample_initial(batch, p, rng):
    """t0 ~ U[0,T), x0 ~ U(0.1, 3.0), y0 components ~ U[Y_min, Y_max]."""
    if batch < 1:
        raise SimError("batch must be >= 1")
    lo, hi = state_bounds(p)
    t0 = rng.uniform(0.0, p.T, size=batch)
    x0 = rng.uniform(0.1, 3.0, size=batch)
    y0 = rng.uniform(lo, hi, size=(batch, p.k))
    return [InitialState(t0[i], x0[i], y0[i]) for i in range(batch)]


def stack_initial(states):
    t0 = np.array([s.t0 for s in states])[:, None]
    x0 = np.array([s.x0 for s in states])[:, None]
    y0 = np.stack([s.y0 for s in states])
    return t0, x0, y0


def draw_normals(seed, stream, start, count, steps, dim):
    """Standard normals for paths [start, start+count), block-keyed.

    Path i always receives row i % 256 of the block i // 256 draw, whatever
    range was asked for, which is what makes chunked multithreading exact.
    """
    lo_block = start // CHUNK
    hi_block = (start + count - 1) // CHUNK
    parts = []
    for blk in range(lo_block, hi_block + 1):
        z = substream(seed, stream, blk).standard_normal((CHUNK, steps, dim))
        a = max(start - blk * CHUNK, 0)
        b = min(start + count - blk * CHUNK, CHUNK)
        parts.append(z[a:b])
    return np.concatenate(parts, axis=0) if len(parts) > 1 else parts[0]


def utility_np(x, gamma):
    if gamma == 1.0:
        return np.log(x)
    return np.power(x, 1.0 - gamma) / (1.0 - gamma)


def utility_var(tape, x, gamma):
    if gamma == 1.0:
        return T.record(tape, "log", x)
    return T.record(tape, "mul",
                    T.record(tape, "pow", x, exponent=1.0 - gamma),
                    1.0 / (1.0 - gamma))


def marginal_utility_np(x, gamma):
    return np.power(x, -gamma)


class TrajectoryBatch:
    """One chunk of simulated paths living on one tape."""

    def __init__(self, tape, p, t0, dt, x0_var, y0_var):
        self.tape = tape
        self.p = p
        self.t0 = t0            # (M, 1) constants
        self.dt = dt            # (M, 1) constants
        self.x0 = x0_var        # (M, 1) leaf Var
        self.y0 = y0_var        # (M, k) leaf Var
        self.X = [x0_var]       # Vars over steps 0..N
        self.Y = [y0_var]
        self.pi = []            # Vars over steps 0..N-1
        self.C = []             # Vars (consumption), possibly empty
        self.dWX = []           # raw increments, plain arrays
        self.dWY = []
        self.J = None           # per-path reward Var, set by realized_reward

    @property
    def m(self):
        return self.t0.shape[0]

    @property
    def steps(self):
        return len(self.pi)

    def times(self, k):
        return self.t0 + k * self.dt


def detached(tape, var):
    """Constant copy of a Var's value, cutting the gradient path."""
    return tape.leaf(np.array(var.value, copy=True))


def mlp_policy(mlp, detach=True):
    """Policy closure over a TapeMlp; inputs (t, X, Y), detached by default."""

    def policy(tape, step, t_col, X, Y):
        tx = tape.leaf(t_col)
        xin = detached(tape, X) if detach else X
        yin = detached(tape, Y) if detach else Y
        return mlp.rows([tx, xin, yin])

    return policy


def constant_policy(weights):
    """pi identical on every path and step."""
    w = np.asarray(weights, dtype=np.float64).reshape(1, -1)

    def policy(tape, step, t_col, X, Y):
        return tape.leaf(np.repeat(w, t_col.shape[0], axis=0))

    return policy


def numpy_policy(fn):
    """Wrap pi = fn(t, x, y) acting on plain arrays; no gradient path."""

    def policy(tape, step, t_col, X, Y):
        return tape.leaf(fn(t_col, X.value, Y.value))

    return policy


def simulate(policy, states, N, p, tape, z, consumption=None):
    """Roll one chunk forward; z holds (M, N, n+k) standard normals."""
    if N < 1:
        raise SimError("need N >= 1")
    if isinstance(states, InitialState):
        states = [states]
    t0, x0, y0 = stack_initial(states)
    m = t0.shape[0]
    if z.shape != (m, N, p.n + p.k):
        raise SimError(f"normals shaped {z.shape}, want {(m, N, p.n + p.k)}")
    dt = (p.T - t0) / N
    sqdt = np.sqrt(dt)
    L = assemble_and_factor(p).L
    B1T = np.ascontiguousarray((p.sigma[:, None] * p.A).T)       # (k, n)
    quad = np.any(p.beta != 0.0)
    if quad:
        B2T = np.ascontiguousarray((p.sigma[:, None] * (p.A * p.beta[None, :])).T)
    ones_n = np.ones((p.n, 1))
    dt_k = np.repeat(dt, p.k, axis=1)
    sigY = p.sigma_Y

    traj = TrajectoryBatch(tape, p, t0, dt, tape.leaf(x0), tape.leaf(y0))
    X, Y = traj.x0, traj.y0

    for s in range(N):
        dW = (z[:, s, :] @ L.T) * sqdt
        dwx = np.ascontiguousarray(dW[:, :p.n])
        dwy = np.ascontiguousarray(dW[:, p.n:])
        traj.dWX.append(dwx)
        traj.dWY.append(dwy)

        prem = T.record(tape, "matmul", Y, tape.leaf(B1T))
        if quad:
            y2 = T.record(tape, "mul", Y, Y)
            prem = T.record(tape, "add", prem,
                            T.record(tape, "matmul", y2, tape.leaf(B2T)))

        pi = policy(tape, s, traj.times(s), X, Y)
        if pi.value.shape != (m, p.n):
            raise SimError("policy returned wrong shape")
        traj.pi.append(pi)

        drift = T.record(tape, "matmul", T.record(tape, "mul", pi, prem), ones_n)
        drift = T.record(tape, "mul", T.record(tape, "add", drift, p.r), dt)
        vol = T.record(tape, "matmul",
                       T.record(tape, "mul", pi, tape.leaf(dwx * p.sigma[None, :])),
                       ones_n)
        growth = T.record(tape, "add", T.record(tape, "add", drift, vol), 1.0)
        x_next = T.record(tape, "mul", X, growth)
        if consumption is not None:
            c = consumption(tape, s, traj.times(s), X, Y)
            traj.C.append(c)
            x_next = T.record(tape, "sub", x_next, T.record(tape, "mul", c, dt))
        if not np.all(np.isfinite(x_next.value)):
            raise SimError(f"non-finite wealth at step {s}: policy is exploding")
        X = T.record(tape, "clamp_min", x_next, floor=WEALTH_FLOOR)
        traj.X.append(X)

        ydrift = T.record(tape, "matmul",
                          T.record(tape, "sub", tape.leaf(np.tile(p.theta_Y, (m, 1))), Y),
                          tape.leaf(p.kappa_Y), tb=True)
        Y = T.record(tape, "add",
                     T.record(tape, "add", Y, T.record(tape, "mul", ydrift, dt_k)),
                     tape.leaf(dwy @ sigY.T))
        traj.Y.append(Y)

    if not np.all(np.isfinite(X.value)) or not np.all(np.isfinite(Y.value)):
        raise SimError("non-finite state at horizon: policy is exploding")
    return traj


def realized_reward(traj):
    """Per-path objective: running utility of consumption plus bequest term."""
    p = traj.p
    tape = traj.tape
    J = None
    if traj.C:
        for s, c in enumerate(traj.C):
            disc = np.exp(-p.delta * (s * traj.dt)) * traj.dt
            term = T.record(tape, "mul", utility_var(tape, c, p.gamma),
                            tape.leaf(disc))
            J = term if J is None else T.record(tape, "add", J, term)
    if p.kappa != 0.0:
        w = p.kappa * np.exp(-p.delta * (p.T - traj.t0[:, 0]))[:, None]
        bequest = T.record(tape, "mul", utility_var(tape, traj.X[-1], p.gamma),
                           tape.leaf(w))
        J = bequest if J is None else T.record(tape, "add", J, bequest)
    if J is None:
        raise SimError("objective is empty: no consumption and kappa = 0")
    traj.J = J
    return J


def mean_reward(traj):
    J = traj.J if traj.J is not None else realized_reward(traj)
    return T.record(traj.tape, "mul", T.record(traj.tape, "sum", J), 1.0 / traj.m)


def antithetic_states_and_normals(states, z):
    """Pair every path with its sign-flipped normals, sharing the start state."""
    return list(states) + list(states), np.concatenate([z, -z], axis=0)


def richardson_combine(J_h, J_h2, shared_increments):
    """First-order bias cancellation: 2 J_{h/2} - J_h."""
    if not shared_increments:
        raise SimError("refined grid must reuse the coarse increments")
    if isinstance(J_h, T.Var):
        tape = J_h.tape
        return T.record(tape, "sub", T.record(tape, "mul", J_h2, 2.0), J_h)
    return 2.0 * J_h2 - J_h


def coarsen_normals(z_fine):
    """Pairwise-summed normals: the coarse grid that shares fine increments."""
    m, n2, d = z_fine.shape
    if n2 % 2 != 0:
        raise SimError("fine grid must have an even number of steps")
    return (z_fine[:, 0::2, :] + z_fine[:, 1::2, :]) / np.sqrt(2.0)


def simulate_richardson(policy, states, N, p, tape, z_fine, consumption=None):
    """Coupled fine/coarse rollouts on one tape; N is the coarse step count."""
    z_c = coarsen_normals(z_fine)
    fine = simulate(policy, states, 2 * N, p, tape, z_fine, consumption)
    coarse = simulate(policy, states, N, p, tape, z_c, consumption)
    return fine, coarse


def simulate_np(policy_fn, t0, x0, y0, N, p, z):
    """Gradient-free rollout for big oracle batches; mirrors simulate().

    policy_fn(t_col, X, Y) acts on plain arrays and returns (M, n) weights.
    Returns (X_T, Y_T) as (M, 1) and (M, k) arrays.
    """
    t0 = np.asarray(t0, dtype=np.float64).reshape(-1, 1)
    X = np.asarray(x0, dtype=np.float64).reshape(-1, 1).copy()
    Y = np.asarray(y0, dtype=np.float64).reshape(t0.shape[0], -1).copy()
    m = X.shape[0]
    dt = (p.T - t0) / N
    sqdt = np.sqrt(dt)
    L = assemble_and_factor(p).L
    B1T = (p.sigma[:, None] * p.A).T
    quad = np.any(p.beta != 0.0)
    if quad:
        B2T = (p.sigma[:, None] * (p.A * p.beta[None, :])).T
    for s in range(N):
        dW = (z[:, s, :] @ L.T) * sqdt
        dwx = dW[:, :p.n]
        dwy = dW[:, p.n:]
        prem = Y @ B1T
        if quad:
            prem = prem + (Y * Y) @ B2T
        pi = policy_fn(t0 + s * dt, X, Y)
        drift = (np.sum(pi * prem, axis=1, keepdims=True) + p.r) * dt
        vol = np.sum(pi * (dwx * p.sigma[None, :]), axis=1, keepdims=True)
        X = np.maximum(X * (drift + vol + 1.0), WEALTH_FLOOR)
        Y = Y + ((p.theta_Y[None, :] - Y) @ p.kappa_Y.T) * dt + dwy @ p.sigma_Y.T
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise SimError("non-finite state in plain rollout")
    return X, Y


def myopic_control_variate(J, J_cv, mu_cv):
    """J - b (J_cv - mu_cv) with the regression coefficient fit on the batch."""
    J = np.asarray(J, dtype=np.float64).ravel()
    J_cv = np.asarray(J_cv, dtype=np.float64).ravel()
    var = float(np.var(J_cv))
    if var == 0.0:
        raise SimError("control variate has zero variance")
    b = float(np.mean((J - J.mean()) * (J_cv - J_cv.mean()))) / var
    return J - b * (J_cv - mu_cv), b


def dump_trajectories(path, traj):
    """CSV dump, one row per (path, step): path,k,t,X,Y_1..Y_k,pi_1..pi_n."""
    p = traj.p
    with open(path, "w") as f:
        heads = ["path", "k", "t", "X"]
        heads += [f"Y_{j + 1}" for j in range(p.k)]
        heads += [f"pi_{j + 1}" for j in range(p.n)]
        f.write(",".join(heads) + "\n")
        for i in range(traj.m):
            for s in range(traj.steps):
                t = traj.t0[i, 0] + s * traj.dt[i, 0]
                row = [str(i), str(s), repr(float(t)),
                       repr(float(traj.X[s].value[i, 0]))]
                row += [repr(float(v)) for v in traj.Y[s].value[i]]
                row += [repr(float(v)) for v in traj.pi[s].value[i]]
                f.write(",".join(row) + "\n")
