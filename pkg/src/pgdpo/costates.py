"""Pathwise costate estimation and first-order-condition projection.

The simulator rolls wealth forward with the policy's state inputs detached,
so the reward's backward pass recovers the adjoint process of the controlled
SDE: lambda_k is the gradient of realized utility with respect to X_k along
each path, and its conditional mean is the value-function derivative V_x at
(t_k, X_k, Y_k).  Averaging per-path adjoints over a Monte Carlo batch
started from a fixed state therefore estimates the costates at that state,
and a second backward pass through the first one supplies the mixed
sensitivities d(lambda)/dx and d(lambda)/dY needed by the optimality
conditions.

``project_policy`` turns a costate estimate into the candidate optimal
control: a myopic mean-variance term plus an intertemporal hedging term,
kept separate so their relative size can be studied.  ``project_consumption``
inverts marginal utility.  Two diagnostics guard the machinery:
``verify_bptt_recurrence`` checks the one-step adjoint recursion to floating
point accuracy on an existing trajectory batch, and
``verify_hamiltonian_drift`` compares the Monte Carlo drift of lambda
against the adjoint equation's prediction on independent batches.
"""

import json

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import sim
from . import tape as T
from .evaluation import PolicyCandidate
from .market import risk_premium
from .parallel import map_chunks

CURVATURE_FLOOR = 1e-12
SIGN_SIGMAS = 5.0


class CostateError(Exception):
    pass


class PolicyDecomposition:
    """Portfolio weights split into myopic and hedging components.

    ``total`` is always the sum of the two parts; it is computed on access
    so the decomposition identity cannot drift out of sync with the parts.
    """

    __slots__ = ("myopic", "hedging")

    def __init__(self, myopic, hedging):
        self.myopic = np.asarray(myopic, dtype=np.float64)
        self.hedging = np.asarray(hedging, dtype=np.float64)
        if self.myopic.shape != self.hedging.shape:
            raise CostateError("myopic and hedging components must share a shape")

    @property
    def total(self):
        return self.myopic + self.hedging

    def __repr__(self):
        return "PolicyDecomposition(myopic=%r, hedging=%r)" % (
            self.myopic.tolist(),
            self.hedging.tolist(),
        )


class CostateEstimate:
    """Monte Carlo costates at one state, with standard errors.

    lam        estimate of V_x                   (scalar)
    dlam_dx    estimate of V_xx                  (scalar)
    dlam_dy    estimate of V_xy                  (k,)
    eta        estimate of V_y                   (k,)

    Standard errors are computed over antithetic pair means when pairing is
    on, so the induced pair correlation cannot flatter them.
    """

    __slots__ = (
        "lam",
        "dlam_dx",
        "dlam_dy",
        "eta",
        "se_lam",
        "se_dlam_dx",
        "se_dlam_dy",
        "se_eta",
        "m_mc",
    )

    def __init__(self, lam, dlam_dx, dlam_dy, eta, se_lam, se_dlam_dx, se_dlam_dy, se_eta, m_mc):
        self.lam = float(lam)
        self.dlam_dx = float(dlam_dx)
        self.dlam_dy = np.asarray(dlam_dy, dtype=np.float64)
        self.eta = np.asarray(eta, dtype=np.float64)
        self.se_lam = float(se_lam)
        self.se_dlam_dx = float(se_dlam_dx)
        self.se_dlam_dy = np.asarray(se_dlam_dy, dtype=np.float64)
        self.se_eta = np.asarray(se_eta, dtype=np.float64)
        self.m_mc = int(m_mc)

    def to_dict(self):
        return {
            "lambda": self.lam,
            "dlambda_dx": self.dlam_dx,
            "dlambda_dy": self.dlam_dy.tolist(),
            "eta": self.eta.tolist(),
            "se_lambda": self.se_lam,
            "se_dlambda_dx": self.se_dlam_dx,
            "se_dlambda_dy": self.se_dlam_dy.tolist(),
            "se_eta": self.se_eta.tolist(),
            "m_mc": self.m_mc,
        }


def costate_samples(policy_maker, state, n_steps, p, z, consumption_maker=None):
    """Per-path costate samples from one simulated chunk.

    Returns (lam, dlam_dx, dlam_dy, eta) with shapes (m,), (m,), (m,k), (m,k).
    The first backward pass is differentiable and yields per-path lambda and
    eta; summing lambda and running a plain backward pass then gives the
    per-path sensitivities.  Paths are independent, so the gradient of the
    lambda total with respect to (x0, y0) is exactly the per-path Jacobian
    diagonal.
    """
    tape = T.Tape()
    m = z.shape[0]
    policy = policy_maker(tape)
    consumption = consumption_maker(tape) if consumption_maker is not None else None
    traj = sim.simulate(policy, [state] * m, n_steps, p, tape, z, consumption=consumption)
    j = sim.realized_reward(traj)
    j_sum = T.record(tape, "sum", j)
    first = T.backward(j_sum, [traj.x0, traj.y0], differentiable=True)
    lam_var = first[traj.x0]
    eta_var = first[traj.y0]
    lam_sum = T.record(tape, "sum", lam_var)
    second = T.backward(lam_sum, [traj.x0, traj.y0])
    return (
        lam_var.value[:, 0].copy(),
        second[traj.x0][:, 0].copy(),
        second[traj.y0].copy(),
        eta_var.value.copy(),
    )


def _mean_and_se(samples, paired):
    """Mean and standard error along axis 0; antithetic rows collapse to pair means."""
    samples = np.asarray(samples, dtype=np.float64)
    if paired:
        half = samples.shape[0] // 2
        samples = 0.5 * (samples[:half] + samples[half:])
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    if n < 2:
        return mean, np.full_like(np.asarray(mean, dtype=np.float64), np.inf)
    se = samples.std(axis=0, ddof=1) / np.sqrt(n)
    return mean, se


def estimate_costates(
    t,
    x,
    y,
    policy_maker,
    p,
    m_mc=10000,
    n_steps=20,
    seed=0,
    stream="costates",
    antithetic=True,
    threads=None,
    consumption_maker=None,
):
    """Estimate (V_x, V_xx, V_xy, V_y) at one state by simulation.

    policy_maker: callable(tape) -> policy closure for `sim.simulate`; a
    fresh tape is built per chunk, so the maker must be reusable.  Normal
    draws are keyed by global path index, which makes the result independent
    of chunking and thread count.  Raises if an estimated sign leaves the
    admissible region (lambda > 0, dlambda/dx < 0) by more than SIGN_SIGMAS
    standard errors.
    """
    if m_mc < 2:
        raise CostateError("m_mc must be at least 2")
    state = sim.InitialState(float(t), float(x), np.asarray(y, dtype=np.float64))
    if antithetic:
        if m_mc % 2:
            raise CostateError("antithetic estimation needs an even m_mc")
        m_draw = m_mc // 2
    else:
        m_draw = m_mc

    def work(lo, hi):
        z = sim.draw_normals(seed, stream, lo, hi - lo, n_steps, p.n + p.k)
        if antithetic:
            z = np.concatenate([z, -z], axis=0)
        return costate_samples(policy_maker, state, n_steps, p, z,
                               consumption_maker=consumption_maker)

    parts = map_chunks(work, m_draw, threads=threads)
    if antithetic:
        # Reassemble so the mirrored partner of row i sits at i + m_mc/2,
        # matching the single-chunk layout.
        cols = []
        for col in range(4):
            base = np.concatenate([q[col][: q[col].shape[0] // 2] for q in parts])
            mirr = np.concatenate([q[col][q[col].shape[0] // 2 :] for q in parts])
            cols.append(np.concatenate([base, mirr], axis=0))
    else:
        cols = [np.concatenate([q[col] for q in parts]) for col in range(4)]
    lam_s, dlx_s, dly_s, eta_s = cols

    lam, se_lam = _mean_and_se(lam_s, antithetic)
    dlx, se_dlx = _mean_and_se(dlx_s, antithetic)
    dly, se_dly = _mean_and_se(dly_s, antithetic)
    eta, se_eta = _mean_and_se(eta_s, antithetic)

    if lam <= 0.0 and -lam > SIGN_SIGMAS * se_lam:
        raise CostateError(
            "estimated lambda = %g is negative beyond %g standard errors" % (lam, SIGN_SIGMAS)
        )
    if dlx >= 0.0 and dlx > SIGN_SIGMAS * se_dlx:
        raise CostateError(
            "estimated dlambda/dx = %g is positive beyond %g standard errors" % (dlx, SIGN_SIGMAS)
        )
    return CostateEstimate(lam, dlx, dly, eta, se_lam, se_dlx, se_dly, se_eta, m_mc)


def _sigma_solver(p):
    factor = cho_factor(p.sigma_matrix(), lower=True)
    return lambda rhs: cho_solve(factor, rhs)


def project_on_grid(policy_maker, t, x, y, p, m_mc=2000, n_steps=10, seed=0,
                    stream="projection", antithetic=True, threads=None):
    """Costate-projected policy parts at a batch of states.

    t and x may be scalars or per-row arrays; y is (rows, k).  Each row gets
    an independent costate estimate whose normal draws are keyed by the row
    index, so the output depends on the state list and seed but not on thread
    count.  Rows are scheduled one per chunk because a single costate batch
    is already heavy.  Returns (myopic, hedging), each (rows, n).
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    rows = y.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (rows,))
    x = np.broadcast_to(np.asarray(x, dtype=np.float64).reshape(-1), (rows,))
    if m_mc < 2:
        raise CostateError("m_mc must be at least 2")
    if antithetic:
        if m_mc % 2:
            raise CostateError("antithetic estimation needs an even m_mc")
        m_draw = m_mc // 2
    else:
        m_draw = m_mc

    def work(lo, hi):
        out = []
        for i in range(lo, hi):
            z = sim.draw_normals(seed, "%s-%d" % (stream, i), 0, m_draw,
                                 n_steps, p.n + p.k)
            if antithetic:
                z = np.concatenate([z, -z], axis=0)
            state = sim.InitialState(float(t[i]), float(x[i]), y[i])
            lam_s, dlx_s, dly_s, _ = costate_samples(policy_maker, state,
                                                     n_steps, p, z)
            lam, se_lam = _mean_and_se(lam_s, antithetic)
            dlx, se_dlx = _mean_and_se(dlx_s, antithetic)
            dly, _ = _mean_and_se(dly_s, antithetic)
            if lam <= 0.0 and -lam > SIGN_SIGMAS * se_lam:
                raise CostateError(
                    "estimated lambda = %g at state row %d is negative beyond"
                    " %g standard errors" % (lam, i, SIGN_SIGMAS))
            if dlx >= 0.0 and dlx > SIGN_SIGMAS * se_dlx:
                raise CostateError(
                    "estimated dlambda/dx = %g at state row %d is positive"
                    " beyond %g standard errors" % (dlx, i, SIGN_SIGMAS))
            out.append((float(lam), float(dlx), dly))
        return out

    parts = [e for part in map_chunks(work, rows, threads=threads, chunk=1)
             for e in part]
    lam = np.array([e[0] for e in parts])
    dlx = np.array([e[1] for e in parts])
    dly = np.stack([e[2] for e in parts], axis=0)

    denom = x * dlx
    bad = np.abs(denom) < CURVATURE_FLOOR
    if np.any(bad):
        i = int(np.argmax(bad))
        raise CostateError(
            "curvature x*dlambda/dx = %g at state row %d is numerically"
            " singular" % (denom[i], i))
    solve = _sigma_solver(p)
    prem = np.stack([risk_premium(float(t[i]), y[i], p) for i in range(rows)],
                    axis=1)
    myopic = -(lam / denom)[None, :] * solve(prem)
    hedging = -(1.0 / denom)[None, :] * solve(p.cross_vol() @ dly.T)
    return np.ascontiguousarray(myopic.T), np.ascontiguousarray(hedging.T)


def projection_candidate(policy_maker, p, m_mc=2000, n_steps=10, seed=0,
                         stream="projection", antithetic=True, threads=None):
    """Wrap the grid projection as a candidate with decomposed parts.

    The three callables share one cache keyed by the state arrays' bytes, so
    an RMSE sweep that asks for total, myopic and hedging at the same grid
    pays for a single costate estimation.
    """
    cache = {}

    def lookup(t_col, X, Y):
        t_col = np.asarray(t_col, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        key = (t_col.tobytes(), X.tobytes(), Y.tobytes())
        if key not in cache:
            cache[key] = project_on_grid(
                policy_maker, t_col, X, Y, p, m_mc=m_mc, n_steps=n_steps,
                seed=seed, stream=stream, antithetic=antithetic,
                threads=threads)
        return cache[key]

    def total_fn(t_col, X, Y):
        myo, hed = lookup(t_col, X, Y)
        return myo + hed

    def myopic_fn(t_col, X, Y):
        return lookup(t_col, X, Y)[0]

    def hedging_fn(t_col, X, Y):
        return lookup(t_col, X, Y)[1]

    return PolicyCandidate(total_fn, myopic_fn, hedging_fn)


def project_policy(est, t, x, y, p):
    """Map a costate estimate to portfolio weights via the first-order condition.

    myopic  = -(lambda / (x dlambda/dx)) Sigma^{-1} (mu - r 1)
    hedging = -(1 / (x dlambda/dx)) Sigma^{-1} diag(sigma) rho sigma_Y dlambda/dY
    """
    denom = float(x) * est.dlam_dx
    if abs(denom) < CURVATURE_FLOOR:
        raise CostateError("curvature x*dlambda/dx = %g is numerically singular" % denom)
    solve = _sigma_solver(p)
    prem = risk_premium(float(t), y, p)
    myopic = -(est.lam / denom) * solve(prem)
    hedging = -(1.0 / denom) * solve(p.cross_vol() @ est.dlam_dy)
    return PolicyDecomposition(myopic, hedging)


def project_consumption(est, t, p):
    """Optimal consumption from the costate: C = (e^{delta t} lambda)^{-1/gamma}."""
    if est.lam <= 0.0:
        raise CostateError("consumption projection needs lambda > 0, got %g" % est.lam)
    return float((np.exp(p.delta * float(t)) * est.lam) ** (-1.0 / p.gamma))


def _growth_factors(traj):
    """Per-step (growth, live) arrays recomputed in the simulator's op order.

    growth is d(pre-clamp wealth)/d(X_k) holding the detached policy fixed;
    live is the clamp indicator (1 where the floor did not bind).  The
    arithmetic mirrors `sim.simulate` operation for operation so the arrays
    agree bitwise with the values the tape differentiated.
    """
    p = traj.p
    B1T = np.ascontiguousarray((p.sigma[:, None] * p.A).T)
    quad = np.any(p.beta != 0.0)
    if quad:
        B2T = np.ascontiguousarray((p.sigma[:, None] * (p.A * p.beta[None, :])).T)
    ones_n = np.ones((p.n, 1))
    out = []
    for k in range(traj.steps):
        Y = traj.Y[k].value
        pi = traj.pi[k].value
        prem = Y @ B1T
        if quad:
            prem = prem + (Y * Y) @ B2T
        drift = ((pi * prem) @ ones_n + p.r) * traj.dt
        vol = (pi * (traj.dWX[k] * p.sigma[None, :])) @ ones_n
        growth = (drift + vol) + 1.0
        x_pre = traj.X[k].value * growth
        if traj.C:
            x_pre = x_pre - traj.C[k].value * traj.dt
        live = (x_pre > sim.WEALTH_FLOOR).astype(np.float64)
        out.append((growth, live))
    return out


def verify_bptt_recurrence(traj, dc_dx=None):
    """Check the discrete adjoint recursion on an existing trajectory batch.

    For each step k the reward gradients must satisfy

        lambda_k = live_k lambda_{k+1} growth_k
                   + dt [e^{-delta(t_k - t0)} U'(C_k) - live_k lambda_{k+1}] dC/dX

    with growth_k = 1 + (r + pi'(mu - r1)) dt + pi' diag(sigma) dW and live_k
    the wealth-floor indicator.  Returns the maximum residual relative to
    max(1, |lambda_{k+1}|).  With consumption, per-step dC/dX arrays must be
    supplied; the batch must not have been backwarded yet.
    """
    if traj.C and dc_dx is None:
        raise CostateError("consumption trajectories need dc_dx arrays for the recursion check")
    tape = traj.tape
    j = traj.J if traj.J is not None else sim.realized_reward(traj)
    j_sum = T.record(tape, "sum", j)
    grads = T.backward(j_sum, list(traj.X))
    lams = [grads[xv] for xv in traj.X]

    p = traj.p
    worst = 0.0
    for k, (growth, live) in enumerate(_growth_factors(traj)):
        lam_next = lams[k + 1]
        pred = (live * lam_next) * growth
        if traj.C:
            disc = np.exp(-p.delta * (k * traj.dt))
            mu_c = sim.marginal_utility_np(traj.C[k].value, p.gamma)
            pred = pred + (disc * mu_c - live * lam_next) * dc_dx[k] * traj.dt
        resid = np.abs(lams[k] - pred) / np.maximum(1.0, np.abs(lam_next))
        worst = max(worst, float(resid.max()))
    return worst


def step_adjoints(policy_maker, t, x, y, m, n_steps, p, seed, stream="drift-emp"):
    """Per-path adjoints at steps 0 and 1 for paths started at one state.

    Returns (lambda_0, lambda_1, pi_0) where pi_0 is the (deterministic)
    step-0 control row.
    """
    tape = T.Tape()
    state = sim.InitialState(float(t), float(x), np.asarray(y, dtype=np.float64))
    z = sim.draw_normals(seed, stream, 0, m, n_steps, p.n + p.k)
    policy = policy_maker(tape)
    traj = sim.simulate(policy, [state] * m, n_steps, p, tape, z)
    j = sim.realized_reward(traj)
    j_sum = T.record(tape, "sum", j)
    grads = T.backward(j_sum, [traj.X[0], traj.X[1]])
    pi0 = traj.pi[0].value[0].copy()
    return grads[traj.X[0]][:, 0].copy(), grads[traj.X[1]][:, 0].copy(), pi0


def verify_hamiltonian_drift(t, x, y, policy_maker, p, m=100000, n_steps=20, seed=0):
    """Compare the simulated drift of lambda with the adjoint-equation value.

    Empirical side: E[lambda_0 - lambda_1]/dt over paths from (t, x, y).
    Analytic side, from an independent costate batch at the same state:

        lambda (r + pi'(mu - r1)) + x (pi' Sigma pi) dlambda/dx
            + pi' diag(sigma) rho sigma_Y dlambda/dY

    Returns (empirical, analytic, z_score) with the batch standard errors
    combined in quadrature.
    """
    y = np.asarray(y, dtype=np.float64)
    lam0, lam1, pi0 = step_adjoints(policy_maker, t, x, y, m, n_steps, p, seed,
                                    stream="drift-emp")
    dt = (p.T - float(t)) / n_steps
    emp, se_emp = _mean_and_se((lam0 - lam1) / dt, False)

    est = estimate_costates(t, x, y, policy_maker, p, m_mc=m, n_steps=n_steps,
                            seed=seed + 1, stream="drift-ana")
    prem = risk_premium(float(t), y, p)
    a = p.r + pi0 @ prem
    quad = float(x) * (pi0 @ p.sigma_matrix() @ pi0)
    cross = pi0 @ p.cross_vol()
    analytic = est.lam * a + est.dlam_dx * quad + cross @ est.dlam_dy
    var_ana = (a * est.se_lam) ** 2 + (quad * est.se_dlam_dx) ** 2
    var_ana += float(np.sum((cross * est.se_dlam_dy) ** 2))
    z = (emp - analytic) / np.sqrt(se_emp**2 + var_ana)
    return float(emp), float(analytic), float(z)


def costate_grid_json(policy_maker, p, t_grid, y_grid, factor_index=0, x=1.0, **kwargs):
    """Costate estimates over a (t, y_i) grid, serialized for inspection.

    Off-axis factors sit at their long-run means.  kwargs pass through to
    `estimate_costates` (m_mc, n_steps, seed, threads, ...).
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    y_grid = np.asarray(y_grid, dtype=np.float64)
    rows = []
    for ti in t_grid:
        for yv in y_grid:
            y = p.theta_Y.copy()
            y[factor_index] = yv
            est = estimate_costates(float(ti), x, y, policy_maker, p, **kwargs)
            entry = est.to_dict()
            entry["t"] = float(ti)
            entry["y"] = float(yv)
            rows.append(entry)
    payload = {
        "x": float(x),
        "factor_index": int(factor_index),
        "t_grid": t_grid.tolist(),
        "y_grid": y_grid.tolist(),
        "estimates": rows,
    }
    return json.dumps(payload, indent=2, sort_keys=True)
