"""Semi-analytic benchmark for the affine terminal-wealth problem.

With beta = 0 the value function is exponential-quadratic in the factors,
V(t,x,y) = U(x) exp(a + b'y + y'cy) with tau = T - t, and (a, b, c) satisfy
an ODE system with a matrix Riccati core.  Substituting the ansatz into the
HJB equation gives, writing M = diag(sigma) A, D = diag(sigma) rho sigma_Y,
Xi = sigma_Y Phi sigma_Y', h = kappa_Y theta_Y, q = (1-gamma)/gamma,
G = M + 2 D c and g0 = D b:

    a' = (1-gamma) r + tr(Xi c) + (q/2) g0' Sigma^{-1} g0 + h'b + b'Xi b / 2
    b' = q G' Sigma^{-1} g0 + 2 c h - kappa_Y' b + 2 c Xi b
    c' = (q/2) G' Sigma^{-1} G - (kappa_Y' c + c kappa_Y) + 2 c Xi c

integrated from a(0)=b(0)=c(0)=0.  Log utility uses the additive ansatz
V = log x + a + b'y + y'cy instead, where the mixed derivative V_xy vanishes,
so the optimal policy is purely myopic and the curves only matter for value
checks:

    a' = r + h'b + tr(Xi c)
    b' = 2 c h - kappa_Y' b
    c' = M' Sigma^{-1} M / 2 - (kappa_Y' c + c kappa_Y)

The optimal weights are pi = (1/gamma) Sigma^{-1} [M y + D (b + 2 c y)]; the
first term is the myopic demand, the second the intertemporal hedge.  None of
this is printed in the source material for the general model, so two
independent oracles guard the derivation: the scalar closed form below and a
brute-force Monte Carlo value estimate.
"""

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import cho_factor, cho_solve

from . import sim
from .costates import PolicyDecomposition

ATOL = 1e-10
RTOL = 1e-8


class RiccatiError(Exception):
    pass


def _pack(a, b, c, k):
    return np.concatenate([[a], b, c.ravel()])


def _unpack(u, k):
    return u[0], u[1:1 + k], u[1 + k:].reshape(k, k)


def _rhs_factory(p):
    k = p.k
    M = p.premium_loading()            # (n, k)
    D = p.cross_vol()                  # (n, k)
    Xi = p.sigma_Y @ p.Phi @ p.sigma_Y.T
    h = p.kappa_Y @ p.theta_Y
    cf = cho_factor(p.sigma_matrix(), lower=True)
    solve = lambda rhs: cho_solve(cf, rhs)
    gamma = p.gamma

    if gamma == 1.0:
        SiM = solve(M)

        def rhs(tau, u):
            a, b, c = _unpack(u, k)
            da = p.r + h @ b + np.trace(Xi @ c)
            db = 2.0 * (c @ h) - p.kappa_Y.T @ b
            dc = 0.5 * (M.T @ SiM) - (p.kappa_Y.T @ c + c @ p.kappa_Y)
            return _pack(da, db, dc, k)

        return rhs

    q = (1.0 - gamma) / gamma

    def rhs(tau, u):
        a, b, c = _unpack(u, k)
        G = M + 2.0 * (D @ c)
        g0 = D @ b
        Sg0 = solve(g0)
        SG = solve(G)
        da = ((1.0 - gamma) * p.r + np.trace(Xi @ c)
              + 0.5 * q * (g0 @ Sg0) + h @ b + 0.5 * (b @ (Xi @ b)))
        db = q * (G.T @ Sg0) + 2.0 * (c @ h) - p.kappa_Y.T @ b + 2.0 * (c @ (Xi @ b))
        dc = 0.5 * q * (G.T @ SG) - (p.kappa_Y.T @ c + c @ p.kappa_Y) + 2.0 * (c @ (Xi @ c))
        return _pack(da, db, dc, k)

    return rhs


class RiccatiSolution:
    """Coefficient curves on an ascending tau grid with Hermite evaluation."""

    def __init__(self, p, tau_grid, a, b, c, da, db, dc):
        self.p = p
        self.log_form = p.gamma == 1.0
        self.tau_grid = tau_grid
        self.a, self.b, self.c = a, b, c
        self.da, self.db, self.dc = da, db, dc

    def coeffs(self, tau):
        """Cubic-Hermite interpolated (a, b, c) at time-to-go tau."""
        g = self.tau_grid
        if tau < -1e-12 or tau > g[-1] + 1e-9:
            raise RiccatiError(f"tau {tau} outside [0, {g[-1]}]")
        tau = min(max(tau, 0.0), g[-1])
        i = min(np.searchsorted(g, tau, side="right") - 1, len(g) - 2)
        i = max(i, 0)
        hstep = g[i + 1] - g[i]
        s = (tau - g[i]) / hstep
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)

        def hermite(y0, d0, y1, d1):
            return h00 * y0 + h10 * hstep * d0 + h01 * y1 + h11 * hstep * d1

        a = hermite(self.a[i], self.da[i], self.a[i + 1], self.da[i + 1])
        b = hermite(self.b[i], self.db[i], self.b[i + 1], self.db[i + 1])
        c = hermite(self.c[i], self.dc[i], self.c[i + 1], self.dc[i + 1])
        return a, b, 0.5 * (c + c.T)

    def value(self, t, x, y):
        a, b, c = self.coeffs(self.p.T - t)
        y = np.asarray(y, dtype=np.float64)
        quad = a + b @ y + y @ (c @ y)
        if self.log_form:
            return np.log(x) + quad
        return sim.utility_np(x, self.p.gamma) * np.exp(quad)


def solve_riccati(p, grid_points=1025):
    """Backward coefficient integration; adaptive RK with Radau fallback."""
    if np.any(p.beta != 0.0):
        raise RiccatiError("benchmark covers the affine model only (beta = 0)")
    k = p.k
    rhs = _rhs_factory(p)
    tau_grid = np.linspace(0.0, p.T, grid_points)
    u0 = _pack(0.0, np.zeros(k), np.zeros((k, k)), k)
    result = solve_ivp(rhs, (0.0, p.T), u0, method="RK45",
                       t_eval=tau_grid, atol=ATOL, rtol=RTOL)
    if not result.success:
        result = solve_ivp(rhs, (0.0, p.T), u0, method="Radau",
                           t_eval=tau_grid, atol=ATOL, rtol=RTOL)
    if not result.success or not np.all(np.isfinite(result.y)):
        raise RiccatiError(
            "coefficient integration failed (finite-time blow-up for these parameters)")
    G = len(tau_grid)
    a = np.empty(G)
    b = np.empty((G, k))
    c = np.empty((G, k, k))
    da = np.empty(G)
    db = np.empty((G, k))
    dc = np.empty((G, k, k))
    for i in range(G):
        a[i], b[i], ci = _unpack(result.y[:, i], k)
        c[i] = 0.5 * (ci + ci.T)
        da[i], db[i], dci = _unpack(rhs(tau_grid[i], result.y[:, i]), k)
        dc[i] = 0.5 * (dci + dci.T)
    return RiccatiSolution(p, tau_grid, a, b, c, da, db, dc)


def benchmark_policy(sol, t, x, y, p):
    """Optimal weights at (t, y); x-independent under CRRA."""
    y = np.asarray(y, dtype=np.float64)
    cf = cho_factor(p.sigma_matrix(), lower=True)
    myopic = cho_solve(cf, p.premium_loading() @ y) / p.gamma
    if sol.log_form:
        return PolicyDecomposition(myopic, np.zeros(p.n))
    _, b, c = sol.coeffs(p.T - t)
    hedge = cho_solve(cf, p.cross_vol() @ (b + 2.0 * (c @ y))) / p.gamma
    return PolicyDecomposition(myopic, hedge)


def kim_omberg_coeffs(p, tau):
    """Closed-form scalar (b, c) for n = k = 1; the ODE bypass oracle."""
    if p.n != 1 or p.k != 1:
        raise RiccatiError("closed form needs n = k = 1")
    gamma = p.gamma
    A = p.A[0, 0]
    kap = p.kappa_Y[0, 0]
    th = p.theta_Y[0]
    sy = p.sigma_Y[0, 0]
    rho = p.rho[0, 0]
    q0 = (1.0 - gamma) / (2.0 * gamma) * A * A
    q1 = 2.0 * ((1.0 - gamma) / gamma) * A * rho * sy - 2.0 * kap
    q2 = 2.0 * sy * sy * (gamma + (1.0 - gamma) * rho * rho) / gamma
    disc = q1 * q1 - 4.0 * q0 * q2
    if disc <= 0.0:
        raise RiccatiError("closed form hits finite-time blow-up (discriminant <= 0)")
    eta = np.sqrt(disc)
    ch = np.cosh(eta * tau / 2.0)
    sh = np.sinh(eta * tau / 2.0)
    den = eta * ch - q1 * sh
    c = 2.0 * q0 * sh / den
    b = 4.0 * q0 * (2.0 * kap * th) * (ch - 1.0) / (eta * den)
    return b, c


def kim_omberg_scalar(t, y, p):
    """Scalar decomposition straight from the closed form, no integration."""
    if p.gamma == 1.0:
        myo = p.A[0, 0] * float(y) / (p.gamma * p.sigma[0])
        return PolicyDecomposition([myo], [0.0])
    b, c = kim_omberg_coeffs(p, p.T - t)
    sg = p.sigma[0]
    myo = p.A[0, 0] * float(y) / (p.gamma * sg)
    hedge = p.rho[0, 0] * p.sigma_Y[0, 0] * (b + 2.0 * c * float(y)) / (p.gamma * sg)
    return PolicyDecomposition([myo], [hedge])


class BenchmarkGrid:
    """Per-factor (t, y_j) policy slices with bilinear interpolation."""

    def __init__(self, p, t_grid, y_grid, slices):
        self.p = p
        self.t_grid = t_grid
        self.y_grid = y_grid
        self.slices = slices  # per factor j: dict of (nt, ny, n) arrays

    def interp(self, j, t, y, field="total"):
        tg, yg = self.t_grid, self.y_grid
        data = self.slices[j][field]
        t = np.asarray(t, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        scalar = t.ndim == 0 and y.ndim == 0
        t, y = np.broadcast_arrays(np.atleast_1d(t), np.atleast_1d(y))
        it = np.clip(np.searchsorted(tg, t, side="right") - 1, 0, len(tg) - 2)
        iy = np.clip(np.searchsorted(yg, y, side="right") - 1, 0, len(yg) - 2)
        ft = ((t - tg[it]) / (tg[it + 1] - tg[it]))[:, None]
        fy = ((y - yg[iy]) / (yg[iy + 1] - yg[iy]))[:, None]
        out = ((1 - ft) * (1 - fy) * data[it, iy]
               + ft * (1 - fy) * data[it + 1, iy]
               + (1 - ft) * fy * data[it, iy + 1]
               + ft * fy * data[it + 1, iy + 1])
        return out[0] if scalar else out


def build_grid(sol, p, t_points=20, y_points=100):
    if t_points < 2 or y_points < 2:
        raise RiccatiError("grid needs at least 2 points per axis")
    lo, hi = sim.state_bounds(p)
    t_grid = np.linspace(0.0, p.T, t_points)
    y_grid = np.linspace(lo, hi, y_points)
    slices = []
    for j in range(p.k):
        tot = np.empty((t_points, y_points, p.n))
        myo = np.empty((t_points, y_points, p.n))
        hed = np.empty((t_points, y_points, p.n))
        for it, t in enumerate(t_grid):
            for iy, yv in enumerate(y_grid):
                y = p.theta_Y.copy()
                y[j] = yv
                d = benchmark_policy(sol, t, 1.0, y, p)
                tot[it, iy] = d.total
                myo[it, iy] = d.myopic
                hed[it, iy] = d.hedging
        slices.append({"total": tot, "myopic": myo, "hedging": hed})
    return BenchmarkGrid(p, t_grid, y_grid, slices)


def grid_to_json(grid, j):
    """Plot-ready export of one factor slice."""
    import json
    s = grid.slices[j]
    return json.dumps({
        "t_grid": grid.t_grid.tolist(),
        "y_grid": grid.y_grid.tolist(),
        "slice_index": j,
        "total": s["total"].tolist(),
        "myopic": s["myopic"].tolist(),
        "hedging": s["hedging"].tolist(),
    }, sort_keys=True)


def mc_value_estimate(sol, p, t, x, y, paths=10 ** 6, steps=200, seed=7,
                      chunk=131072):
    """Monte Carlo E[U(X_T)] under the benchmark policy from one state.

    Returns (mean, standard error); the oracle side of the value check.
    """
    y = np.asarray(y, dtype=np.float64)
    cf = cho_factor(p.sigma_matrix(), lower=True)
    Mload = p.premium_loading()
    D = p.cross_vol()
    horizon = p.T - t
    scaled = p.replace(T=horizon)  # reuse (T - t0)/N stepping with t0 = 0

    def pol_shift(t_col, X, Y):
        # every path shares the clock, so one coefficient lookup per step
        myo = cho_solve(cf, (Y @ Mload.T).T).T / p.gamma
        if sol.log_form:
            return myo
        _, b, c = sol.coeffs(p.T - (t_col[0, 0] + t))
        hed = cho_solve(cf, D @ (b[None, :] + 2.0 * (Y @ c.T)).T).T / p.gamma
        return myo + hed

    vals = []
    remaining = paths
    start = 0

    while remaining > 0:
        m = min(chunk, remaining)
        z = sim.draw_normals(seed, "benchmark-value", start, m, steps, p.n + p.k)
        X_T, _ = sim.simulate_np(pol_shift, np.zeros(m), np.full(m, float(x)),
                                 np.tile(y, (m, 1)), steps, scaled, z)
        vals.append(sim.utility_np(X_T[:, 0], p.gamma))
        start += m
        remaining -= m
    u = np.concatenate(vals)
    return float(u.mean()), float(u.std(ddof=1) / np.sqrt(len(u)))
