import numpy as np
import pytest

from pgdpo import market, riccati, sim
import oracles


def ko_params(gamma=2.0, rho=-0.4, sigma_y=0.3, kappa=2.0, theta=0.3,
              sigma=0.2, A=1.0, T=1.5):
    return market.MarketParams(
        n=1, k=1, r=0.03, kappa_Y=[[kappa]], theta_Y=[theta],
        sigma_Y=[[sigma_y]], sigma=[sigma], A=[[A]], Psi=np.eye(1),
        Phi=np.eye(1), rho=[[rho]], beta=[0.0], gamma=gamma, delta=0.0,
        kappa=1.0, T=T)


def rk4_scalar_coeffs(p, tau, steps=20000):
    """Third route: fixed-step RK4 on the scalar (b, c) system."""
    gamma, A = p.gamma, p.A[0, 0]
    kap, th = p.kappa_Y[0, 0], p.theta_Y[0]
    sy, rho = p.sigma_Y[0, 0], p.rho[0, 0]
    q0 = (1 - gamma) / (2 * gamma) * A * A
    q1 = 2 * ((1 - gamma) / gamma) * A * rho * sy - 2 * kap
    q2 = 2 * sy * sy * (gamma + (1 - gamma) * rho * rho) / gamma

    def f(u):
        b, c = u
        return np.array([(q1 / 2 + q2 * c) * b + 2 * kap * th * c,
                         q0 + q1 * c + q2 * c * c])

    u = np.zeros(2)
    h = tau / steps
    for _ in range(steps):
        k1 = f(u)
        k2 = f(u + 0.5 * h * k1)
        k3 = f(u + 0.5 * h * k2)
        k4 = f(u + h * k3)
        u = u + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return u[0], u[1]


def test_terminal_condition():
    p = ko_params()
    sol = riccati.solve_riccati(p)
    a, b, c = sol.coeffs(0.0)
    assert a == 0.0 and np.all(b == 0.0) and np.all(c == 0.0)


def test_closed_form_matches_rk4_and_test_oracle():
    p = ko_params()
    for tau in (0.25, 0.8, 1.5):
        b_cf, c_cf = riccati.kim_omberg_coeffs(p, tau)
        b_rk, c_rk = rk4_scalar_coeffs(p, tau)
        assert abs(b_cf - b_rk) <= 1e-9
        assert abs(c_cf - c_rk) <= 1e-9
        _, b_o, c_o = oracles.kim_omberg_scalar(
            p.gamma, p.r, p.A[0, 0], p.kappa_Y[0, 0], p.theta_Y[0],
            p.sigma_Y[0, 0], p.rho[0, 0], tau)
        assert abs(b_cf - b_o) <= 1e-12
        assert abs(c_cf - c_o) <= 1e-12


def test_riccati_matches_closed_form_on_grid():
    p = ko_params()
    sol = riccati.solve_riccati(p)
    lo, hi = sim.state_bounds(p)
    worst = 0.0
    for t in np.linspace(0.0, p.T, 20):
        for y in np.linspace(lo, hi, 100):
            got = riccati.benchmark_policy(sol, t, 1.0, [y], p).total[0]
            want = riccati.kim_omberg_scalar(t, y, p).total[0]
            worst = max(worst, abs(got - want))
    assert worst <= 1e-8


def test_riccati_coefficient_curves_match_closed_form():
    p = ko_params(gamma=3.0, rho=0.15, sigma_y=0.45, kappa=2.5)
    sol = riccati.solve_riccati(p)
    for tau in np.linspace(0.0, p.T, 37):
        b_cf, c_cf = riccati.kim_omberg_coeffs(p, tau)
        _, b, c = sol.coeffs(tau)
        assert abs(b[0] - b_cf) <= 1e-8
        assert abs(c[0, 0] - c_cf) <= 1e-8


def test_value_matches_monte_carlo():
    p = ko_params()
    sol = riccati.solve_riccati(p)
    v = sol.value(0.3, 1.2, [0.35])
    mc, se = riccati.mc_value_estimate(sol, p, 0.3, 1.2, [0.35],
                                       paths=200000, steps=200, seed=11)
    assert abs(v - mc) <= 3.0 * se


def test_value_log_utility_matches_monte_carlo():
    p = ko_params(gamma=1.0)
    sol = riccati.solve_riccati(p)
    assert sol.log_form
    v = sol.value(0.0, 2.0, [0.3])
    mc, se = riccati.mc_value_estimate(sol, p, 0.0, 2.0, [0.3],
                                       paths=200000, steps=200, seed=12)
    assert abs(v - mc) <= 3.0 * se


def test_zero_cross_correlation_kills_hedging():
    p = ko_params(rho=0.0)
    sol = riccati.solve_riccati(p)
    _, b, c = sol.coeffs(1.0)
    assert abs(c[0, 0]) > 1e-4  # curves themselves are alive
    for t in (0.0, 0.7, 1.4):
        for y in (-0.1, 0.3, 0.8):
            d = riccati.benchmark_policy(sol, t, 1.0, [y], p)
            assert np.all(d.hedging == 0.0)


def test_log_utility_hedging_identically_zero():
    p = ko_params(gamma=1.0, rho=-0.5)
    sol = riccati.solve_riccati(p)
    for t in (0.0, 0.75):
        for y in (0.0, 0.4):
            d = riccati.benchmark_policy(sol, t, 1.0, [y], p)
            assert np.all(d.hedging == 0.0)
    d = riccati.kim_omberg_scalar(0.5, 0.3, p)
    assert d.hedging[0] == 0.0


def test_policy_x_independent():
    p = ko_params()
    sol = riccati.solve_riccati(p)
    d1 = riccati.benchmark_policy(sol, 0.5, 0.2, [0.4], p)
    d2 = riccati.benchmark_policy(sol, 0.5, 250.0, [0.4], p)
    assert np.array_equal(d1.total, d2.total)


def test_hedging_vanishes_at_maturity():
    p = ko_params(rho=-0.6)
    sol = riccati.solve_riccati(p)
    for y in np.linspace(-0.5, 1.0, 7):
        h1 = riccati.benchmark_policy(sol, p.T, 1.0, [y], p).hedging[0]
        assert abs(h1) <= 1e-12
        h2 = riccati.benchmark_policy(sol, p.T - 0.01, 1.0, [y], p).hedging[0]
        assert abs(h2) <= 0.05


def test_multifactor_solution_consistency():
    # k=3: myopic formula plus Monte Carlo value agreement
    p = market.generate_params(2, 3, seed=42)
    sol = riccati.solve_riccati(p)
    y = p.theta_Y + 0.1
    d = riccati.benchmark_policy(sol, 0.4, 1.0, y, p)
    myo_direct = market.sigma_matrix_and_solve(p, market.risk_premium(0.4, y, p)) / p.gamma
    assert np.allclose(d.myopic, myo_direct, atol=1e-12)
    mc, se = riccati.mc_value_estimate(sol, p, 0.4, 1.0, y,
                                       paths=200000, steps=100, seed=13)
    assert abs(sol.value(0.4, 1.0, y) - mc) <= 3.0 * se


def test_grid_node_exactness_and_interpolation():
    p = ko_params()
    sol = riccati.solve_riccati(p)
    grid = riccati.build_grid(sol, p, t_points=20, y_points=100)
    for it in (0, 7, 19):
        for iy in (0, 42, 99):
            stored = grid.slices[0]["total"][it, iy]
            got = grid.interp(0, grid.t_grid[it], grid.y_grid[iy])
            assert np.array_equal(got, stored)
    # myopic is linear in y: midpoint interpolation is exact up to rounding
    ymid = 0.5 * (grid.y_grid[10] + grid.y_grid[11])
    want = riccati.benchmark_policy(sol, grid.t_grid[0], 1.0, [ymid], p).myopic
    got = grid.interp(0, grid.t_grid[0], ymid, field="myopic")
    assert np.allclose(got, want, atol=1e-12)
    # dense comparison against direct evaluation
    worst = 0.0
    for t in np.linspace(0.0, p.T, 9):
        for y in np.linspace(grid.y_grid[0], grid.y_grid[-1], 31):
            direct = riccati.benchmark_policy(sol, t, 1.0, [y], p).total
            worst = max(worst, abs(grid.interp(0, t, y)[0] - direct[0]))
    assert worst <= 1e-3


def test_grid_json_export_fields():
    import json
    p = ko_params()
    sol = riccati.solve_riccati(p)
    grid = riccati.build_grid(sol, p, t_points=3, y_points=4)
    doc = json.loads(riccati.grid_to_json(grid, 0))
    assert set(doc) == {"t_grid", "y_grid", "slice_index", "total", "myopic", "hedging"}
    assert doc["slice_index"] == 0
    assert np.asarray(doc["total"]).shape == (3, 4, 1)


def test_rejects_nonaffine_and_blowup():
    p = market.with_beta_norm(market.generate_params(1, 1, seed=2), 1.0)
    with pytest.raises(riccati.RiccatiError):
        riccati.solve_riccati(p)
    bad = ko_params(gamma=0.5, kappa=0.01, sigma_y=1.0, A=2.0, rho=0.0)
    with pytest.raises(riccati.RiccatiError):
        riccati.kim_omberg_coeffs(bad, 1.0)
    with pytest.raises(riccati.RiccatiError):
        riccati.solve_riccati(bad)


def test_tau_outside_range_rejected():
    p = ko_params()
    sol = riccati.solve_riccati(p)
    with pytest.raises(riccati.RiccatiError):
        sol.coeffs(p.T + 1.0)
