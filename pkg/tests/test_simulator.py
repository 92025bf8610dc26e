import numpy as np
import pytest

from pgdpo import market, sim
from pgdpo import tape as T
from pgdpo.rng import substream


def flat_params(sigma_y=0.0, theta=0.3, gamma=2.0, rho=0.0, n=1, k=1):
    return market.MarketParams(
        n=n, k=k, r=0.03, kappa_Y=np.diag(np.full(k, 2.0)),
        theta_Y=np.full(k, theta), sigma_Y=np.diag(np.full(k, sigma_y)),
        sigma=np.full(n, 0.2), A=np.full((n, k), 1.0 / k),
        Psi=np.eye(n), Phi=np.eye(k), rho=np.full((n, k), rho),
        beta=np.zeros(k), gamma=gamma, delta=0.0, kappa=1.0, T=1.5)


def run_chunked(policy, init, N, p, seed, stream, m_total, antithetic=False,
                chunk=512):
    vals = []
    start = 0
    while start < m_total:
        m = min(chunk, m_total - start)
        z = sim.draw_normals(seed, stream, start, m, N, p.n + p.k)
        states = init if isinstance(init, list) else [init] * m
        states = states[start:start + m] if isinstance(init, list) else states
        if antithetic:
            states, z = sim.antithetic_states_and_normals(states, z)
        tape = T.Tape()
        traj = sim.simulate(policy, states, N, p, tape, z)
        vals.append(sim.realized_reward(traj).value.ravel())
        start += m
    return np.concatenate(vals)


def test_sample_initial_ranges_and_mean():
    p = market.generate_params(2, 2, seed=4)
    states = sim.sample_initial(10 ** 6, p, substream(9, "init"))
    t0 = np.array([s.t0 for s in states])
    x0 = np.array([s.x0 for s in states])
    y0 = np.stack([s.y0 for s in states])
    assert t0.max() < p.T and t0.min() >= 0.0
    assert x0.min() >= 0.1 and x0.max() <= 3.0
    lo, hi = sim.state_bounds(p)
    assert y0.min() >= lo and y0.max() <= hi
    se = (hi - lo) / np.sqrt(12.0) / np.sqrt(y0.size)
    assert abs(y0.mean() - 0.5 * (lo + hi)) <= 3.0 * se


def test_sample_initial_collapsed_factor_range():
    p = flat_params(sigma_y=0.0, k=1).replace(
        theta_Y=[0.25], kappa_Y=[[2.0]], sigma_Y=[[0.0]])
    states = sim.sample_initial(1000, p, substream(3, "init"))
    y = np.array([s.y0[0] for s in states])
    assert np.all(y == 0.25)


def test_zero_policy_compounds_exactly():
    p = flat_params()
    m = 8
    rng = substream(1, "z")
    states = sim.sample_initial(m, p, substream(2, "i"))
    N = 12
    z = rng.standard_normal((m, N, 2))
    tape = T.Tape()
    traj = sim.simulate(sim.constant_policy([0.0]), states, N, p, tape, z)
    x = np.array([[s.x0] for s in states])
    for _ in range(N):
        x = x * (traj.dt * p.r + 1.0)
    assert np.array_equal(traj.X[-1].value, x)


def test_factors_fixed_at_long_run_mean_without_noise():
    p = flat_params(sigma_y=0.0)
    init = sim.InitialState(0.0, 1.0, [0.3])
    z = substream(5, "z").standard_normal((1, 10, 2))
    tape = T.Tape()
    traj = sim.simulate(sim.constant_policy([0.5]), init, 10, p, tape, z)
    for Yk in traj.Y:
        assert np.array_equal(Yk.value, np.array([[0.3]]))


def test_wealth_floor_enforced_everywhere():
    p = flat_params(sigma_y=0.4)
    states = sim.sample_initial(256, p, substream(8, "i"))
    z = sim.draw_normals(11, "floor", 0, 256, 20, 2)
    tape = T.Tape()
    traj = sim.simulate(sim.constant_policy([8.0]), states, 20, p, tape, z)
    for Xk in traj.X[1:]:
        assert Xk.value.min() >= sim.WEALTH_FLOOR
    assert any(Xk.value.min() == sim.WEALTH_FLOOR for Xk in traj.X[1:])


def test_exploding_policy_raises():
    p = flat_params()
    init = sim.InitialState(0.0, 1.0, [0.3])
    z = substream(5, "z").standard_normal((1, 6, 2))
    tape = T.Tape()
    with np.errstate(over="ignore"), pytest.raises(sim.SimError):
        sim.simulate(sim.constant_policy([1e200]), init, 6, p, tape, z)


def test_increment_covariance_matches_block_correlation():
    p = market.generate_params(2, 2, seed=21)
    L = market.assemble_and_factor(p).L
    z = sim.draw_normals(77, "cov", 0, 10 ** 6, 1, 4)[:, 0, :]
    dw = z @ L.T
    cov = np.cov(dw.T)
    assert np.max(np.abs(cov - p.omega())) <= 1e-2


def test_terminal_reward_gradient_is_marginal_utility():
    p = flat_params(sigma_y=0.4, gamma=2.0)
    states = sim.sample_initial(64, p, substream(13, "i"))
    z = sim.draw_normals(14, "term", 0, 64, 10, 2)
    tape = T.Tape()
    traj = sim.simulate(sim.constant_policy([0.6]), states, 10, p, tape, z)
    J = sim.realized_reward(traj)
    Jsum = T.record(tape, "sum", J)
    lam_T = T.grad_wrt_intermediate(Jsum, traj.X[-1])
    w = p.kappa * np.exp(-p.delta * (p.T - traj.t0))
    assert np.array_equal(lam_T, w * sim.marginal_utility_np(traj.X[-1].value, p.gamma))


def test_log_utility_reward_and_gradient():
    p = flat_params(gamma=1.0)
    init = sim.InitialState(0.5, 2.0, [0.3])
    z = substream(5, "z").standard_normal((1, 4, 2))
    tape = T.Tape()
    traj = sim.simulate(sim.constant_policy([0.5]), init, 4, p, tape, z)
    J = sim.realized_reward(traj)
    assert J.value[0, 0] == pytest.approx(np.log(traj.X[-1].value[0, 0]))
    g = T.grad_wrt_intermediate(T.record(tape, "sum", J), traj.X[-1])
    assert g[0, 0] == pytest.approx(1.0 / traj.X[-1].value[0, 0], rel=1e-15)


def test_reward_point_value_gamma2():
    # terminal-wealth mode, X_N = 2 -> J = -1/2
    p = flat_params(gamma=2.0)
    init = sim.InitialState(0.0, 2.0, [0.3])
    z = np.zeros((1, 3, 2))
    tape = T.Tape()
    traj = sim.simulate(sim.constant_policy([0.0]), init, 3, p, tape, z)
    # kill drift for the exact point value: evaluate utility at given X directly
    j = sim.utility_var(tape, tape.leaf(np.array([[2.0]])), 2.0)
    assert j.value[0, 0] == -0.5


def test_antithetic_pairing_reduces_variance():
    p = flat_params(theta=0.0)  # zero premium
    init = sim.InitialState(0.0, 1.0, [0.0])
    n_pairs = 10 ** 4
    z = sim.draw_normals(31, "anti", 0, n_pairs, 8, 2)
    tape = T.Tape()
    states, z2 = sim.antithetic_states_and_normals([init] * n_pairs, z)
    traj = sim.simulate(sim.constant_policy([1.0]), states, 8, p, tape, z2)
    J = sim.realized_reward(traj).value.ravel()
    paired = 0.5 * (J[:n_pairs] + J[n_pairs:])
    z_ind = sim.draw_normals(32, "anti-b", 0, n_pairs, 8, 2)
    tape2 = T.Tape()
    traj2 = sim.simulate(sim.constant_policy([1.0]), [init] * n_pairs, 8, p, tape2, z_ind)
    J_ind = sim.realized_reward(traj2).value.ravel()
    independent = 0.5 * (J[:n_pairs] + J_ind)
    assert paired.var() < independent.var()


def test_antithetic_estimator_unbiased():
    p = flat_params(sigma_y=0.4)
    init = sim.InitialState(0.0, 1.0, [0.3])
    J_anti = run_chunked(sim.constant_policy([0.75]), init, 10, p, 41, "ua",
                         20000, antithetic=True)
    J_ind = run_chunked(sim.constant_policy([0.75]), init, 10, p, 42, "ub", 40000)
    se = np.sqrt(J_anti.var() / J_anti.size + J_ind.var() / J_ind.size)
    assert abs(J_anti.mean() - J_ind.mean()) <= 3.0 * se


def test_richardson_combine_linear_bias():
    assert sim.richardson_combine(1.0 + 0.5 * 0.25, 1.0 + 0.5 * 0.125, True) == 1.0
    with pytest.raises(sim.SimError):
        sim.richardson_combine(1.0, 1.0, False)


def test_richardson_deterministic_compounding():
    p = flat_params()
    init = sim.InitialState(0.0, 1.0, [0.3])
    N = 10
    z = np.zeros((1, 2 * N, 2))
    tape = T.Tape()
    fine, coarse = sim.simulate_richardson(sim.constant_policy([0.0]), init, N, p, tape, z)
    Jf = sim.realized_reward(fine).value[0, 0]
    Jc = sim.realized_reward(coarse).value[0, 0]
    comb = sim.richardson_combine(Jc, Jf, True)
    exact = sim.utility_np(np.exp(p.r * p.T), 2.0)
    assert abs(comb - exact) <= 1e-5
    assert abs(comb - exact) < 0.2 * abs(Jc - exact)


def test_richardson_reduces_weak_error_merton():
    p = flat_params()
    pi = 1.2
    prem = 0.2 * 0.3
    analytic = -np.exp(-(p.r + pi * prem) * p.T + pi * pi * 0.04 * p.T)
    init = sim.InitialState(0.0, 1.0, [0.3])
    M = 10 ** 5
    Jf_all, Jc_all = [], []
    start = 0
    while start < M:
        m = min(512, M - start)
        z = sim.draw_normals(123, "rich", start, m, 8, 2)
        states, z2 = sim.antithetic_states_and_normals([init] * m, z)
        tape = T.Tape()
        fine, coarse = sim.simulate_richardson(sim.constant_policy([pi]), states, 4, p, tape, z2)
        Jf_all.append(sim.realized_reward(fine).value.ravel())
        Jc_all.append(sim.realized_reward(coarse).value.ravel())
        start += m
    Jf = np.concatenate(Jf_all)
    Jc = np.concatenate(Jc_all)
    comb = 2.0 * Jf - Jc
    assert abs(comb.mean() - analytic) < 0.5 * abs(Jc.mean() - analytic)


def test_control_variate_perfect_and_independent():
    r = np.random.default_rng(5)
    J = r.normal(size=4000)
    adj, b = sim.myopic_control_variate(J, J, mu_cv=0.25)
    assert b == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(adj, 0.25, atol=1e-12)
    assert adj.var() <= 1e-20
    J2 = r.normal(size=4000)
    adj2, b2 = sim.myopic_control_variate(J, J2, mu_cv=0.0)
    assert abs(b2) <= 0.1
    assert adj2.var() <= J.var() * 1.05
    with pytest.raises(sim.SimError):
        sim.myopic_control_variate(J, np.ones(4000), 1.0)


def test_draw_normals_partition_invariance():
    whole = sim.draw_normals(9, "part", 0, 700, 3, 2)
    pieces = np.concatenate([
        sim.draw_normals(9, "part", 0, 100, 3, 2),
        sim.draw_normals(9, "part", 100, 500, 3, 2),
        sim.draw_normals(9, "part", 600, 100, 3, 2)])
    assert np.array_equal(whole, pieces)


def test_trajectory_dump_csv(tmp_path):
    p = flat_params(sigma_y=0.4, n=2, k=1)
    states = sim.sample_initial(3, p, substream(2, "i"))
    z = sim.draw_normals(3, "dump", 0, 3, 4, 3)
    tape = T.Tape()
    traj = sim.simulate(sim.constant_policy([0.3, 0.2]), states, 4, p, tape, z)
    out = tmp_path / "paths.csv"
    sim.dump_trajectories(out, traj)
    lines = out.read_text().strip().split("\n")
    assert lines[0] == "path,k,t,X,Y_1,pi_1,pi_2"
    assert len(lines) == 1 + 3 * 4
    first = lines[1].split(",")
    assert first[0] == "0" and first[1] == "0"
    assert float(first[2]) == states[0].t0
    assert float(first[3]) == states[0].x0
