import numpy as np
import pytest

from pgdpo import bsde, evaluation, market, nets, riccati, sim, train
from pgdpo import tape as T


def ko_params(rho=-0.4, beta=0.0):
    return market.MarketParams(
        n=1, k=1, r=0.03, kappa_Y=[[2.0]], theta_Y=[0.3], sigma_Y=[[0.3]],
        sigma=[0.2], A=[[1.0]], Psi=np.eye(1), Phi=np.eye(1), rho=[[rho]],
        beta=[beta], gamma=2.0, delta=0.0, kappa=1.0, T=1.5)


def degenerate_params():
    # No premium, no cross-correlation: the optimal policy is zero exposure
    # and wealth compounds deterministically at r.
    return market.MarketParams(
        n=1, k=1, r=0.03, kappa_Y=[[2.0]], theta_Y=[0.3], sigma_Y=[[0.3]],
        sigma=[0.2], A=[[0.0]], Psi=np.eye(1), Phi=np.eye(1), rho=[[0.0]],
        beta=[0.0], gamma=2.0, delta=0.0, kappa=1.0, T=1.5)


def small_nets(p, seed=0):
    return bsde.BsdeNets(p, seed=seed, hidden_v0=(8, 8), hidden_z=(12, 12))


def random_inputs(p, m=500, seed=3):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, p.T, size=(m, 1))
    x = rng.uniform(0.1, 3.0, size=(m, 1))
    lo, hi = sim.state_bounds(p)
    y = rng.uniform(lo, hi, size=(m, p.k))
    return t, x, y


class ExactDegenerateNets:
    """Hand-built stand-in for the zero-premium market.

    The policy is exactly zero, the loadings are exactly zero, and the value
    estimate is the discrete conditional expectation of terminal utility,
    which the deterministic wealth recursion reaches bitwise.
    """

    def __init__(self, p, n_steps, tape):
        self.p = p
        self.n = n_steps
        self.tape = tape

    def policy_and_loadings(self, t_col, X, Y):
        p, tape = self.p, self.tape
        m = X.value.shape[0]
        dt = p.T / self.n
        k = int(round(t_col[0, 0] / dt))
        growth = (p.r * dt + 0.0) + 1.0
        x = X.value.copy()
        for _ in range(k, self.n):
            x = np.maximum(x * growth, sim.WEALTH_FLOOR)
        v = sim.utility_np(x, p.gamma)
        return (tape.leaf(np.zeros((m, p.n))),
                tape.leaf(np.zeros((m, p.n + p.k))),
                tape.leaf(v))


# ---------------------------------------------------------------------------
# structural properties of the policy construction


def test_value_net_output_always_negative():
    p = ko_params()
    bnets = bsde.BsdeNets(p, seed=7, hidden_v0=(8,), hidden_z=(8,))
    t, x, y = random_inputs(p)
    v = nets.forward_np(bnets.v0, np.concatenate([t, np.log(x), y], axis=1))
    assert np.all(v < 0.0)


def test_rho_zero_policy_is_exactly_myopic():
    p = ko_params(rho=0.0)
    cand = bsde.bsde_candidate(small_nets(p, seed=11), p)
    t, x, y = random_inputs(p, m=200)
    myo = evaluation.myopic_rule(p)(t, x, y)
    assert np.array_equal(cand.total_fn(t, x, y), myo)
    assert np.all(cand.hedging_fn(t, x, y) == 0.0)


def test_zero_factor_kills_myopic_term():
    p = ko_params()
    cand = bsde.bsde_candidate(small_nets(p, seed=2), p)
    t = np.full((5, 1), 0.4)
    x = np.linspace(0.5, 2.0, 5)[:, None]
    y = np.zeros((5, 1))
    assert np.all(cand.myopic_fn(t, x, y) == 0.0)
    assert np.array_equal(cand.total_fn(t, x, y), cand.hedging_fn(t, x, y))


def test_weight_bound_clips_both_sides():
    p = ko_params()
    bnets = small_nets(p, seed=5)
    huge = [a * 400.0 for a in bnets.z.arrays()]
    bnets = bnets.replace_arrays(bnets.v0.arrays() + huge)
    cand = bsde.bsde_candidate(bnets, p)
    t, x, y = random_inputs(p, m=300, seed=9)
    out = cand.total_fn(t, x, y)
    assert np.max(out) <= bsde.WEIGHT_BOUND + 1e-15
    assert np.min(out) >= -bsde.WEIGHT_BOUND - 1e-15
    assert np.max(np.abs(out)) > 9.0  # the bound actually engaged


def test_clamp_box_values_and_gradient():
    tape = T.Tape()
    v = tape.leaf(np.array([[-12.0, -10.0, 0.0, 3.0, 10.0, 12.0]]))
    out = bsde._clamp_box(tape, v, 10.0)
    assert np.array_equal(out.value, [[-10.0, -10.0, 0.0, 3.0, 10.0, 10.0]])
    g = T.backward(T.record(tape, "sum", out), [v])[v]
    # strict interior passes gradient, clipped and boundary points do not
    assert np.array_equal(g, [[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]])


def test_vanishing_value_estimate_raises():
    p = ko_params()
    bnets = small_nets(p, seed=1)
    arrs = bnets.v0.arrays()
    arrs[-1] = np.full_like(arrs[-1], -40.0)  # softplus(-40) ~ 4e-18
    bnets = bnets.replace_arrays(arrs + bnets.z.arrays())
    t, x, y = random_inputs(p, m=10)
    with pytest.raises(bsde.BsdeError):
        bsde.bsde_candidate(bnets, p).total_fn(t, x, y)


# ---------------------------------------------------------------------------
# rollout consistency


def test_degenerate_market_exact_value_gives_zero_loss():
    p = degenerate_params()
    n_steps = 12
    rng = np.random.default_rng(31)
    m = 64
    x0 = rng.uniform(0.2, 3.0, size=(m, 1))
    y0 = rng.uniform(-0.5, 1.1, size=(m, 1))
    z = rng.standard_normal((m, n_steps - 3, p.n + p.k))
    tape = T.Tape()
    tnets = ExactDegenerateNets(p, n_steps, tape)
    sq = bsde.bsde_rollout(tnets, 3, x0, y0, n_steps, p, tape, z)
    assert float(np.max(np.abs(sq.value))) == 0.0


def test_untrained_nets_have_positive_loss():
    p = ko_params()
    states = [sim.InitialState(0.0, x, [0.3]) for x in (0.5, 1.0, 1.5, 2.0)]
    loss = bsde.bsde_rollout_loss(states, small_nets(p, seed=3), 10, p)
    assert float(loss.value) > 0.0


def test_rollout_loss_rejects_off_grid_and_mixed_starts():
    p = ko_params()
    bnets = small_nets(p)
    with pytest.raises(bsde.BsdeError):
        bsde.bsde_rollout_loss([sim.InitialState(0.071, 1.0, [0.3])], bnets, 10, p)
    mixed = [sim.InitialState(0.0, 1.0, [0.3]),
             sim.InitialState(p.T / 10, 1.0, [0.3])]
    with pytest.raises(bsde.BsdeError):
        bsde.bsde_rollout_loss(mixed, bnets, 10, p)


def test_rollout_shape_and_range_checks():
    p = ko_params()
    tape = T.Tape()
    tnets = bsde.TapeNets(small_nets(p), p, tape)
    x0 = np.ones((4, 1))
    y0 = np.full((4, 1), 0.3)
    with pytest.raises(bsde.BsdeError):
        bsde.bsde_rollout(tnets, 10, x0, y0, 10, p, tape,
                          np.zeros((4, 1, 2)))
    with pytest.raises(bsde.BsdeError):
        bsde.bsde_rollout(tnets, 0, x0, y0, 10, p, tape,
                          np.zeros((4, 9, 2)))


def test_loss_gradient_matches_fd_on_tiny_nets():
    p = ko_params()
    n_steps = 6
    k0 = 2
    bnets = bsde.BsdeNets(p, seed=13, hidden_v0=(), hidden_z=())
    m = 16
    rng = np.random.default_rng(17)
    x0 = rng.uniform(0.5, 2.0, size=(m, 1))
    y0 = rng.uniform(-0.3, 0.9, size=(m, 1))
    z = rng.standard_normal((m, n_steps - k0, p.n + p.k))

    def loss_value(b):
        tape = T.Tape()
        tnets = bsde.TapeNets(b, p, tape)
        sq = bsde.bsde_rollout(tnets, k0, x0, y0, n_steps, p, tape, z)
        return float(sq.value.sum()) / m

    tape = T.Tape()
    tnets = bsde.TapeNets(bnets, p, tape)
    sq = bsde.bsde_rollout(tnets, k0, x0, y0, n_steps, p, tape, z)
    grads = T.backward(T.record(tape, "sum", sq), tnets.wrt_leaves())
    garr = [g / m for g in tnets.collect_grads(grads)]

    arrays = bnets.arrays()
    h = 1e-6
    for ai, a in enumerate(arrays):
        for idx in np.ndindex(a.shape):
            up = [x.copy() for x in arrays]
            dn = [x.copy() for x in arrays]
            up[ai][idx] += h
            dn[ai][idx] -= h
            fd = (loss_value(bnets.replace_arrays(up))
                  - loss_value(bnets.replace_arrays(dn))) / (2.0 * h)
            assert abs(fd - garr[ai][idx]) <= 1e-5 * max(1.0, abs(fd))


# ---------------------------------------------------------------------------
# training behaviour


def bench_grid(p):
    sol = riccati.solve_riccati(p, grid_points=257)
    return riccati.build_grid(sol, p, t_points=9, y_points=13)


def test_rho_zero_rmse_total_equals_myopic_rmse():
    p = ko_params(rho=0.0)
    grid = bench_grid(p)
    r_tot, r_myo, r_hed = evaluation.rmse_slices(
        bsde.bsde_candidate(small_nets(p, seed=21), p), grid, p)
    assert r_tot == r_myo
    assert r_hed == 0.0


def test_short_training_reduces_loss_and_traces_exact_myopic():
    p = ko_params()
    grid = bench_grid(p)
    cfg = train.TrainConfig(iterations=150, batch=128, steps=10, lr=3e-4,
                            seed=4, eval_every=25, variance_reduction="none",
                            clip=2.0)
    best, trace = bsde.train_bsde(cfg, p, benchmark=grid)
    losses = [r["mean_J"] for r in trace.rows]
    assert losses[-1] < losses[0]
    assert all(np.isfinite(r["rmse_total"]) for r in trace.rows)
    assert all(r["rmse_myopic"] <= 1e-12 for r in trace.rows)
    assert trace.method == "bsde"
    assert isinstance(best, bsde.BsdeNets)


def test_training_is_deterministic_and_thread_invariant():
    p = ko_params()
    runs = []
    for threads in (1, 4):
        cfg = train.TrainConfig(iterations=4, batch=512, steps=4, lr=3e-4,
                                seed=9, eval_every=2,
                                variance_reduction="none", threads=threads)
        bnets = bsde.BsdeNets(p, seed=9, hidden_v0=(8,), hidden_z=(8,))
        runs.append(bsde.train_bsde(cfg, p, bnets=bnets))
    (n1, t1), (n4, t4) = runs
    assert t1.rows == t4.rows
    for a, b in zip(n1.arrays(), n4.arrays()):
        assert np.array_equal(a, b)


def test_train_bsde_rejects_variance_devices():
    p = ko_params()
    cfg = train.TrainConfig(iterations=1, batch=4, steps=2,
                            variance_reduction="antithetic")
    with pytest.raises(train.TrainError):
        bsde.train_bsde(cfg, p)
