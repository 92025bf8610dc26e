import json

import numpy as np
import pytest

from pgdpo import evaluation, market, riccati


def ko_params(rho=-0.4):
    return market.MarketParams(
        n=1, k=1, r=0.03, kappa_Y=[[2.0]], theta_Y=[0.3], sigma_Y=[[0.3]],
        sigma=[0.2], A=[[1.0]], Psi=np.eye(1), Phi=np.eye(1), rho=[[rho]],
        beta=[0.0], gamma=2.0, delta=0.0, kappa=1.0, T=1.5)


def two_factor_params():
    return market.MarketParams(
        n=1, k=2, r=0.03, kappa_Y=[[2.0, 0.0], [0.0, 1.2]],
        theta_Y=[0.3, 0.1], sigma_Y=[[0.3, 0.0], [0.0, 0.2]],
        sigma=[0.2], A=[[1.0, 0.6]], Psi=np.eye(1), Phi=np.eye(2),
        rho=[[-0.3, 0.2]], beta=[0.0, 0.0], gamma=2.0, delta=0.0,
        kappa=1.0, T=1.5)


def small_grid(p, t_points=7, y_points=9):
    sol = riccati.solve_riccati(p, grid_points=257)
    return riccati.build_grid(sol, p, t_points=t_points, y_points=y_points)


class FakeGrid:
    """Just enough surface for hedging_ratio."""

    def __init__(self, slices):
        self.slices = slices


def test_benchmark_against_itself_is_zero():
    p = ko_params()
    grid = small_grid(p)
    cand = evaluation.benchmark_candidate(grid, 0)
    r_tot, r_myo, r_hed = evaluation.rmse_slices(cand, grid, p)
    assert r_tot <= 1e-12
    assert r_myo <= 1e-12
    assert r_hed <= 1e-12


def test_constant_offset_shows_up_verbatim():
    p = ko_params()
    grid = small_grid(p)
    bench = evaluation.benchmark_candidate(grid, 0)
    c = 0.037

    def shifted(t_col, X, Y):
        return bench.total_fn(t_col, X, Y) + c

    cand = evaluation.PolicyCandidate(shifted, bench.myopic_fn,
                                      lambda t, x, y: bench.hedging_fn(t, x, y) + c)
    r_tot, r_myo, r_hed = evaluation.rmse_slices(cand, grid, p)
    assert abs(r_tot - c) <= 1e-12
    assert r_myo <= 1e-12
    assert abs(r_hed - c) <= 1e-12


def test_bare_callable_split_attributes_error_to_hedging():
    p = ko_params()
    myo = evaluation.myopic_rule(p)
    cand = evaluation.as_candidate(lambda t, x, y: myo(t, x, y) + 0.25, p)
    t = np.full((4, 1), 0.2)
    x = np.ones((4, 1))
    y = np.linspace(0.1, 0.5, 4)[:, None]
    assert np.array_equal(cand.myopic_fn(t, x, y), myo(t, x, y))
    np.testing.assert_allclose(cand.hedging_fn(t, x, y), 0.25, rtol=0,
                               atol=1e-15)
    # an existing candidate passes through untouched
    assert evaluation.as_candidate(cand, p) is cand


def test_wealth_free_candidate_ignores_x_values():
    p = ko_params()
    grid = small_grid(p)
    cand = evaluation.benchmark_candidate(grid, 0)
    a = evaluation.rmse_slices(cand, grid, p, x_values=(1.0,))
    b = evaluation.rmse_slices(cand, grid, p, x_values=(0.5, 1.0, 2.0))
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


def test_two_factor_slices_average():
    p = two_factor_params()
    grid = small_grid(p, t_points=5, y_points=7)
    r_tot, r_myo, r_hed = evaluation.rmse_slices(
        evaluation.myopic_rule(p), grid, p)
    # exact myopic part, all error in the missing hedging demand
    assert r_myo <= 1e-12
    assert r_tot > 0.0
    assert abs(r_tot - r_hed) <= 1e-12


def test_non_finite_candidate_raises():
    p = ko_params()
    grid = small_grid(p)
    with pytest.raises(evaluation.EvalError):
        evaluation.rmse_slices(
            lambda t, x, y: np.full((t.shape[0], p.n), np.nan), grid, p)


def test_hedging_ratio_zero_when_uncorrelated():
    p = ko_params(rho=0.0)
    grid = small_grid(p)
    assert evaluation.hedging_ratio(grid) == 0.0


def test_hedging_ratio_values_and_floor():
    ones = np.ones((3, 4, 2))
    grid = FakeGrid([{"total": ones, "hedging": 0.5 * ones}])
    assert abs(evaluation.hedging_ratio(grid) - 50.0) <= 1e-12
    tiny = FakeGrid([{"total": 1e-14 * ones, "hedging": ones}])
    with pytest.raises(evaluation.EvalError):
        evaluation.hedging_ratio(tiny)


def test_hedging_ratio_is_substantial_with_correlation():
    p = ko_params()
    grid = small_grid(p)
    ratio = evaluation.hedging_ratio(grid)
    assert 0.0 < ratio < 100.0
    assert ratio > 1.0


def test_best_iteration_min_and_tie_break():
    rows = [
        {"iteration": 100, "rmse_total": 0.05},
        {"iteration": 200, "rmse_total": 0.02},
        {"iteration": 300, "rmse_total": 0.02},
        {"iteration": 400, "rmse_total": float("nan")},
        {"iteration": 500, "rmse_total": None},
    ]
    assert evaluation.best_iteration(rows) == (200, 0.02)
    with pytest.raises(evaluation.EvalError):
        evaluation.best_iteration([{"iteration": 1, "rmse_total": None}])


def test_report_summarizes_best_rows():
    rows = [
        {"iteration": 10, "rmse_total": 0.5, "rmse_myopic": 0.1,
         "rmse_hedging": 0.4, "mean_J": -1.0},
        {"iteration": 20, "rmse_total": 0.2, "rmse_myopic": 0.05,
         "rmse_hedging": 0.15, "mean_J": -0.9},
    ]
    doc = evaluation.report({"baseline": rows}, metadata={"seed": 3})
    assert doc["methods"]["baseline"]["best_iteration"] == 20
    assert doc["methods"]["baseline"]["rmse_total"] == 0.2
    assert doc["metadata"] == {"seed": 3}
    assert doc["eval_x_values"] == [0.5, 1.0, 2.0]


def test_surface_export_roundtrips():
    p = ko_params()
    grid = small_grid(p)
    cand = evaluation.benchmark_candidate(grid, 0)
    doc = json.loads(evaluation.export_surface(cand, grid, p, 0, tau=0.75))
    assert doc["slice_index"] == 0
    assert doc["tau"] == 0.75
    assert len(doc["y_grid"]) == len(grid.y_grid)
    errs = np.array(doc["error_vs_benchmark"]["0"])
    assert np.max(np.abs(errs)) <= 1e-12
    assert len(doc["pi_total"]["0"]) == len(grid.y_grid)
    with pytest.raises(evaluation.EvalError):
        evaluation.export_surface(cand, grid, p, 0, tau=p.T + 0.1)


def test_surface_export_respects_asset_selection():
    p = two_factor_params()
    grid = small_grid(p, t_points=5, y_points=7)
    doc = json.loads(evaluation.export_surface(
        evaluation.myopic_rule(p), grid, p, 1, tau=0.5, assets=[0]))
    assert doc["assets"] == [0]
    assert list(doc["pi_total"].keys()) == ["0"]
