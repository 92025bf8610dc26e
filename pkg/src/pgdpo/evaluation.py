"""Benchmark-relative evaluation: slice RMSEs, hedging ratios, surfaces.

Candidate policies are batched callables fn(t_col, X_col, Y) -> (M, n), the
same protocol `sim.numpy_policy` wraps.  A candidate that can split itself
into myopic and hedging parts is passed as a PolicyCandidate; a bare callable
is treated as total-only, and its decomposition is derived by subtracting the
analytic myopic rule (exact for CRRA, so the subtraction attributes all
approximation error to the hedging part).

Wealth enters only through candidates that actually read it (neural policies,
projected costates).  Those are evaluated at a fixed set of wealth levels and
averaged; the benchmark itself is wealth-free.  RMSE runs over the full
(t, y) grid of every factor slice: root mean square of the n-vector error
norms over nodes, then a plain mean across the k slices.
"""

import json

import numpy as np
from scipy.linalg import cho_factor, cho_solve

X_SET = (0.5, 1.0, 2.0)
RATIO_FLOOR = 1e-10


class EvalError(Exception):
    pass


def myopic_rule(p):
    """Batched analytic myopic policy: (1/gamma) Sigma^{-1} (mu(t,y) - r 1)."""
    cf = cho_factor(p.sigma_matrix(), lower=True)
    load_T = (p.sigma[:, None] * p.A).T

    def fn(t_col, X, Y):
        z = Y + p.beta[None, :] * Y * Y if np.any(p.beta != 0.0) else Y
        prem = z @ load_T
        return cho_solve(cf, prem.T).T / p.gamma

    return fn


class PolicyCandidate:
    """total/myopic/hedging callables sharing the batched-array protocol."""

    def __init__(self, total_fn, myopic_fn, hedging_fn):
        self.total_fn = total_fn
        self.myopic_fn = myopic_fn
        self.hedging_fn = hedging_fn

    def parts(self, t_col, X, Y):
        return (self.total_fn(t_col, X, Y),
                self.myopic_fn(t_col, X, Y),
                self.hedging_fn(t_col, X, Y))


def as_candidate(candidate, p):
    """Wrap a bare total-only callable with the subtract-analytic split."""
    if isinstance(candidate, PolicyCandidate):
        return candidate
    myo = myopic_rule(p)

    def hedging_fn(t_col, X, Y):
        return candidate(t_col, X, Y) - myo(t_col, X, Y)

    return PolicyCandidate(candidate, myo, hedging_fn)


def benchmark_candidate(grid, j):
    """The stored benchmark slice j itself, as a candidate (for self-tests)."""

    def field_fn(field):
        def fn(t_col, X, Y):
            return grid.interp(j, t_col[:, 0], Y[:, j], field=field)

        return fn

    return PolicyCandidate(field_fn("total"), field_fn("myopic"), field_fn("hedging"))


def _slice_nodes(grid, j, t):
    y_grid = grid.y_grid
    ny = len(y_grid)
    Y = np.tile(grid.p.theta_Y, (ny, 1))
    Y[:, j] = y_grid
    t_col = np.full((ny, 1), float(t))
    return t_col, Y


def _averaged_parts(cand, t_col, Y, x_values):
    tot = myo = hed = None
    for x in x_values:
        X = np.full((t_col.shape[0], 1), float(x))
        a, b, c = cand.parts(t_col, X, Y)
        tot = a if tot is None else tot + a
        myo = b if myo is None else myo + b
        hed = c if hed is None else hed + c
    w = 1.0 / len(x_values)
    return tot * w, myo * w, hed * w


def rmse_slices(candidate, grid, p, x_values=X_SET):
    """(rmse_total, rmse_myopic, rmse_hedging) against the benchmark grid.

    Per slice j the candidate is evaluated on the full (t, y_j) node grid
    with off-axis factors at their means, averaged over x_values, compared
    field-by-field, and the per-slice RMSEs of the error norms are averaged
    over slices.
    """
    cand = as_candidate(candidate, p)
    sums = np.zeros(3)
    for j in range(p.k):
        sq = np.zeros(3)
        nodes = 0
        for it, t in enumerate(grid.t_grid):
            t_col, Y = _slice_nodes(grid, j, t)
            tot, myo, hed = _averaged_parts(cand, t_col, Y, x_values)
            s = grid.slices[j]
            for idx, (got, want) in enumerate(
                ((tot, s["total"][it]), (myo, s["myopic"][it]), (hed, s["hedging"][it]))
            ):
                sq[idx] += float(np.sum((got - want) ** 2))
            nodes += t_col.shape[0]
        sums += np.sqrt(sq / nodes)
    out = sums / p.k
    if not np.all(np.isfinite(out)):
        raise EvalError("non-finite RMSE")
    return float(out[0]), float(out[1]), float(out[2])


def hedging_ratio(grid):
    """100 * mean over grid nodes of ||hedging|| / ||total||, small totals excluded."""
    ratios = []
    for s in grid.slices:
        tot = np.linalg.norm(s["total"], axis=-1).ravel()
        hed = np.linalg.norm(s["hedging"], axis=-1).ravel()
        keep = tot >= RATIO_FLOOR
        ratios.append((hed[keep] / tot[keep]))
    allr = np.concatenate(ratios)
    if allr.size == 0:
        raise EvalError("every node fell under the total-norm floor")
    return float(100.0 * allr.mean())


def nonaffine_deviation(candidate, affine_grid, p, x_values=X_SET):
    """Total-policy RMSE of a candidate against the affine benchmark.

    With beta = 0 this is the candidate's ordinary RMSE; with beta != 0 it
    measures how far the learned policy moved from the affine solution.
    """
    return rmse_slices(candidate, affine_grid, p, x_values=x_values)[0]


def export_surface(candidate, grid, p, j, tau, assets=None, x_values=X_SET):
    """One-factor policy surface at fixed time-to-maturity, as JSON.

    Emits candidate total/myopic/hedging and the signed total error against
    the benchmark, per requested asset, on the slice's y grid.
    """
    if tau < 0 or tau > p.T:
        raise EvalError("tau outside [0, T]")
    cand = as_candidate(candidate, p)
    t = p.T - float(tau)
    t_col, Y = _slice_nodes(grid, j, t)
    tot, myo, hed = _averaged_parts(cand, t_col, Y, x_values)
    bench = grid.interp(j, t_col[:, 0], grid.y_grid, field="total")
    if assets is None:
        assets = list(range(p.n))
    doc = {
        "slice_index": int(j),
        "tau": float(tau),
        "x_values": list(x_values),
        "y_grid": grid.y_grid.tolist(),
        "assets": [int(a) for a in assets],
        "pi_total": {str(a): tot[:, a].tolist() for a in assets},
        "pi_myopic": {str(a): myo[:, a].tolist() for a in assets},
        "pi_hedging": {str(a): hed[:, a].tolist() for a in assets},
        "error_vs_benchmark": {str(a): (tot[:, a] - bench[:, a]).tolist() for a in assets},
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def best_iteration(rows):
    """(iteration, rmse_total) minimizing rmse_total; ties go to the earliest."""
    best = None
    for row in rows:
        r = row.get("rmse_total")
        if r is None or not np.isfinite(r):
            continue
        if best is None or r < best[1]:
            best = (int(row["iteration"]), float(r))
    if best is None:
        raise EvalError("no finite rmse_total entries to select from")
    return best


def report(traces, metadata=None):
    """Summary dict over {method: trace rows}: best iteration and its RMSEs."""
    methods = {}
    for name, rows in traces.items():
        it, _ = best_iteration(rows)
        row = next(r for r in rows if r["iteration"] == it)
        methods[name] = {
            "best_iteration": it,
            "rmse_total": row["rmse_total"],
            "rmse_myopic": row["rmse_myopic"],
            "rmse_hedging": row["rmse_hedging"],
            "mean_J": row["mean_J"],
        }
    doc = {"methods": methods, "eval_x_values": list(X_SET)}
    if metadata:
        doc["metadata"] = metadata
    return doc
