"""Market parameters: reproducible generation, drifts, premia, correlation.

The investable universe is n assets driven by k mean-reverting factors.  All
randomness in generate_params comes from named substreams of the master seed,
one per field, so adding a field later cannot silently shift another field's
draw and results never depend on evaluation order.

The (n+k) Brownian block correlation Omega = [[Psi, rho], [rho^T, Phi]] is
repaired by minimal diagonal loading when needed and re-split, so the stored
Psi/Phi/rho always agree with the matrix the simulator actually factors.
"""

import json

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .rng import substream

MIN_EIG = 1e-6
_BETA_DIRECTION_SEED = 90210  # held fixed so beta_norm sweeps share a direction


class MarketError(Exception):
    pass


def _freeze(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


class MarketParams:
    """Immutable container for one market configuration."""

    _FIELDS = ("n", "k", "r", "kappa_Y", "theta_Y", "sigma_Y", "sigma", "A",
               "Psi", "Phi", "rho", "beta", "gamma", "delta", "kappa", "T")

    def __init__(self, n, k, r, kappa_Y, theta_Y, sigma_Y, sigma, A,
                 Psi, Phi, rho, beta, gamma, delta, kappa, T):
        self.n = int(n)
        self.k = int(k)
        if self.n < 1 or self.k < 1:
            raise MarketError("need n >= 1 and k >= 1")
        self.r = float(r)
        self.kappa_Y = _freeze(np.reshape(kappa_Y, (self.k, self.k)))
        self.theta_Y = _freeze(np.reshape(theta_Y, (self.k,)))
        self.sigma_Y = _freeze(np.reshape(sigma_Y, (self.k, self.k)))
        self.sigma = _freeze(np.reshape(sigma, (self.n,)))
        self.A = _freeze(np.reshape(A, (self.n, self.k)))
        self.Psi = _freeze(np.reshape(Psi, (self.n, self.n)))
        self.Phi = _freeze(np.reshape(Phi, (self.k, self.k)))
        self.rho = _freeze(np.reshape(rho, (self.n, self.k)))
        self.beta = _freeze(np.reshape(beta, (self.k,)))
        self.gamma = float(gamma)
        self.delta = float(delta)
        self.kappa = float(kappa)
        self.T = float(T)
        if np.any(self.sigma <= 0.0):
            raise MarketError("asset volatilities must be positive")
        if np.any(np.diag(self.sigma_Y) < 0.0):
            raise MarketError("factor volatilities must be non-negative")
        if self.gamma <= 0.0:
            raise MarketError("gamma must be positive")
        if self.T <= 0.0:
            raise MarketError("T must be positive")

    def replace(self, **kw):
        d = {f: getattr(self, f) for f in self._FIELDS}
        d.update(kw)
        return MarketParams(**d)

    # -- dynamics -----------------------------------------------------------

    def omega(self):
        top = np.hstack([self.Psi, self.rho])
        bot = np.hstack([self.rho.T, self.Phi])
        return np.vstack([top, bot])

    def sigma_matrix(self):
        return (self.sigma[:, None] * self.Psi) * self.sigma[None, :]

    def premium_loading(self):
        """diag(sigma) A, the linear premium map."""
        return self.sigma[:, None] * self.A

    def cross_vol(self):
        """diag(sigma) rho sigma_Y: covariance of asset shocks with factor moves."""
        return self.sigma[:, None] * (self.rho @ self.sigma_Y)

    def to_json(self):
        d = {}
        for f in self._FIELDS:
            v = getattr(self, f)
            d[f] = v.tolist() if isinstance(v, np.ndarray) else v
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def drift_y(t, y, p):
    y = np.asarray(y, dtype=np.float64)
    return p.kappa_Y @ (p.theta_Y - y)


def risk_premium(t, y, p):
    """diag(sigma) A (y + beta*y^2); elementwise-affine when beta is zero."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(p.beta != 0.0):
        z = y + p.beta * y * y
    else:
        z = y
    return p.sigma * (p.A @ z)


class CorrelationFactor:
    def __init__(self, L, loading_applied):
        self.L = _freeze(L)
        self.loading_applied = float(loading_applied)


def _unit_diag(M):
    d = np.sqrt(np.diag(M))
    return M / np.outer(d, d)


def _repair(omega):
    """Smallest diagonal loading from {0, 1e-6, 1e-5, ...} fixing min eig."""
    dim = omega.shape[0]
    grid = [0.0] + [10.0 ** e for e in range(-6, 2)]
    for c in grid:
        cand = _unit_diag(omega + c * np.eye(dim)) if c > 0.0 else omega
        if np.min(np.linalg.eigvalsh(cand)) >= MIN_EIG:
            return cand, c
    raise MarketError("correlation repair failed")  # unreachable: c=10 is diagonal-dominant


def assemble_and_factor(p):
    """Cholesky factor of the block correlation, after repair if needed."""
    if np.any(np.abs(np.diag(p.Psi) - 1.0) > 1e-12):
        raise MarketError("Psi diagonal is not 1")
    if np.any(np.abs(np.diag(p.Phi) - 1.0) > 1e-12):
        raise MarketError("Phi diagonal is not 1")
    fixed, c = _repair(p.omega())
    L = np.linalg.cholesky(fixed)
    return CorrelationFactor(L, c)


def sigma_matrix_and_solve(p, rhs):
    """Solve Sigma x = rhs by Cholesky; no explicit inverse is ever formed."""
    rhs = np.asarray(rhs, dtype=np.float64)
    try:
        cf = cho_factor(p.sigma_matrix(), lower=True)
    except np.linalg.LinAlgError as e:  # pragma: no cover - guarded by PD invariant
        raise MarketError(f"Sigma factorization failed: {e}")
    return cho_solve(cf, rhs)


def beta_direction(k):
    """Unit-norm nonlinearity direction; a function of k only."""
    u = np.abs(substream(_BETA_DIRECTION_SEED, "beta-direction", k).normal(size=k))
    return u / np.linalg.norm(u)


def with_beta_norm(p, beta_norm):
    if beta_norm == 0.0:
        return p.replace(beta=np.zeros(p.k))
    return p.replace(beta=float(beta_norm) * beta_direction(p.k))


def _psi_latent(n, rng):
    m = min(n, 5)
    B = rng.uniform(-0.5, 0.5, size=(n, m))
    norms = np.linalg.norm(B, axis=1)
    scale = np.minimum(1.0, 0.99 / np.maximum(norms, 1e-300))
    B = B * scale[:, None]
    M = B @ B.T + np.diag(1.0 - np.sum(B * B, axis=1))
    return _unit_diag(M)


def _phi_random(k, rng):
    G = rng.normal(size=(k, k))
    return _unit_diag(G @ G.T)


def generate_params(n, k, seed, gamma=2.0, delta=0.0, kappa=1.0, T=1.5):
    """Reproducible market: field-named substreams of one master seed."""
    if n < 1 or k < 1:
        raise MarketError("need n >= 1 and k >= 1")
    kappa_Y = np.diag(2.0 + 0.5 * np.arange(k))
    theta = substream(seed, "market-theta").uniform(0.2, 0.4, size=k)
    sig_y = np.diag(substream(seed, "market-sigma-y").uniform(0.3, 0.5, size=k))
    sigma = substream(seed, "market-sigma").uniform(0.1, 0.5, size=n)
    A = substream(seed, "market-loadings").dirichlet(np.ones(k), size=n)
    rho = substream(seed, "market-rho").uniform(-0.2, 0.2, size=(n, k))
    Psi = _psi_latent(n, substream(seed, "market-psi"))
    Phi = _phi_random(k, substream(seed, "market-phi"))

    p = MarketParams(n=n, k=k, r=0.03, kappa_Y=kappa_Y, theta_Y=theta,
                     sigma_Y=sig_y, sigma=sigma, A=A, Psi=Psi, Phi=Phi,
                     rho=rho, beta=np.zeros(k), gamma=gamma, delta=delta,
                     kappa=kappa, T=T)
    fixed, _ = _repair(p.omega())
    # re-split so stored blocks always match the factored matrix
    return p.replace(Psi=fixed[:n, :n], Phi=fixed[n:, n:], rho=fixed[:n, n:])
