"""Closed-form and semi-analytic reference prices.

These are used only for validation and for the ``reference`` column of
experiment output; none of the Monte Carlo code depends on them.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, ndtr


@dataclass(frozen=True)
class ReferencePrice:
    value: float
    method: str  # "BlackScholesClosed" | "MertonSeries" | "PaperTable"
    info: dict = field(default_factory=dict)


def _d1(x, K, r, sigma, tau):
    return (np.log(x / K) + (r + 0.5 * sigma * sigma) * tau) / (sigma * np.sqrt(tau))


def bs_call(x, K, r, sigma, T):
    """Black-Scholes price of a European call with time to maturity ``T``."""
    x = np.asarray(x, dtype=float)
    if sigma <= 0.0 or T <= 0.0:
        return np.maximum(x - K * np.exp(-r * T), 0.0)
    d1 = _d1(x, K, r, sigma, T)
    d2 = d1 - sigma * np.sqrt(T)
    return x * ndtr(d1) - K * np.exp(-r * T) * ndtr(d2)


def bs_optimal_control(t, x, K, r, sigma, T):
    """Zero-variance control ``-sigma * x * delta`` for the Black-Scholes call.

    At maturity the delta is replaced by the payoff sub-gradient (0 below the
    strike, 1 above, 1/2 at the strike).
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    tau = np.asarray(T - t, dtype=float)
    live = tau > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = ndtr(_d1(x, K, r, sigma, np.where(live, tau, 1.0)))
    expiry = np.where(x > K, 1.0, np.where(x < K, 0.0, 0.5))
    delta = np.where(live, delta, expiry)
    return -sigma * x * delta


def merton_call(x, K, r, sigma, lam, alpha_j, gamma_j, T, tail_tol=1e-10, return_terms=False):
    """Merton jump-diffusion call as a Poisson mixture of Black-Scholes prices.

    Summation stops once the remaining Poisson mass times the spot (an upper
    bound for any call price) falls below ``tail_tol``.
    """
    beta = np.exp(alpha_j + 0.5 * gamma_j ** 2) - 1.0
    lam_adj = lam * (1.0 + beta)
    mean = lam_adj * T
    if lam == 0.0:
        value = bs_call(x, K, r, sigma, T)
        return (value, 1) if return_terms else value
    total = 0.0
    mass = 0.0
    j = 0
    while True:
        w = np.exp(-mean + j * np.log(mean) - gammaln(j + 1)) if mean > 0 else float(j == 0)
        r_j = r - lam * beta + j * np.log1p(beta) / T
        s_j = np.sqrt(sigma ** 2 + j * gamma_j ** 2 / T)
        total = total + w * bs_call(x, K, r_j, s_j, T)
        mass += w
        j += 1
        if j > mean and (1.0 - mass) * np.max(np.abs(x)) < tail_tol:
            break
        if j > 10_000:
            raise RuntimeError("Merton series failed to converge")
    return (total, j) if return_terms else total


# u(0, 1) column for the Heston experiment (v0=0.15, r=0.02, kappa=0.25,
# theta=0.5, sigma_v=0.3, rho=-0.3, T=3).
HESTON_TABLE = {
    0.7: 0.47517,
    0.8: 0.42623,
    0.9: 0.38271,
    1.0: 0.34406,
    1.1: 0.30977,
    1.2: 0.27934,
    1.3: 0.25232,
}
HESTON_TABLE_PARAMS = dict(r=0.02, kappa=0.25, theta=0.5, sigma_v=0.3, rho=-0.3, v0=0.15, T=3.0, x0=1.0)


def heston_reference(K, **params):
    """Tabulated Heston price, or ``None`` if the parameters differ from the table."""
    for name, value in HESTON_TABLE_PARAMS.items():
        if name in params and not np.isclose(params[name], value, rtol=0, atol=1e-12):
            return None
    key = round(float(K), 10)
    if key not in HESTON_TABLE:
        return None
    return ReferencePrice(HESTON_TABLE[key], "PaperTable")
