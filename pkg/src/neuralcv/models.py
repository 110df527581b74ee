"""SDE models, payoffs and Levy-measure quantities.

All coefficient callables are vectorised over paths: they take a time ``t``
(scalar or shape ``(M,)``) and states ``x`` of shape ``(M, d)``.
Return shapes are

* ``drift``        -> ``(M, d)``
* ``diffusion``    -> ``(M, d, d)``
* ``discount``     -> ``(M,)``  (the rate ``c``; ``-r`` for pricing problems)
* ``running_cost`` -> ``(M,)``
* ``jump_coeff``   -> ``(M, d, q)``
* ``underlier``    -> ``(M, n_assets)``, the traded prices the payoff sees.
"""
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy import integrate


class ModelError(ValueError):
    """Invalid model or measure parameters."""


# ---------------------------------------------------------------------------
# Levy measures


@dataclass(frozen=True)
class MertonJumps:
    """Finite-activity jumps ``J = exp(eta) - 1`` with ``eta ~ N(alpha_j, gamma_j**2)``."""

    lam: float
    alpha_j: float
    gamma_j: float

    jump_dim = 1

    def __post_init__(self):
        if not self.lam >= 0.0:
            raise ModelError("Merton intensity must be non-negative")
        if not self.gamma_j >= 0.0:
            raise ModelError("Merton jump volatility must be non-negative")

    @property
    def mean_jump(self):
        return float(np.expm1(self.alpha_j + 0.5 * self.gamma_j ** 2))


@dataclass(frozen=True)
class SingularTempered:
    """Power law near zero, exponential tails beyond |z| = 1.

    ``nu(dz) = C * |z|**-(alpha+1)`` on ``0 < |z| <= 1`` and
    ``C * exp(-mu (|z| - 1))`` on ``|z| > 1``, with ``C = c_minus`` for
    negative and ``c_plus`` for positive ``z``.  ``eps`` is the small-jump
    truncation level.
    """

    c_minus: float
    c_plus: float
    alpha: float
    mu: float
    eps: float = 1e-3

    jump_dim = 1

    def __post_init__(self):
        if self.c_minus < 0 or self.c_plus < 0 or self.c_minus + self.c_plus == 0:
            raise ModelError("C_- and C_+ must be non-negative and not both zero")
        if not 0.0 < self.alpha < 2.0:
            raise ModelError("alpha must lie in (0, 2)")
        if not self.mu > 0.0:
            raise ModelError("mu must be positive")
        if not self.eps > 0.0:
            raise ModelError("truncation eps must be positive")
        mass = _quad_sum(lambda z: np.minimum(z * z, 1.0) * self.density(z), self._breaks(0.0))
        if not np.isfinite(mass):
            raise ModelError("measure does not integrate |z|^2 ^ 1")

    def density(self, z):
        z = np.asarray(z, dtype=float)
        a = np.abs(z)
        c = np.where(z < 0, self.c_minus, self.c_plus)
        with np.errstate(divide="ignore"):
            body = np.where(a <= 1.0, a ** -(self.alpha + 1.0), np.exp(-self.mu * (a - 1.0)))
        return np.where(z == 0, 0.0, c * body)

    def _breaks(self, lo):
        return [(-np.inf, -1.0), (-1.0, -lo), (lo, 1.0), (1.0, np.inf)]


LevyMeasureSpec = Union[MertonJumps, SingularTempered]


def _quad_sum(fn, intervals, epsrel=1e-12):
    total = 0.0
    for a, b in intervals:
        if a == b:
            continue
        val, _ = integrate.quad(fn, a, b, epsabs=0.0, epsrel=epsrel, limit=500)
        total += val
    return total


@dataclass(frozen=True)
class LevyDerived:
    gamma_eps: np.ndarray
    B_eps: np.ndarray
    beta_eps: np.ndarray
    lambda_eps: float
    linear_compensator: np.ndarray

    @property
    def jump_dim(self):
        return self.gamma_eps.shape[0]

    @property
    def has_small_jumps(self):
        """True when the Gaussian small-jump term is present."""
        return bool(np.any(self.B_eps != 0.0))


def _psd_sqrt(B):
    B = np.atleast_2d(B)
    if B.shape == (1, 1):
        return np.sqrt(B)
    w, V = np.linalg.eigh(B)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _singular_closed_forms(m):
    eps, a, mu = m.eps, m.alpha, m.mu
    cm, cp = m.c_minus, m.c_plus
    power_mass = (eps ** -a - 1.0) / a  # int_eps^1 u^{-a-1} du
    if np.isclose(a, 1.0, rtol=0, atol=1e-14):
        power_first = -np.log(eps)
    else:
        power_first = (1.0 - eps ** (1.0 - a)) / (1.0 - a)  # int_eps^1 u^{-a} du
    gamma = (cp - cm) * power_first
    B = (cp + cm) * eps ** (2.0 - a) / (2.0 - a)
    lam = (cp + cm) * (power_mass + 1.0 / mu)
    lin = gamma + (cp - cm) * (1.0 / mu + 1.0 / mu ** 2)
    return gamma, B, lam, lin


def singular_piece_masses(m):
    """Masses of ``nu`` on ``z < -1``, ``[-1, -eps]``, ``[eps, 1]``, ``z > 1``."""
    power_mass = (m.eps ** -m.alpha - 1.0) / m.alpha
    return np.array([m.c_minus / m.mu, m.c_minus * power_mass, m.c_plus * power_mass, m.c_plus / m.mu])


def levy_quadrature(measure):
    """Compute the same quantities as :func:`levy_derive` by adaptive quadrature."""
    if not isinstance(measure, SingularTempered):
        raise ModelError("quadrature route is only defined for SingularTempered")
    nu = measure.density
    eps = measure.eps
    large = [(-np.inf, -1.0), (-1.0, -eps), (eps, 1.0), (1.0, np.inf)]
    mid = [(-1.0, -eps), (eps, 1.0)]
    small = [(-eps, 0.0), (0.0, eps)]
    gamma = _quad_sum(lambda z: z * nu(z), mid)
    B = _quad_sum(lambda z: z * z * nu(z), small)
    lam = _quad_sum(nu, large)
    lin = _quad_sum(lambda z: z * nu(z), large)
    return LevyDerived(
        gamma_eps=np.array([gamma]),
        B_eps=np.array([[B]]),
        beta_eps=_psd_sqrt(np.array([[B]])),
        lambda_eps=float(lam),
        linear_compensator=np.array([lin]),
    )


def levy_derive(measure, verify=True):
    """Truncation quantities: ``gamma_eps``, ``B_eps``, ``beta_eps``, ``lambda_eps``
    and the large-jump mean ``int_{|z|>=eps} z nu(dz)``.

    Merton jumps are simulated exactly, so there is no small-jump part and the
    drift already carries the full compensator.
    """
    if isinstance(measure, MertonJumps):
        return LevyDerived(
            gamma_eps=np.zeros(1),
            B_eps=np.zeros((1, 1)),
            beta_eps=np.zeros((1, 1)),
            lambda_eps=float(measure.lam),
            linear_compensator=np.array([measure.lam * measure.mean_jump]),
        )
    if not isinstance(measure, SingularTempered):
        raise ModelError(f"unsupported measure {type(measure).__name__}")
    if measure.eps >= 1.0:
        raise ModelError("truncation eps must be < 1 (closed forms assume eps inside the power-law region)")
    gamma, B, lam, lin = _singular_closed_forms(measure)
    derived = LevyDerived(
        gamma_eps=np.array([gamma]),
        B_eps=np.array([[B]]),
        beta_eps=_psd_sqrt(np.array([[B]])),
        lambda_eps=float(lam),
        linear_compensator=np.array([lin]),
    )
    if verify:
        _verify_closed_forms(derived, levy_quadrature(measure), first_moment_scale(measure))
    return derived


def first_moment_scale(m):
    """``int_{|z|>=eps} |z| nu(dz)``; the natural size of the signed first moments."""
    a = m.alpha
    if np.isclose(a, 1.0, rtol=0, atol=1e-14):
        power_first = -np.log(m.eps)
    else:
        power_first = (1.0 - m.eps ** (1.0 - a)) / (1.0 - a)
    return (m.c_minus + m.c_plus) * (power_first + 1.0 / m.mu + 1.0 / m.mu ** 2)


def _verify_closed_forms(closed, quad, moment_scale, rtol=1e-8):
    pairs = [
        ("gamma_eps", closed.gamma_eps, quad.gamma_eps, moment_scale),
        ("B_eps", closed.B_eps, quad.B_eps, 0.0),
        ("lambda_eps", closed.lambda_eps, quad.lambda_eps, 0.0),
        ("linear_compensator", closed.linear_compensator, quad.linear_compensator, moment_scale),
    ]
    for name, a, b, floor in pairs:
        scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
        if scale > 0 and np.max(np.abs(np.asarray(a) - np.asarray(b))) > rtol * scale:
            raise ModelError(f"closed form for {name} disagrees with quadrature")


def sample_large_jump(derived, measure, rng, size=None):
    """Draw jumps with density ``nu(z) 1{|z| > eps} / lambda_eps``.

    Returns shape ``(size, q)`` (or ``(q,)`` when ``size`` is None).
    """
    n = 1 if size is None else int(size)
    if isinstance(measure, MertonJumps):
        z = np.expm1(rng.normal(measure.alpha_j, measure.gamma_j, n))
    else:
        masses = singular_piece_masses(measure)
        cum = np.cumsum(masses) / masses.sum()
        u = rng.random(n)
        v = rng.random(n)
        piece = np.minimum(np.searchsorted(cum, u, side="right"), 3)
        a = measure.alpha
        top = measure.eps ** -a
        power = (top - v * (top - 1.0)) ** (-1.0 / a)
        tail = 1.0 - np.log1p(-v) / measure.mu
        mag = np.where((piece == 0) | (piece == 3), tail, power)
        z = np.where(piece <= 1, -mag, mag)
    z = z.reshape(n, 1)
    return z[0] if size is None else z


# ---------------------------------------------------------------------------
# Payoffs


@dataclass(frozen=True)
class Payoff:
    """European payoff on the model's underlier prices ``s`` of shape ``(M, n)``."""

    kind: str  # "call" | "call_on_max"
    K: float

    def __post_init__(self):
        if self.kind not in ("call", "call_on_max"):
            raise ValueError(f"unknown payoff kind {self.kind!r}")

    def __call__(self, s):
        s = np.atleast_2d(np.asarray(s, dtype=float))
        if self.kind == "call":
            return np.maximum(s[:, 0] - self.K, 0.0)
        return np.maximum(s.max(axis=1) - self.K, 0.0)


def Call(K):
    return Payoff("call", K)


def CallOnMax(K):
    return Payoff("call_on_max", K)


# ---------------------------------------------------------------------------
# Models


@dataclass(frozen=True, eq=False)
class ModelSpec:
    kind: str
    dim: int
    jump_dim: int
    x0: np.ndarray
    T: float
    rate: float
    drift: Callable
    diffusion: Callable
    discount: Callable
    running_cost: Callable
    underlier: Callable
    jump_coeff: Optional[Callable] = None
    measure: Optional[LevyMeasureSpec] = None
    params: dict = field(default_factory=dict)
    derived: Optional[LevyDerived] = None

    @property
    def has_jumps(self):
        return self.measure is not None

    @property
    def spot0(self):
        return self.underlier(0.0, self.x0[None, :])[0]

    def describe(self):
        """JSON-friendly description (used in manifests and hashes)."""
        out = {"kind": self.kind, "dim": self.dim, "T": self.T, "rate": self.rate}
        out.update({k: _jsonable(v) for k, v in self.params.items()})
        return out


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (SingularTempered, MertonJumps)):
        return {"type": type(v).__name__, **{k: getattr(v, k) for k in v.__dataclass_fields__}}
    return v


def _zeros_m(t, x):
    return np.zeros(x.shape[0])


def _const_rate(c):
    def rate(t, x):
        return np.full(x.shape[0], c)

    return rate


def _check_correlation(rho, d):
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (d, d):
        raise ModelError(f"correlation must be {d}x{d}")
    if not np.allclose(rho, rho.T, atol=1e-12):
        raise ModelError("correlation must be symmetric")
    if not np.allclose(np.diag(rho), 1.0, atol=1e-12):
        raise ModelError("correlation must have unit diagonal")
    try:
        return np.linalg.cholesky(rho)
    except np.linalg.LinAlgError:
        raise ModelError("correlation matrix is not positive definite") from None


def build_gbm(r, sigma, correlation=None, d=1, x0=1.0, T=3.0):
    """Geometric Brownian motion in ``d`` assets with common volatility."""
    if sigma < 0:
        raise ModelError("volatility must be non-negative")
    L = np.eye(d) if correlation is None else _check_correlation(correlation, d)
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (d,)).copy()

    def drift(t, x):
        return r * x

    def diffusion(t, x):
        return sigma * x[:, :, None] * L[None, :, :]

    return ModelSpec(
        kind="gbm",
        dim=d,
        jump_dim=0,
        x0=x0,
        T=float(T),
        rate=float(r),
        drift=drift,
        diffusion=diffusion,
        discount=_const_rate(-r),
        running_cost=_zeros_m,
        underlier=lambda t, x: x,
        params=dict(r=r, sigma=sigma, correlation=None if correlation is None else np.asarray(correlation), L=L),
    )


def build_heston(r, kappa, theta, sigma_v, rho, v0, x0=1.0, T=3.0):
    """Heston model with state ``(X, V)``; driven by two independent Brownian motions."""
    if not -1.0 < rho < 1.0:
        raise ModelError("rho must lie in (-1, 1)")
    if kappa <= 0 or theta <= 0 or sigma_v < 0 or v0 < 0:
        raise ModelError("kappa, theta must be positive and sigma_v, v0 non-negative")
    if not 2.0 * kappa * theta > sigma_v ** 2:
        raise ModelError("Feller-type condition 2*kappa*theta > sigma_v**2 violated")
    rho_c = np.sqrt(1.0 - rho * rho)

    def drift(t, x):
        return np.stack([r * x[:, 0], kappa * (theta - x[:, 1])], axis=1)

    def diffusion(t, x):
        sv = np.sqrt(np.maximum(x[:, 1], 0.0))
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = sv * x[:, 0]
        out[:, 1, 0] = sigma_v * rho * sv
        out[:, 1, 1] = sigma_v * rho_c * sv
        return out

    return ModelSpec(
        kind="heston",
        dim=2,
        jump_dim=0,
        x0=np.array([float(x0), float(v0)]),
        T=float(T),
        rate=float(r),
        drift=drift,
        diffusion=diffusion,
        discount=_const_rate(-r),
        running_cost=_zeros_m,
        underlier=lambda t, x: x[:, :1],
        params=dict(r=r, kappa=kappa, theta=theta, sigma_v=sigma_v, rho=rho, v0=v0),
    )


def build_merton(r, sigma, lam, alpha_j, gamma_j, x0=1.0, T=3.0):
    """Merton jump-diffusion for one asset, jumps applied multiplicatively."""
    measure = MertonJumps(lam, alpha_j, gamma_j)
    if sigma < 0:
        raise ModelError("volatility must be non-negative")
    beta = measure.mean_jump
    mu = r - lam * beta

    def drift(t, x):
        return mu * x

    def diffusion(t, x):
        return sigma * x[:, :, None]

    def jump_coeff(t, x):
        return x[:, :, None]

    return ModelSpec(
        kind="merton",
        dim=1,
        jump_dim=1,
        x0=np.array([float(x0)]),
        T=float(T),
        rate=float(r),
        drift=drift,
        diffusion=diffusion,
        discount=_const_rate(-r),
        running_cost=_zeros_m,
        underlier=lambda t, x: x,
        jump_coeff=jump_coeff,
        measure=measure,
        params=dict(r=r, sigma=sigma, lam=lam, alpha_j=alpha_j, gamma_j=gamma_j, beta=beta),
        derived=levy_derive(measure),
    )


def _phi(y):
    # e^y - 1 - y without cancellation near 0
    y = np.asarray(y, dtype=float)
    small = np.abs(y) < 1e-3
    series = y * y * (0.5 + y * (1.0 / 6.0 + y * (1.0 / 24.0 + y / 120.0)))
    return np.where(small, series, np.expm1(y) - y)


def exp_levy_compensator(f, measure, epsrel=1e-10):
    """``int (e^{f z} - 1 - f z 1{|z|<1}) nu(dz)`` by adaptive Gauss-Kronrod."""
    if not isinstance(measure, SingularTempered):
        raise ModelError("exponential Levy model needs a SingularTempered measure")
    if f == 0.0:
        return 0.0
    if abs(f) >= measure.mu:
        raise ModelError(f"compensator integral diverges: |f|={abs(f)} >= mu={measure.mu}")
    a1 = -(measure.alpha + 1.0)
    mu = measure.mu
    cm, cp = measure.c_minus, measure.c_plus
    # tails written as differences of exponentials so nothing overflows
    pieces = [
        (lambda z: cm * (np.exp(f * z + mu * (z + 1.0)) - np.exp(mu * (z + 1.0))), -np.inf, -1.0),
        (lambda z: cm * _phi(f * z) * (-z) ** a1, -1.0, 0.0),
        (lambda z: cp * _phi(f * z) * z ** a1, 0.0, 1.0),
        (lambda z: cp * (np.exp(f * z - mu * (z - 1.0)) - np.exp(-mu * (z - 1.0))), 1.0, np.inf),
    ]
    total = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            for fn, a, b in pieces:
                val, _ = integrate.quad(fn, a, b, epsabs=0.0, epsrel=epsrel, limit=500)
                total += val
        except integrate.IntegrationWarning as exc:
            raise ModelError(f"drift quadrature did not converge: {exc}") from None
    return total


def build_exp_levy(r, sigma, F, measure, spot0=1.0, T=3.0):
    """Exponential Levy model ``S_i(t) = S_i(0) exp(r t + X_i(t))``.

    The state is the log-return ``X``; ``sigma`` is a constant ``d x d`` matrix
    and ``F`` a constant vector of jump loadings.  The drift makes every
    discounted price a martingale.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    F = np.asarray(F, dtype=float).reshape(-1)
    d = F.shape[0]
    if sigma.shape != (d, d):
        raise ModelError("sigma must be d x d with d = len(F)")
    b = np.array([-0.5 * np.sum(sigma[i] ** 2) - exp_levy_compensator(F[i], measure) for i in range(d)])
    spot0 = np.broadcast_to(np.asarray(spot0, dtype=float), (d,)).copy()
    Fm = F.reshape(d, 1)

    def drift(t, x):
        return np.broadcast_to(b, x.shape)

    def diffusion(t, x):
        return np.broadcast_to(sigma, (x.shape[0], d, d))

    def jump_coeff(t, x):
        return np.broadcast_to(Fm, (x.shape[0], d, 1))

    def underlier(t, x):
        t = np.asarray(t, dtype=float)
        if t.ndim == 1:
            t = t[:, None]
        return spot0 * np.exp(r * t + x)

    return ModelSpec(
        kind="exp_levy",
        dim=d,
        jump_dim=1,
        x0=np.zeros(d),
        T=float(T),
        rate=float(r),
        drift=drift,
        diffusion=diffusion,
        discount=_const_rate(-r),
        running_cost=_zeros_m,
        underlier=underlier,
        jump_coeff=jump_coeff,
        measure=measure,
        params=dict(r=r, sigma=sigma, F=F, measure=measure, spot0=spot0, b=b),
        derived=levy_derive(measure),
    )
