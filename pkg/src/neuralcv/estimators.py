"""Second-pass estimators: plain MC, neural control variates, MLMC and the
terminal-spot control variate.

All estimators work in blocks of ``_rng.BLOCK_SIZE`` paths.  Block ``b`` of a
run always uses the random stream ``(seed, purpose, b)``, so an estimate is a
deterministic function of its inputs.  The tolerance is checked after every
block once at least two blocks have been drawn.
"""
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtri

from . import _rng
from .models import sample_large_jump
from .schemes import SchemeSpec, control_layout, default_scheme, heston_step, simulate_block

MIN_BATCHES = 2


@dataclass
class Estimate:
    mean: float
    half_width: float
    M: int
    variance: float
    wall_time: float
    rel_err: Optional[float] = None
    tol_met: bool = True
    method: str = ""
    info: dict = field(default_factory=dict)


class RunningMoments:
    """Streaming count, mean and centred sum of squares (Chan et al. merge)."""

    def __init__(self, count=0, mean=0.0, m2=0.0):
        self.count, self.mean, self.m2 = int(count), float(mean), float(m2)

    def add(self, x):
        x = np.asarray(x, dtype=float).ravel()
        if x.size == 0:
            return self
        mb = x.mean()
        return self.merge(RunningMoments(x.size, mb, float(np.sum((x - mb) ** 2))))

    def merge(self, other):
        n = self.count + other.count
        if n == 0:
            return self
        delta = other.mean - self.mean
        self.mean = self.mean + delta * other.count / n
        self.m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        self.count = n
        return self

    @property
    def variance(self):
        return self.m2 / (self.count - 1) if self.count > 1 else float("nan")


def confidence_halfwidth(variance, M, alpha=0.05):
    """``Phi^{-1}(1 - alpha/2) * sqrt(variance / M)``."""
    if M < 2:
        raise ValueError("need M >= 2")
    return float(ndtri(1.0 - alpha / 2.0) * np.sqrt(max(variance, 0.0) / M))


def _sequential(sample, tol, alpha, max_M, block=_rng.BLOCK_SIZE):
    """Draw blocks from ``sample(b, n)`` until the half-width is below ``tol``.

    A block of identically equal samples ends the run at once (the variance is
    exactly zero); otherwise at least ``MIN_BATCHES`` blocks are drawn.
    """
    if not tol > 0:
        raise ValueError("tolerance must be positive")
    acc = RunningMoments()
    first = None
    constant = True
    b = 0
    while True:
        n = min(block, max_M - acc.count)
        x = np.asarray(sample(b, n), dtype=float)
        first = x[0] if first is None else first
        constant = constant and bool(np.all(x == first))
        acc.add(x)
        b += 1
        if constant:
            acc.mean, acc.m2 = float(first), 0.0
        hw = confidence_halfwidth(acc.variance, acc.count, alpha) if acc.count > 1 else np.inf
        exact = constant and acc.count > 1
        if exact or (b >= MIN_BATCHES and hw <= tol):
            return acc, hw, True
        if acc.count >= max_M:
            return acc, hw, hw <= tol


def _estimate(acc, hw, met, t0, method, rel=False, **info):
    var = acc.variance if acc.count > 1 else 0.0
    rel_err = float(np.sqrt(var) / acc.mean) if rel and acc.mean != 0 else None
    return Estimate(acc.mean, hw, acc.count, var, time.perf_counter() - t0, rel_err, met, method, info)


def vanilla_mc(model, scheme, payoff, tol, alpha=0.05, seed=0, max_M=10**7):
    """Plain Monte Carlo estimate of ``E[f(X_T) Y_T + Z_T]``."""
    t0 = time.perf_counter()

    def sample(b, n):
        return simulate_block(model, scheme, payoff, n, _rng.stream(seed, "paths", b)).gamma

    acc, hw, met = _sequential(sample, tol, alpha, max_M)
    return _estimate(acc, hw, met, t0, "vanilla")


def cv_mc(model, trained_controls, scheme, payoff, tol, alpha=0.05, seed=0, max_M=10**7):
    """Monte Carlo on the controlled system.

    Uses the same random streams as :func:`vanilla_mc`, so zero controls
    reproduce it exactly.
    """
    if trained_controls.layout.n_out != control_layout(model).n_out:
        raise ValueError("controls are not compatible with the model")
    t0 = time.perf_counter()

    def sample(b, n):
        return simulate_block(model, scheme, payoff, n, _rng.stream(seed, "paths", b),
                              control=trained_controls).gamma

    acc, hw, met = _sequential(sample, tol, alpha, max_M)
    return _estimate(acc, hw, met, t0, "cv", rel=True)


# ---------------------------------------------------------------------------
# terminal-spot control variate


def _spot_control(model, res):
    """``e^{-rT} S_T - S_0`` for every traded asset, shape ``(n, n_assets)``."""
    S_T = model.underlier(model.T, res.X_T)
    return np.exp(-model.rate * model.T) * S_T - model.spot0[None, :]


def crude_cv_mc(model, scheme, payoff, tol, alpha=0.05, seed=0, max_M=10**7, pilot=_rng.BLOCK_SIZE):
    """Discounted terminal spot as a linear control.

    The coefficient is fitted by least squares on an independent pilot run
    (not part of the estimate).  If the control has no variance the plain
    estimator is returned.
    """
    t0 = time.perf_counter()
    res = simulate_block(model, scheme, payoff, pilot, _rng.stream(seed, "pilot", 0))
    C = _spot_control(model, res)
    Cc = C - C.mean(axis=0)
    P = res.gamma - res.gamma.mean()
    cov = Cc.T @ Cc / (pilot - 1)
    if np.all(np.abs(np.diag(cov)) < 1e-300):
        coef = np.zeros(C.shape[1])
        degenerate = True
    else:
        coef = -np.linalg.lstsq(cov, Cc.T @ P / (pilot - 1), rcond=None)[0]
        degenerate = False

    def sample(b, n):
        r = simulate_block(model, scheme, payoff, n, _rng.stream(seed, "paths", b))
        return r.gamma + _spot_control(model, r) @ coef

    acc, hw, met = _sequential(sample, tol, alpha, max_M)
    return _estimate(acc, hw, met, t0, "crude_cv", coef=coef.tolist(), degenerate=degenerate)


# ---------------------------------------------------------------------------
# multilevel Monte Carlo


def _coupled_uniform(model, payoff, h_f, factor, n, rng):
    """Fine/coarse Euler (or Heston) pairs sharing Brownian increments."""
    T = model.T
    Nc = SchemeSpec("euler", h_f * factor).n_steps(T)
    h_c = T / Nc
    h = h_c / factor
    d = model.dim
    heston = model.kind == "heston"
    xf = np.tile(model.x0, (n, 1))
    xc = xf.copy()
    yf = np.ones(n)
    yc = np.ones(n)
    zf = np.zeros(n)
    zc = np.zeros(n)

    def step(x, y, z, t, dt, dw):
        z = z + model.running_cost(t, x) * y * dt
        c = model.discount(t, x)
        if heston:
            xs, vs = heston_step(model.params, x[:, 0], x[:, 1], dt, dw[:, 0], dw[:, 1])
            x = np.stack([xs, vs], axis=1)
        else:
            x = x + model.drift(t, x) * dt + np.einsum("mij,mj->mi", model.diffusion(t, x), dw)
        return x, y + c * y * dt, z

    for kc in range(Nc):
        dwc = np.zeros((n, d))
        for j in range(factor):
            t = T * (kc * factor + j) / (Nc * factor)
            dw = rng.standard_normal((n, d)) * np.sqrt(h)
            dwc += dw
            xf, yf, zf = step(xf, yf, zf, t, h, dw)
        xc, yc, zc = step(xc, yc, zc, T * kc / Nc, h_c, dwc)
    pf = payoff(model.underlier(T, xf)) * yf + zf
    pc = payoff(model.underlier(T, xc)) * yc + zc
    return pf, pc


def _coupled_jump(model, payoff, h_f, factor, n, rng):
    """Fine/coarse jump-adapted pairs with identical jump times and sizes.

    Both paths see the same jumps.  Between events the fine path steps on
    its own grid; the coarse path accumulates the increments and updates only
    at coarse grid points and at jumps.
    """
    T = model.T
    Nc = SchemeSpec("jump_adapted", h_f * factor).n_steps(T)
    Nf = Nc * factor
    der = model.derived
    lam = der.lambda_eps
    d, q = model.dim, model.jump_dim
    small = der.has_small_jumps

    def drift_part(t, x):
        return model.drift(t, x) - np.einsum("mij,j->mi", model.jump_coeff(t, x), der.gamma_eps)

    xf = np.tile(model.x0, (n, 1))
    xc = xf.copy()
    yf, yc = np.ones(n), np.ones(n)
    zf, zc = np.zeros(n), np.zeros(n)
    t = np.zeros(n)
    tc = np.zeros(n)  # time of the coarse path's last update
    acc_w = np.zeros((n, d))
    acc_W = np.zeros((n, q))
    grid = np.zeros(n, dtype=np.int64)
    next_jump = rng.exponential(1.0 / lam, n) if lam > 0 else np.full(n, np.inf)
    while True:
        live = grid < Nf
        if not live.any():
            break
        next_grid = T * (grid + 1) / Nf
        is_jump = live & (next_jump < next_grid)
        t_next = np.where(is_jump, next_jump, next_grid)
        dt = np.where(live, t_next - t, 0.0)
        sq = np.sqrt(dt)[:, None]
        dw = rng.standard_normal((n, d)) * sq
        dW = rng.standard_normal((n, q)) * sq if small else np.zeros((n, q))
        jumps = np.zeros((n, q))
        n_j = int(is_jump.sum())
        if n_j:
            jumps[is_jump] = sample_large_jump(der, model.measure, rng, n_j)

        # fine update
        F = model.jump_coeff(t, xf)
        incr = drift_part(t, xf) * dt[:, None] + np.einsum("mij,mj->mi", model.diffusion(t, xf), dw)
        incr += np.einsum("mij,mj->mi", F, dW @ der.beta_eps.T + jumps)
        zf = zf + model.running_cost(t, xf) * yf * dt
        cf = model.discount(t, xf)
        xf = xf + incr
        yf = yf + cf * yf * dt

        # coarse update at coarse grid points and jumps
        acc_w += dw
        acc_W += dW
        new_grid = np.where(live & ~is_jump, grid + 1, grid)
        at_coarse = live & ((is_jump) | (new_grid % factor == 0))
        dtc = np.where(at_coarse, t_next - tc, 0.0)
        m = at_coarse[:, None]
        Fc = model.jump_coeff(tc, xc)
        inc_c = drift_part(tc, xc) * dtc[:, None] + np.einsum("mij,mj->mi", model.diffusion(tc, xc), acc_w)
        inc_c += np.einsum("mij,mj->mi", Fc, acc_W @ der.beta_eps.T + jumps)
        zc = zc + np.where(at_coarse, model.running_cost(tc, xc) * yc * dtc, 0.0)
        cc = model.discount(tc, xc)
        xc = np.where(m, xc + inc_c, xc)
        yc = np.where(at_coarse, yc + cc * yc * dtc, yc)
        acc_w = np.where(m, 0.0, acc_w)
        acc_W = np.where(m, 0.0, acc_W)
        tc = np.where(at_coarse, t_next, tc)

        t = np.where(live, t_next, t)
        grid = new_grid
        if n_j:
            next_jump[is_jump] = t_next[is_jump] + rng.exponential(1.0 / lam, n_j)
    pf = payoff(model.underlier(T, xf)) * yf + zf
    pc = payoff(model.underlier(T, xc)) * yc + zc
    return pf, pc


def _level_sampler(model, payoff, h_levels, factor, seed):
    jump = model.has_jumps

    def sample(level, b, n):
        rng = _rng.stream(seed, f"mlmc{level}", b)
        if level == 0:
            return simulate_block(model, default_scheme(model, h_levels[0]), payoff, n, rng).gamma
        if jump:
            pf, pc = _coupled_jump(model, payoff, h_levels[level], factor, n, rng)
        else:
            pf, pc = _coupled_uniform(model, payoff, h_levels[level], factor, n, rng)
        return pf - pc

    return sample


def level_cost(model, h, coupled):
    """Work per sample in path steps (fine plus coarse, plus expected jumps)."""
    steps = model.T / h
    if coupled:
        steps *= 1.0 + 1.0 / coupled
    if model.has_jumps:
        steps += model.derived.lambda_eps * model.T * (2 if coupled else 1)
    return steps


def mlmc(model, payoff, h_finest, level_factor, n_levels, tol, alpha=0.05, seed=0, pilot=_rng.BLOCK_SIZE,
         max_M_level=10**7):
    """Multilevel Monte Carlo with geometric levels ``h_finest * level_factor**k``.

    Samples per level follow ``M_l ~ sqrt(V_l / C_l)``, sized so the
    statistical half-width is ``tol / sqrt(2)``; the remaining ``tol / sqrt(2)``
    is the budget for the bias, estimated from the finest correction as
    ``|E[P_L - P_{L-1}]| / (level_factor - 1)``.
    """
    if level_factor < 2 or n_levels < 1:
        raise ValueError("need level_factor >= 2 and n_levels >= 1")
    T = model.T
    if h_finest * level_factor ** (n_levels - 1) > T * (1 + 1e-12):
        raise ValueError("coarsest level step exceeds the horizon")
    t0 = time.perf_counter()
    h_levels = [h_finest * level_factor ** (n_levels - 1 - l) for l in range(n_levels)]
    for h in h_levels:
        default_scheme(model, h).n_steps(T)
    sample = _level_sampler(model, payoff, h_levels, level_factor, seed)
    cost = np.array([level_cost(model, h, level_factor if l else 0) for l, h in enumerate(h_levels)])
    accs = [RunningMoments() for _ in range(n_levels)]
    blocks = [0] * n_levels
    z = ndtri(1.0 - alpha / 2.0)
    target = tol / np.sqrt(2.0)

    def draw(l, n_more):
        while n_more > 0:
            n = min(_rng.BLOCK_SIZE, n_more)
            accs[l].add(sample(l, blocks[l], n))
            blocks[l] += 1
            n_more -= n

    for l in range(n_levels):
        draw(l, pilot)
    capped = False
    for _ in range(20):
        V = np.array([max(a.variance, 0.0) for a in accs])
        total = np.sum(np.sqrt(V * cost))
        want = np.ceil((z / target) ** 2 * np.sqrt(V / cost) * total).astype(np.int64)
        want = np.minimum(want, max_M_level)
        capped = capped or bool(np.any(want >= max_M_level))
        extra = [max(int(w) - a.count, 0) for w, a in zip(want, accs)]
        if not any(extra):
            break
        for l, e in enumerate(extra):
            draw(l, e)
    V = np.array([max(a.variance, 0.0) for a in accs])
    M = np.array([a.count for a in accs])
    mean = float(sum(a.mean for a in accs))
    hw = float(z * np.sqrt(np.sum(V / M)))
    bias = abs(accs[-1].mean) / (level_factor - 1) if n_levels > 1 else float("nan")
    met = hw <= target * (1 + 1e-12) or hw <= tol
    bias_ok = (not n_levels > 1) or bias <= target
    info = {"levels": [T / h for h in h_levels], "M_l": M.tolist(), "V_l": V.tolist(),
            "means": [a.mean for a in accs], "bias_estimate": bias, "bias_ok": bool(bias_ok), "capped": capped}
    return Estimate(mean, hw, int(M.sum()), float(np.sum(V / M) * M.sum()), time.perf_counter() - t0,
                    None, bool(met and bias_ok), "mlmc", info)
