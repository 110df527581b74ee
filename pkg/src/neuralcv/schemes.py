"""Time stepping for the (controlled) SDE systems.

A batch of paths is advanced in lock-step.  For the jump-adapted scheme every
path has its own random grid, so paths that have already reached ``T`` are
padded with zero-length steps; those contribute nothing to any sum and are
masked out of recorded trajectories by ``PathBatch.n_steps``.

Controls are optional callables ``control(t, x) -> (n, n_out)`` whose columns
are laid out as described by :class:`ControlLayout`.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _rng
from .models import sample_large_jump

SCHEME_KINDS = ("euler", "heston", "jump_adapted")


@dataclass(frozen=True)
class SchemeSpec:
    kind: str
    h: float

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown scheme {self.kind!r}")
        if not self.h > 0:
            raise ValueError("step size must be positive")

    def n_steps(self, T):
        N = int(round(T / self.h))
        if N < 1 or not np.isclose(N * self.h, T, rtol=1e-9, atol=0.0):
            raise ValueError(f"step {self.h} does not divide horizon {T}")
        return N

    def coarsened(self, factor):
        return SchemeSpec(self.kind, self.h * factor)


def default_scheme(model, h):
    if model.kind == "heston":
        return SchemeSpec("heston", h)
    if model.has_jumps:
        return SchemeSpec("jump_adapted", h)
    return SchemeSpec("euler", h)


@dataclass(frozen=True)
class ControlLayout:
    """Column layout of control outputs.

    Brownian models use ``G`` against the ``d`` Brownian increments.  Jump
    models add ``G_W`` against the small-jump Brownian motion (only when the
    measure has a small-jump part) and the linear jump control ``g_N``.
    """

    d: int
    q: int = 0
    small_jumps: bool = False

    @property
    def n_out(self):
        return self.d + (self.q if self.small_jumps else 0) + self.q

    @property
    def w(self):
        return slice(0, self.d)

    @property
    def W(self):
        return slice(self.d, self.d + self.q) if self.small_jumps else slice(self.d, self.d)

    @property
    def N(self):
        start = self.d + (self.q if self.small_jumps else 0)
        return slice(start, start + self.q)

    @property
    def mode(self):
        return "levy" if self.q else "brownian"


def control_layout(model):
    if model.has_jumps:
        return ControlLayout(model.dim, model.jump_dim, model.derived.has_small_jumps)
    return ControlLayout(model.dim)


@dataclass
class TrajectoryRecord:
    """One stored path.  ``jump_sizes`` rows are zero at deterministic steps."""

    times: np.ndarray
    states_X: np.ndarray
    states_Y: np.ndarray
    step_kinds: list
    brownian_w: np.ndarray
    brownian_W: Optional[np.ndarray]
    jump_sizes: Optional[np.ndarray]
    terminal_gamma_base: float


@dataclass
class PathBatch:
    """Padded storage for many trajectories; axis 0 is the step, axis 1 the path."""

    t: np.ndarray
    dt: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    dw: np.ndarray
    dW: Optional[np.ndarray]
    jump: Optional[np.ndarray]
    is_jump: Optional[np.ndarray]
    n_steps: np.ndarray
    X_T: np.ndarray
    Y_T: np.ndarray
    gamma_base: np.ndarray

    @property
    def M(self):
        return self.gamma_base.shape[0]

    @property
    def S(self):
        return self.t.shape[0]

    def valid(self):
        return np.arange(self.S)[:, None] < self.n_steps[None, :]

    def record(self, m):
        n = int(self.n_steps[m])
        times = np.append(self.t[:n, m], self.t[n - 1, m] + self.dt[n - 1, m])
        X = np.vstack([self.X[:n, m], self.X_T[m][None]])
        Y = np.append(self.Y[:n, m], self.Y_T[m])
        kinds = ["Deterministic"] * n
        jump = None
        if self.is_jump is not None:
            kinds = ["Jump" if j else "Deterministic" for j in self.is_jump[:n, m]]
            jump = self.jump[:n, m].copy()
        return TrajectoryRecord(
            times=times,
            states_X=X,
            states_Y=Y,
            step_kinds=kinds,
            brownian_w=self.dw[:n, m].copy(),
            brownian_W=None if self.dW is None else self.dW[:n, m].copy(),
            jump_sizes=jump,
            terminal_gamma_base=float(self.gamma_base[m]),
        )

    def subset(self, idx):
        """Paths ``idx`` only (step axis trimmed to the longest of them)."""
        idx = np.asarray(idx)
        S = int(self.n_steps[idx].max())

        def take(a):
            return None if a is None else a[:S, idx]

        return PathBatch(
            t=take(self.t), dt=take(self.dt), X=take(self.X), Y=take(self.Y), dw=take(self.dw),
            dW=take(self.dW), jump=take(self.jump), is_jump=take(self.is_jump),
            n_steps=self.n_steps[idx], X_T=self.X_T[idx], Y_T=self.Y_T[idx],
            gamma_base=self.gamma_base[idx],
        )

    @staticmethod
    def concatenate(parts):
        S = max(p.S for p in parts)

        def cat(name):
            arrays = [getattr(p, name) for p in parts]
            if arrays[0] is None:
                return None
            padded = []
            for a in arrays:
                if a.shape[0] < S:
                    pad = np.zeros((S - a.shape[0],) + a.shape[1:], dtype=a.dtype)
                    if name == "t":
                        pad[:] = a[-1:] + 0.0
                    a = np.concatenate([a, pad], axis=0)
                padded.append(a)
            return np.concatenate(padded, axis=1)

        fields = {name: cat(name) for name in ("t", "dt", "X", "Y", "dw", "dW", "jump", "is_jump")}
        for name in ("n_steps", "X_T", "Y_T", "gamma_base"):
            fields[name] = np.concatenate([getattr(p, name) for p in parts])
        return PathBatch(**fields)


@dataclass
class SimResult:
    gamma: np.ndarray
    X_T: np.ndarray
    Y_T: np.ndarray
    Z_T: np.ndarray
    n_steps: np.ndarray
    batch: Optional[PathBatch] = None


# ---------------------------------------------------------------------------
# single steps


def euler_step(model, t, x, h, dW):
    """Explicit Euler: ``x + b(t, x) h + sigma(t, x) dW`` (vectorised over rows)."""
    x = np.atleast_2d(x)
    dW = np.atleast_2d(dW)
    return x + model.drift(t, x) * h + np.einsum("mij,mj->mi", model.diffusion(t, x), dW)


def heston_step(params, x, v, h, dW1, dW2):
    """Explicit Euler for the price, fully implicit Euler for the variance.

    The implicit variance equation is a quadratic in ``sqrt(v')`` whose
    positive root is taken; it is positive whenever
    ``v + (kappa theta - sigma_v^2 / 2) h > 0``.
    """
    r, kappa, theta = params["r"], params["kappa"], params["theta"]
    sv, rho = params["sigma_v"], params["rho"]
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    dWv = rho * dW1 + np.sqrt(1.0 - rho * rho) * dW2
    x_new = x + r * x * h + np.sqrt(v) * x * dW1
    a = 1.0 + kappa * h
    c = v + kappa * theta * h - 0.5 * sv * sv * h
    disc = sv * sv * dWv * dWv + 4.0 * a * c
    assert np.all(disc >= 0.0), "negative discriminant in implicit variance step"
    root = (sv * dWv + np.sqrt(disc)) / (2.0 * a)
    return x_new, root * root


# ---------------------------------------------------------------------------
# path blocks


def _uniform_block(model, scheme, payoff, n, rng, record, control, layout):
    T = model.T
    N = scheme.n_steps(T)
    h = T / N
    sq = np.sqrt(h)
    d = model.dim
    x = np.tile(model.x0, (n, 1))
    y = np.ones(n)
    z = np.zeros(n)
    heston = scheme.kind == "heston"
    if heston and model.kind != "heston":
        raise ValueError("heston scheme requires a Heston model")
    rec = {k: [] for k in ("t", "X", "Y", "dw")} if record else None
    for k in range(N):
        t = T * k / N
        dw = rng.standard_normal((n, d)) * sq
        if record:
            rec["t"].append(np.full(n, t))
            rec["X"].append(x)
            rec["Y"].append(y)
            rec["dw"].append(dw)
        if control is not None:
            G = control(np.full(n, t), x)
            z = z + y * np.einsum("mi,mi->m", G[:, layout.w], dw)
        z = z + model.running_cost(t, x) * y * h
        c = model.discount(t, x)
        if heston:
            xs, vs = heston_step(model.params, x[:, 0], x[:, 1], h, dw[:, 0], dw[:, 1])
            x = np.stack([xs, vs], axis=1)
        else:
            x = euler_step(model, t, x, h, dw)
        y = y + c * y * h
    gamma = payoff(model.underlier(T, x)) * y + z
    batch = None
    if record:
        t_arr = np.stack(rec["t"])
        batch = PathBatch(
            t=t_arr, dt=np.full_like(t_arr, h), X=np.stack(rec["X"]), Y=np.stack(rec["Y"]),
            dw=np.stack(rec["dw"]), dW=None, jump=None, is_jump=None,
            n_steps=np.full(n, N), X_T=x, Y_T=y, gamma_base=gamma,
        )
    return SimResult(gamma, x, y, z, np.full(n, N), batch)


def _jump_adapted_block(model, scheme, payoff, n, rng, record, control, layout):
    T = model.T
    N = scheme.n_steps(T)
    der = model.derived
    lam = der.lambda_eps
    d, q = model.dim, model.jump_dim
    small = der.has_small_jumps
    Fgamma = der.gamma_eps
    beta = der.beta_eps
    lin = der.linear_compensator

    x = np.tile(model.x0, (n, 1))
    y = np.ones(n)
    z = np.zeros(n)
    t = np.zeros(n)
    grid = np.zeros(n, dtype=np.int64)  # index of the next grid point is grid + 1
    next_jump = rng.exponential(1.0 / lam, n) if lam > 0 else np.full(n, np.inf)
    steps = np.zeros(n, dtype=np.int64)
    rec = {k: [] for k in ("t", "dt", "X", "Y", "dw", "dW", "jump", "is_jump")} if record else None

    while True:
        live = grid < N
        if not live.any():
            break
        next_grid = T * (grid + 1) / N
        is_jump = live & (next_jump < next_grid)
        t_next = np.where(is_jump, next_jump, next_grid)
        dt = np.where(live, t_next - t, 0.0)
        sq = np.sqrt(dt)[:, None]
        dw = rng.standard_normal((n, d)) * sq
        dW = rng.standard_normal((n, q)) * sq if small else None
        jumps = np.zeros((n, q))
        n_j = int(is_jump.sum())
        if n_j:
            jumps[is_jump] = sample_large_jump(der, model.measure, rng, n_j)

        F = model.jump_coeff(t, x)
        incr = (model.drift(t, x) - np.einsum("mij,j->mi", F, Fgamma)) * dt[:, None]
        incr = incr + np.einsum("mij,mj->mi", model.diffusion(t, x), dw)
        if small:
            incr = incr + np.einsum("mij,mj->mi", F, dW @ beta.T)
        incr = incr + np.einsum("mij,mj->mi", F, jumps)

        if record:
            rec["t"].append(t)
            rec["dt"].append(dt)
            rec["X"].append(x)
            rec["Y"].append(y)
            rec["dw"].append(dw)
            rec["dW"].append(dW)
            rec["jump"].append(jumps)
            rec["is_jump"].append(is_jump)
        if control is not None:
            out = control(t, x)
            dz = np.einsum("mi,mi->m", out[:, layout.w], dw)
            if small:
                dz = dz + np.einsum("mi,mi->m", out[:, layout.W], dW)
            gN = out[:, layout.N]
            dz = dz + np.einsum("mi,mi->m", gN, jumps) - (gN @ lin) * dt
            z = z + y * dz
        z = z + model.running_cost(t, x) * y * dt
        c = model.discount(t, x)
        x = x + incr
        y = y + c * y * dt

        steps += live
        t = np.where(live, t_next, t)
        grid = np.where(live & ~is_jump, grid + 1, grid)
        if n_j:
            next_jump[is_jump] = t_next[is_jump] + rng.exponential(1.0 / lam, n_j)

    gamma = payoff(model.underlier(T, x)) * y + z
    batch = None
    if record:
        batch = PathBatch(
            t=np.stack(rec["t"]), dt=np.stack(rec["dt"]), X=np.stack(rec["X"]), Y=np.stack(rec["Y"]),
            dw=np.stack(rec["dw"]), dW=np.stack(rec["dW"]) if small else None,
            jump=np.stack(rec["jump"]), is_jump=np.stack(rec["is_jump"]),
            n_steps=steps, X_T=x, Y_T=y, gamma_base=gamma,
        )
    return SimResult(gamma, x, y, z, steps, batch)


def simulate_block(model, scheme, payoff, n, rng, record=False, control=None):
    """Simulate ``n`` paths with generator ``rng``; see :func:`simulate`."""
    layout = control_layout(model)
    if scheme.kind == "jump_adapted":
        if not model.has_jumps:
            raise ValueError("jump-adapted scheme needs a model with a Levy measure")
        return _jump_adapted_block(model, scheme, payoff, n, rng, record, control, layout)
    if model.has_jumps:
        raise ValueError("jump models must use the jump-adapted scheme")
    return _uniform_block(model, scheme, payoff, n, rng, record, control, layout)


def simulate(model, scheme, payoff, M, seed, purpose="paths", record=False, control=None, first_block=0):
    """Simulate ``M`` independent paths.

    Paths are grouped in blocks of ``_rng.BLOCK_SIZE``; block ``b`` is driven
    by the counter-based stream ``(seed, purpose, b)`` so results do not
    depend on how the work is scheduled.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    parts = []
    for b, n in _rng.blocks(M):
        rng = _rng.stream(seed, purpose, first_block + b)
        parts.append(simulate_block(model, scheme, payoff, n, rng, record=record, control=control))
    if len(parts) == 1:
        return parts[0]
    return SimResult(
        gamma=np.concatenate([p.gamma for p in parts]),
        X_T=np.concatenate([p.X_T for p in parts]),
        Y_T=np.concatenate([p.Y_T for p in parts]),
        Z_T=np.concatenate([p.Z_T for p in parts]),
        n_steps=np.concatenate([p.n_steps for p in parts]),
        batch=PathBatch.concatenate([p.batch for p in parts]) if record else None,
    )


def simulate_batch(model, scheme, payoff, M, seed, record=False):
    """First-pass style simulation with controls off: ``(gamma_base, records)``."""
    res = simulate(model, scheme, payoff, M, seed, record=record)
    return res.gamma, res.batch


def jump_adapted_path(model, derived, h, rng, record=True, payoff=None):
    """One jump-adapted path as a :class:`TrajectoryRecord`."""
    if derived is not model.derived:
        model = _with_derived(model, derived)
    pay = payoff if payoff is not None else (lambda s: np.zeros(s.shape[0]))
    res = _jump_adapted_block(model, SchemeSpec("jump_adapted", h), pay, 1, rng, True, None, control_layout(model))
    rec = res.batch.record(0)
    if payoff is None:
        rec.terminal_gamma_base = float("nan")
    return rec


def _with_derived(model, derived):
    from dataclasses import replace

    return replace(model, derived=derived)
