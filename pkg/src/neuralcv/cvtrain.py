"""Two-pass training of neural control variates.

The first pass simulates coarse paths with the controls switched off and
keeps every state and random increment.  Because the controlled quantity

    Gamma_theta = Gamma_0 + sum_k < G_theta(t_k, X_k), coef_k >

is linear in the network outputs, each stored step is reduced to one row:
the network input ``(t_k, X_k)`` and a coefficient vector ``coef_k``
(``Y_k dw_k`` for Brownian controls; ``Y_k dw_k``, ``Y_k dW_k`` and
``Y_k (J_k - linear_compensator * theta_k)`` for Levy controls).  Training
then minimises the sample variance of the replayed Gamma with Adam.
"""
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtri

from . import _rng
from .neuralnet import (
    AdamState,
    NetworkParams,
    _forward,
    adam_step,
    backward,
    batch_stats,
    control_architecture,
    forward,
    forward_with_cache,
    init_params,
    update_running_stats,
)
from .schemes import SchemeSpec, control_layout, default_scheme, simulate, simulate_block

ROW_CHUNK = 200_000


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults are the published ones."""

    max_epochs: int = 20
    batch_size: int = 2000
    step_factor: int = 5
    lr: float = 1e-3
    hidden_layers: int = 3
    hidden_size: int = 50
    M_r: int = 30_000
    alpha: float = 0.05
    eps_tol: float = 1e-4
    cost_model: str = "work"  # "work" (deterministic) or "wall"
    cost_batch: Optional[float] = None
    use_stopping_rule: bool = True
    dtype: str = "float32"  # precision of the network arithmetic during training
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 2 or self.step_factor < 1:
            raise ValueError("max_epochs >= 1, batch_size >= 2 and step_factor >= 1 required")
        if self.cost_model not in ("work", "wall"):
            raise ValueError("cost_model must be 'work' or 'wall'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        if not (0 < self.alpha < 1 and self.eps_tol > 0 and self.lr > 0):
            raise ValueError("alpha in (0,1), eps_tol > 0 and lr > 0 required")


@dataclass
class TrainingDataset:
    """Stored first-pass trajectories, flattened into replay rows."""

    model: object
    payoff: object
    scheme: SchemeSpec
    layout: object
    inputs: np.ndarray  # (R, 1 + d): (t_k, X_k)
    coef: np.ndarray  # (R, n_out)
    offsets: np.ndarray  # (M + 1,) rows of path m are offsets[m]:offsets[m+1]
    gamma_base: np.ndarray  # (M,)
    batch: object = None  # the PathBatch the rows were built from

    @property
    def M(self):
        return self.gamma_base.shape[0]

    @property
    def n_rows(self):
        return self.inputs.shape[0]

    @property
    def mode(self):
        return self.layout.mode

    def record(self, m):
        if self.batch is None:
            raise TrainingError("trajectory records were not kept")
        return self.batch.record(m)

    @property
    def records(self):
        return [self.record(m) for m in range(self.M)]

    def rows_of(self, idx):
        """Row indices of paths ``idx`` and the position of each row's path in ``idx``."""
        idx = np.asarray(idx)
        starts = self.offsets[idx]
        lengths = self.offsets[idx + 1] - starts
        total = int(lengths.sum())
        first = np.cumsum(lengths) - lengths
        rows = np.arange(total) + np.repeat(starts - first, lengths)
        owner = np.repeat(np.arange(idx.shape[0]), lengths)
        return rows, owner


def dataset_from_batch(model, payoff, scheme, batch):
    layout = control_layout(model)
    valid = batch.valid().T  # (M, S), path-major so rows of a path are contiguous
    t = batch.t.T[valid]
    X = batch.X.transpose(1, 0, 2)[valid]
    Y = batch.Y.T[valid][:, None]
    parts = [Y * batch.dw.transpose(1, 0, 2)[valid]]
    if layout.mode == "levy":
        der = model.derived
        if layout.small_jumps:
            parts.append(Y * batch.dW.transpose(1, 0, 2)[valid])
        dt = batch.dt.T[valid][:, None]
        jumps = batch.jump.transpose(1, 0, 2)[valid]
        parts.append(Y * (jumps - der.linear_compensator[None, :] * dt))
    coef = np.concatenate(parts, axis=1)
    offsets = np.concatenate([[0], np.cumsum(batch.n_steps)]).astype(np.int64)
    return TrainingDataset(model, payoff, scheme, layout, np.column_stack([t, X]), coef, offsets,
                           batch.gamma_base.copy(), batch)


def first_pass(model, payoff, scheme_r, M_r, seed):
    """Simulate and store ``M_r`` coarse trajectories with all controls zero."""
    res = simulate(model, scheme_r, payoff, M_r, seed, purpose="first_pass", record=True)
    return dataset_from_batch(model, payoff, scheme_r, res.batch)


def coarse_scheme(model, h, step_factor):
    return default_scheme(model, h * step_factor)


# ---------------------------------------------------------------------------
# replay


def _chunk_forward(params, x, stats, dtype=None):
    return _forward(params, x, stats, keep=False, dtype=dtype)


def _inference_stats(params):
    return params.running_mean, params.running_var


def replay_gamma(dataset, params, batch_indices=None, stats=None, dtype=None):
    """Controlled Gamma on stored paths (running batchnorm statistics unless ``stats`` given)."""
    if isinstance(params, TrainedControls):
        params = params.params
    if params.arch.n_out != dataset.layout.n_out or params.arch.n_in != dataset.inputs.shape[1]:
        raise TrainingError("network does not match the dataset's control layout")
    idx = np.arange(dataset.M) if batch_indices is None else np.asarray(batch_indices)
    rows, owner = dataset.rows_of(idx)
    if stats is None:
        stats = _inference_stats(params)
    total = np.zeros(idx.shape[0])
    for a in range(0, rows.shape[0], ROW_CHUNK):
        r = rows[a:a + ROW_CHUNK]
        out, _ = _chunk_forward(params, dataset.inputs[r], stats, dtype)
        total += np.bincount(owner[a:a + ROW_CHUNK], weights=np.einsum("ij,ij->i", out, dataset.coef[r]),
                             minlength=idx.shape[0])
    return dataset.gamma_base[idx] + total


def replay_gamma_brownian(dataset, controls, batch_indices=None):
    if dataset.mode != "brownian":
        raise TrainingError("dataset is not Brownian")
    return replay_gamma(dataset, controls, batch_indices)


def replay_gamma_levy(dataset, controls, batch_indices=None):
    if dataset.mode != "levy":
        raise TrainingError("dataset is not Levy")
    return replay_gamma(dataset, controls, batch_indices)


def replay_with_function(dataset, fn, batch_indices=None):
    """Replay an arbitrary control ``fn(t, x) -> (n, n_out)`` (e.g. an analytic one)."""
    idx = np.arange(dataset.M) if batch_indices is None else np.asarray(batch_indices)
    rows, owner = dataset.rows_of(idx)
    inp = dataset.inputs[rows]
    out = np.asarray(fn(inp[:, 0], inp[:, 1:]), dtype=float).reshape(rows.shape[0], -1)
    add = np.bincount(owner, weights=np.einsum("ij,ij->i", out, dataset.coef[rows]), minlength=idx.shape[0])
    return dataset.gamma_base[idx] + add


def variance_loss(gamma_batch):
    """Unbiased sample variance and its gradient with respect to the batch."""
    g = np.asarray(gamma_batch, dtype=float)
    n = g.shape[0]
    if n < 2:
        raise ValueError("variance needs at least two samples")
    if g.min() == g.max():  # the rounded mean would leave a tiny spurious variance
        return 0.0, np.zeros(n)
    c = g - g.mean()
    return float(c @ c / (n - 1)), 2.0 * c / (n - 1)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainedControls:
    params: NetworkParams
    layout: object
    history: list = field(default_factory=list)  # full-dataset variance, index 0 = before training
    epoch_times: list = field(default_factory=list)
    epochs_run: int = 0
    stopped_by_rule: bool = False
    best_epoch: int = 0
    info: dict = field(default_factory=dict)

    @property
    def arch(self):
        return self.params.arch

    @property
    def mode(self):
        return self.layout.mode

    @property
    def best_variance(self):
        return self.history[self.best_epoch]

    def __call__(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        return forward(self.params, self.params.arch, np.column_stack([t, x]), training=False)

    def to_dict(self):
        return {"mode": self.mode, "layout": [self.layout.d, self.layout.q, self.layout.small_jumps],
                "history": list(map(float, self.history)), "epochs_run": self.epochs_run,
                "best_epoch": self.best_epoch, "info": self.info, "params": self.params.to_dict()}


def zero_controls(model, config=None):
    """Controls that are identically zero (reproduce plain Monte Carlo)."""
    config = config or TrainConfig()
    layout = control_layout(model)
    arch = control_architecture(model.dim, layout.n_out, config.hidden_layers, config.hidden_size)
    params = init_params(arch, _rng.stream(config.seed, "init", 0), zero_head=True)
    return TrainedControls(params, layout)


def stopping_rule(var_prev_prev, var_prev, cost_train_epoch, cost_batch, batch_size, alpha, eps_tol):
    """Stop when the last improvement no longer pays for another epoch.

    An extra epoch is worth it if the variance it removes saves more sampling
    work in the second pass than the epoch costs; the saving is estimated by
    the change observed over the previous epoch.
    """
    K = cost_constant(cost_batch, batch_size, alpha, eps_tol)
    return bool((var_prev_prev - var_prev) < cost_train_epoch / K)


def should_stop(history, cost_train_epoch, cost_batch, batch_size, alpha, eps_tol):
    """Decision after the latest epoch; ``history[0]`` is the untrained variance.

    Needs two trained epochs, so epochs 1 and 2 always run.
    """
    if len(history) < 3:
        return False
    return stopping_rule(history[-2], history[-1], cost_train_epoch, cost_batch, batch_size, alpha, eps_tol)


def cost_constant(cost_batch, batch_size, alpha, eps_tol):
    """``Phi^{-1}(1 - alpha/2)^2 * C_batch / (eps^2 * S_batch)``."""
    z = ndtri(1.0 - alpha / 2.0)
    return z * z * cost_batch / (eps_tol ** 2 * batch_size)


def relative_error(trained, estimate_mean, estimate_var):
    """``sqrt(Var) / mean`` of the controlled estimator."""
    if estimate_mean == 0:
        raise ValueError("relative error undefined for zero mean")
    return float(np.sqrt(estimate_var) / estimate_mean)


def full_variance(dataset, params, dtype=None):
    return variance_loss(replay_gamma(dataset, params, dtype=dtype))[0]


def second_pass_steps(model, h):
    """Expected steps per path on the fine grid (grid points plus expected jumps)."""
    n = model.T / h
    if model.has_jumps:
        n += model.derived.lambda_eps * model.T
    return n


def _batch_gradient(dataset, params, idx, dtype=None):
    """Loss, parameter gradient and batchnorm statistics for the paths ``idx``.

    Forward caches are kept when the batch is small enough; otherwise the
    forward pass is repeated chunk by chunk during the backward sweep.
    """
    rows, owner = dataset.rows_of(idx)
    x = dataset.inputs[rows]
    coef = dataset.coef[rows]
    stats = batch_stats(x)
    n = idx.shape[0]
    chunks = [slice(a, a + ROW_CHUNK) for a in range(0, rows.shape[0], ROW_CHUNK)]
    keep = len(chunks) == 1
    caches = []
    contrib = np.zeros(n)
    for sl in chunks:
        out, cache = _forward(params, x[sl], stats, keep=keep, dtype=dtype)
        caches.append(cache)
        contrib += np.bincount(owner[sl], weights=np.einsum("ij,ij->i", out, coef[sl]), minlength=n)
    loss, d_gamma = variance_loss(dataset.gamma_base[idx] + contrib)
    g = np.zeros(params.flat.shape)
    for sl, cache in zip(chunks, caches):
        if cache is None:
            _, cache = forward_with_cache(params, x[sl], stats, dtype=dtype)
        g += backward(params, cache, d_gamma[owner[sl]][:, None] * coef[sl])
    return loss, g, stats, rows.shape[0]


def train(dataset, config=None, warm_start=None, cost_batch=None, fine_h=None, log=None):
    """Minimise the replayed sample variance; returns the best parameters seen.

    ``cost_batch`` is the cost of simulating ``batch_size`` second-pass paths.
    With the default ``cost_model="work"`` costs are counted in network row
    evaluations (a forward pass over one row is one unit, a backward pass two),
    which keeps the stopping decision deterministic.  ``fine_h`` is the
    second-pass step (defaults to the coarse step over ``step_factor``).
    """
    config = config or TrainConfig()
    layout = dataset.layout
    d = dataset.model.dim
    arch = control_architecture(d, layout.n_out, config.hidden_layers, config.hidden_size)
    rng = _rng.stream(config.seed, "train", 0)
    if warm_start is not None:
        ws = warm_start.params if isinstance(warm_start, TrainedControls) else warm_start
        if ws.arch != arch:
            raise TrainingError(f"warm start architecture {ws.arch.layer_sizes} does not match {arch.layer_sizes}")
        params = ws.copy()
    else:
        params = init_params(arch, rng, zero_head=True)
    if fine_h is None:
        fine_h = dataset.scheme.h / config.step_factor
    S = min(config.batch_size, dataset.M)
    if S < 2:
        raise TrainingError("need at least two stored paths")

    work_epoch = 4.0 * dataset.n_rows  # forward + backward (counted twice) + full evaluation
    if cost_batch is None and config.cost_batch is not None:
        cost_batch = config.cost_batch
    if cost_batch is None:
        if config.cost_model == "work":
            cost_batch = config.batch_size * second_pass_steps(dataset.model, fine_h)
        else:
            cost_batch = _time_batch(dataset, params, fine_h, config)

    dtype = np.float32 if config.dtype == "float32" else None
    v0 = full_variance(dataset, params, dtype)
    result = TrainedControls(params.copy(), layout, history=[v0], info={
        "cost_model": config.cost_model, "cost_batch": float(cost_batch), "M_r": dataset.M,
        "h_r": dataset.scheme.h, "seed": config.seed, "warm_start": warm_start is not None})
    if not v0 > 0.0:
        return result

    state = AdamState.zeros(params.flat.size, lr=config.lr)
    best_var, best_params = v0, params.copy()
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(dataset.M)
        for a in range(0, dataset.M, S):
            idx = perm[a:a + S]
            if idx.shape[0] < 2:
                continue
            _, g, stats, _ = _batch_gradient(dataset, params, idx, dtype)
            update_running_stats(params, *stats)
            state, flat = adam_step(state, params.flat, g)
            params.flat = flat
        var = full_variance(dataset, params, dtype)
        elapsed = time.perf_counter() - t0
        result.history.append(var)
        result.epoch_times.append(elapsed)
        result.epochs_run = epoch
        if log is not None:
            log(f"epoch {epoch}: variance {var:.6g} ({elapsed:.1f}s)")
        if np.isfinite(var) and var < best_var:
            best_var, best_params = var, params.copy()
            result.best_epoch = epoch
        if config.use_stopping_rule:
            cost_epoch = work_epoch if config.cost_model == "work" else elapsed
            if should_stop(result.history, cost_epoch, cost_batch, config.batch_size, config.alpha, config.eps_tol):
                result.stopped_by_rule = True
                break
    result.params = best_params
    return result


def _time_batch(dataset, params, fine_h, config):
    """Wall-clock seconds to simulate one controlled batch at the fine step."""
    model = dataset.model
    scheme = default_scheme(model, fine_h)
    ctrl = TrainedControls(params, dataset.layout)
    rng = _rng.stream(config.seed, "timing", 0)
    t0 = time.perf_counter()
    simulate_block(model, scheme, dataset.payoff, config.batch_size, rng, control=ctrl)
    return time.perf_counter() - t0
