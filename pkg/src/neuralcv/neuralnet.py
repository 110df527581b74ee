"""A small fully connected ReLU network with input batch normalisation and Adam.

Only what the control-variate trainer needs: forward pass, reverse-mode
gradient with respect to all trainable parameters, and an Adam optimiser.
Trainable parameters live in one flat vector ordered as layer weights
(row-major), then biases, then the batchnorm scale and shift.  Batchnorm
running statistics are kept separately since they are not trained.
"""
import json
from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple
    input_batchnorm: bool = True
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("need at least an input and an output layer of positive width")
        if self.activation != "relu":
            raise ValueError("only the rectifier activation is supported")

    @property
    def L(self):
        return len(self.layer_sizes) - 1

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    def n_weights(self):
        """``P(N)``: weights plus biases of the affine layers."""
        N = self.layer_sizes
        return sum(N[l] * N[l - 1] + N[l] for l in range(1, len(N)))

    def n_trainable(self):
        return self.n_weights() + (2 * self.n_in if self.input_batchnorm else 0)

    def _slices(self):
        N = self.layer_sizes
        out, pos = {"W": [], "b": []}, 0
        for l in range(1, len(N)):
            out["W"].append((slice(pos, pos + N[l] * N[l - 1]), (N[l], N[l - 1])))
            pos += N[l] * N[l - 1]
        for l in range(1, len(N)):
            out["b"].append(slice(pos, pos + N[l]))
            pos += N[l]
        if self.input_batchnorm:
            out["bn_scale"] = slice(pos, pos + N[0])
            out["bn_shift"] = slice(pos + N[0], pos + 2 * N[0])
        return out


def control_architecture(d, n_out, hidden_layers=3, hidden_size=50, input_batchnorm=True):
    """Input ``(t, x)``; hidden width is ``hidden_size + d``."""
    width = hidden_size + d
    return Architecture((1 + d,) + (width,) * hidden_layers + (n_out,), input_batchnorm)


@dataclass
class NetworkParams:
    arch: Architecture
    flat: np.ndarray
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    stats_initialised: bool = False

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=float)
        if self.flat.shape != (self.arch.n_trainable(),):
            raise ValueError(f"expected {self.arch.n_trainable()} parameters, got {self.flat.shape}")
        n0 = self.arch.n_in
        if self.running_mean is None:
            self.running_mean = np.zeros(n0)
        if self.running_var is None:
            self.running_var = np.ones(n0)
        self.running_mean = np.asarray(self.running_mean, dtype=float)
        self.running_var = np.asarray(self.running_var, dtype=float)
        self._sl = self.arch._slices()

    # views into the flat vector
    @property
    def weights(self):
        return [self.flat[s].reshape(shape) for s, shape in self._sl["W"]]

    @property
    def biases(self):
        return [self.flat[s] for s in self._sl["b"]]

    @property
    def bn_scale(self):
        return self.flat[self._sl["bn_scale"]] if self.arch.input_batchnorm else None

    @property
    def bn_shift(self):
        return self.flat[self._sl["bn_shift"]] if self.arch.input_batchnorm else None

    def copy(self):
        return NetworkParams(self.arch, self.flat.copy(), self.running_mean.copy(), self.running_var.copy(),
                             self.stats_initialised)

    def with_flat(self, flat):
        return NetworkParams(self.arch, flat, self.running_mean.copy(), self.running_var.copy(),
                             self.stats_initialised)

    def serialize(self):
        """Flat vector: trainable parameters, then running mean and variance."""
        return np.concatenate([self.flat, self.running_mean, self.running_var])

    def to_dict(self):
        return {
            "layer_sizes": list(self.arch.layer_sizes),
            "input_batchnorm": self.arch.input_batchnorm,
            "activation": self.arch.activation,
            "stats_initialised": self.stats_initialised,
            "values": self.serialize().tolist(),
        }

    @classmethod
    def from_dict(cls, blob):
        arch = Architecture(tuple(blob["layer_sizes"]), blob["input_batchnorm"], blob.get("activation", "relu"))
        v = np.asarray(blob["values"], dtype=float)
        n, n0 = arch.n_trainable(), arch.n_in
        if v.shape != (n + 2 * n0,):
            raise ValueError("serialized parameter blob has the wrong length")
        return cls(arch, v[:n], v[n:n + n0], v[n + n0:], bool(blob.get("stats_initialised", True)))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def init_params(arch, rng, zero_head=False):
    """He-normal weights (variance 2/fan_in), zero biases, identity batchnorm.

    ``zero_head`` zeroes the last weight matrix so the network starts as the
    zero map.
    """
    flat = np.zeros(arch.n_trainable())
    p = NetworkParams(arch, flat)
    N = arch.layer_sizes
    for l, (s, shape) in enumerate(p._sl["W"], start=1):
        if zero_head and l == arch.L:
            continue
        flat[s] = rng.standard_normal(shape[0] * shape[1]) * np.sqrt(2.0 / N[l - 1])
    if arch.input_batchnorm:
        flat[p._sl["bn_scale"]] = 1.0
    return p


def batch_stats(x):
    x = np.asarray(x, dtype=float)
    return x.mean(axis=0), x.var(axis=0)


def update_running_stats(params, mean, var, momentum=0.1):
    """Exponential moving average; the first call copies the batch statistics."""
    if not params.stats_initialised:
        params.running_mean = np.array(mean, dtype=float)
        params.running_var = np.array(var, dtype=float)
        params.stats_initialised = True
    else:
        params.running_mean = (1 - momentum) * params.running_mean + momentum * mean
        params.running_var = (1 - momentum) * params.running_var + momentum * var


def _cast(params, dtype):
    Ws, bs = params.weights, params.biases
    scale, shift = params.bn_scale, params.bn_shift
    if dtype is None or dtype == params.flat.dtype:
        return Ws, bs, scale, shift
    cast = [W.astype(dtype) for W in Ws], [b.astype(dtype) for b in bs]
    if scale is not None:
        scale, shift = scale.astype(dtype), shift.astype(dtype)
    return cast[0], cast[1], scale, shift


def _forward(params, x, stats, keep, dtype=None):
    arch = params.arch
    Ws, bs, scale, shift = _cast(params, dtype)
    if dtype is not None:
        x = x.astype(dtype, copy=False)
    cache = {"dtype": dtype}
    h = x
    if arch.input_batchnorm:
        mean, var = stats
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean) * inv
        if dtype is not None:
            xhat = xhat.astype(dtype, copy=False)
        h = xhat * scale + shift
        cache["xhat"] = xhat
    acts = [h]
    for l in range(arch.L):
        a = h @ Ws[l].T
        a += bs[l]
        if l < arch.L - 1:
            h = np.maximum(a, 0.0, out=a)
            acts.append(h)
        else:
            h = a
    if keep:
        cache["acts"] = acts
        return h, cache
    return h, None


def forward(params, arch, inputs, training=False, stats=None, update_stats=None, momentum=0.1):
    """Network output for ``inputs`` of shape ``(batch, N_0)``.

    In training mode the batchnorm layer normalises with the statistics of
    ``inputs`` (or the supplied ``stats``) and, unless ``update_stats`` is
    False, folds them into the running averages.  Otherwise the running
    statistics are used.
    """
    if arch != params.arch:
        raise ValueError("architecture does not match the parameters")
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != arch.n_in:
        raise ValueError(f"expected inputs of shape (batch, {arch.n_in}), got {x.shape}")
    if arch.input_batchnorm:
        if training:
            if stats is None:
                stats = batch_stats(x)
            if update_stats is None or update_stats:
                update_running_stats(params, *stats, momentum=momentum)
        else:
            stats = (params.running_mean, params.running_var)
    out, _ = _forward(params, x, stats, keep=False)
    return out


def backward(params, cache, d_out):
    """Gradient of ``sum(d_out * output)`` with respect to the flat parameters."""
    arch = params.arch
    dtype = cache.get("dtype")
    g = np.zeros(params.flat.shape)
    sl = params._sl
    Ws = _cast(params, dtype)[0]
    acts = cache["acts"]
    delta = d_out if dtype is None else d_out.astype(dtype)
    for l in range(arch.L - 1, -1, -1):
        s, shape = sl["W"][l]
        g[s] = (delta.T @ acts[l]).ravel()
        g[sl["b"][l]] = delta.sum(axis=0)
        delta = delta @ Ws[l]
        if l > 0:
            delta *= acts[l] > 0
    if arch.input_batchnorm:
        g[sl["bn_scale"]] = np.sum(delta * cache["xhat"], axis=0)
        g[sl["bn_shift"]] = delta.sum(axis=0)
    return g


def forward_with_cache(params, inputs, stats, dtype=None):
    return _forward(params, np.asarray(inputs, dtype=float), stats, keep=True, dtype=dtype)


def grad(params, arch, loss_fn, batch, training=True):
    """Exact gradient of ``loss_fn(forward(batch))`` with respect to the flat parameters.

    ``loss_fn(outputs)`` must return ``(loss, d_loss/d_outputs)``.  Batchnorm
    statistics are functions of the inputs only, so no gradient flows through
    them.  Returns ``(loss, gradient)``.
    """
    if arch != params.arch:
        raise ValueError("architecture does not match the parameters")
    x = np.asarray(batch, dtype=float)
    stats = batch_stats(x) if training else (params.running_mean, params.running_var)
    out, cache = forward_with_cache(params, x, stats)
    loss, d_out = loss_fn(out)
    return loss, backward(params, cache, np.asarray(d_out, dtype=float))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **kw):
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(state, params, gradient):
    """One bias-corrected Adam update.  ``params`` is a flat array; returns new copies."""
    g = np.asarray(gradient, dtype=float)
    if g.shape != state.m.shape or np.shape(params) != g.shape:
        raise ValueError("gradient, parameters and optimiser state must have the same shape")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    mhat = m / (1 - state.beta1 ** t)
    vhat = v / (1 - state.beta2 ** t)
    new = np.asarray(params, dtype=float) - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps), new
