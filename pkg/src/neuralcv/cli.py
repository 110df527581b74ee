"""Config-driven experiment runner.

Usage::

    neuralcv run CONFIG [--seed N] [--out DIR] [--tol X]
    neuralcv validate CONFIG

A config is a YAML file with the sections ``model``, ``payoff``, ``scheme``,
``training``, ``estimation`` plus top-level ``seed`` and ``output``.  See the
``configs/`` directory for complete examples.
"""
import argparse
import csv
import dataclasses
import json
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy
import yaml

from . import __version__
from .cvtrain import TrainConfig, TrainedControls, coarse_scheme, first_pass, train
from .estimators import crude_cv_mc, cv_mc, mlmc, vanilla_mc
from .models import (
    ModelError,
    Payoff,
    SingularTempered,
    build_exp_levy,
    build_gbm,
    build_heston,
    build_merton,
)
from .neuralnet import NetworkParams
from .oracles import bs_call, heston_reference, merton_call
from .schemes import default_scheme

MODEL_KINDS = ("gbm", "heston", "merton", "exp_levy")
BASELINES = ("vanilla", "mlmc", "crude_cv")
CSV_COLUMNS = ["strike", "reference", "mean", "half_width", "time_s", "M", "rel_err", "method", "seed", "tol_met"]


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage


@dataclass
class ModelSection:
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class PayoffSection:
    kind: str = "call"
    strikes: list = field(default_factory=list)


@dataclass
class SchemeSection:
    h: float = 3.0 / 1000
    step_factor: int = 5
    eps: Optional[float] = None


@dataclass
class TrainingSection:
    enabled: bool = True
    M_r: int = 30_000
    max_epochs: int = 20
    batch_size: int = 2000
    lr: float = 1e-3
    hidden_layers: int = 3
    hidden_size: int = 50
    use_stopping_rule: bool = True
    cost_model: str = "work"
    transfer: bool = False
    warm_start: Optional[str] = None
    seed: Optional[int] = None


@dataclass
class EstimationSection:
    tol: float = 1e-4
    alpha: float = 0.05
    max_M: int = 10**7
    baselines: list = field(default_factory=list)
    mlmc_levels: int = 4
    mlmc_factor: int = 4


@dataclass
class ExperimentConfig:
    model: ModelSection
    payoff: PayoffSection = field(default_factory=PayoffSection)
    scheme: SchemeSection = field(default_factory=SchemeSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    estimation: EstimationSection = field(default_factory=EstimationSection)
    seed: int = 0
    output: str = "results"
    base_dir: str = field(default=".", compare=False)

    def to_dict(self):
        out = dataclasses.asdict(self)
        out.pop("base_dir")
        model = out.pop("model")
        out["model"] = {"kind": model["kind"], **model["params"]}
        return out


def _section(cls, raw, name):
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    return cls(**raw)


def config_from_dict(raw, base_dir="."):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = dict(raw)
    unknown = set(raw) - {"model", "payoff", "scheme", "training", "estimation", "seed", "output"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    model = dict(raw.get("model") or {})
    if "kind" not in model:
        raise ConfigError("model.kind is required")
    kind = model.pop("kind")
    return ExperimentConfig(
        model=ModelSection(kind, model),
        payoff=_section(PayoffSection, raw.get("payoff"), "payoff"),
        scheme=_section(SchemeSection, raw.get("scheme"), "scheme"),
        training=_section(TrainingSection, raw.get("training"), "training"),
        estimation=_section(EstimationSection, raw.get("estimation"), "estimation"),
        seed=int(raw.get("seed", 0)),
        output=str(raw.get("output", "results")),
        base_dir=base_dir,
    )


def parse_config(text, base_dir="."):
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from None
    return config_from_dict(raw, base_dir)


def serialize_config(config):
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# model construction and validation


def _measure(p, eps):
    m = dict(p.get("measure") or {})
    if eps is not None:
        m["eps"] = eps
    return SingularTempered(**m)


def build_model(section, scheme=None):
    p = dict(section.params)
    eps = scheme.eps if scheme is not None else None
    kind = section.kind
    if kind == "gbm":
        return build_gbm(p["r"], p["sigma"], p.get("correlation"), p.get("d", 1), p.get("x0", 1.0), p.get("T", 3.0))
    if kind == "heston":
        return build_heston(p["r"], p["kappa"], p["theta"], p["sigma_v"], p["rho"], p["v0"], p.get("x0", 1.0),
                            p.get("T", 3.0))
    if kind == "merton":
        return build_merton(p["r"], p["sigma"], p["lam"], p["alpha_j"], p["gamma_j"], p.get("x0", 1.0), p.get("T", 3.0))
    if kind == "exp_levy":
        return build_exp_levy(p["r"], p["sigma"], p["F"], _measure(p, eps), p.get("spot0", 1.0), p.get("T", 3.0))
    raise ConfigError(f"unknown model kind {kind!r}")


def _divides(T, h):
    if not h > 0:
        return False
    N = round(T / h)
    return N >= 1 and abs(N * h - T) <= 1e-9 * T


def validate_config(config):
    """All problems found in ``config``, as human-readable strings (empty if valid)."""
    diags = []
    m = config.model
    p = m.params
    if m.kind not in MODEL_KINDS:
        diags.append(f"model.kind must be one of {MODEL_KINDS}, got {m.kind!r}")
    T = p.get("T", 3.0)
    if not T > 0:
        diags.append("model.T must be positive")
    if m.kind == "heston":
        try:
            if not 2 * p["kappa"] * p["theta"] > p["sigma_v"] ** 2:
                diags.append("Feller condition 2*kappa*theta > sigma_v**2 violated")
        except KeyError as exc:
            diags.append(f"model parameter {exc} missing")
    if m.kind == "exp_levy":
        eps = config.scheme.eps if config.scheme.eps is not None else (p.get("measure") or {}).get("eps", 1e-3)
        if not 0 < eps < 1:
            diags.append(f"truncation eps must lie in (0, 1), got {eps}")
    elif config.scheme.eps is not None:
        diags.append("scheme.eps only applies to exp_levy models")
    if not diags:
        try:
            build_model(m, config.scheme)
        except (ModelError, KeyError, TypeError, ValueError) as exc:
            diags.append(f"model: {type(exc).__name__}: {exc}")
    h, sf = config.scheme.h, config.scheme.step_factor
    if T > 0:
        if not _divides(T, h):
            diags.append(f"scheme.h={h} does not divide T={T}")
        elif config.training.enabled and not _divides(T, h * sf):
            diags.append(f"step_factor*h={h * sf} does not divide T={T}")
        if "mlmc" in config.estimation.baselines and _divides(T, h):
            L, f = config.estimation.mlmc_levels, config.estimation.mlmc_factor
            if f < 2 or L < 1 or not _divides(T, h * f ** (L - 1)):
                diags.append("mlmc levels: need factor >= 2 and h*factor**(levels-1) dividing T")
    if sf < 1:
        diags.append("scheme.step_factor must be >= 1")
    if config.payoff.kind not in ("call", "call_on_max"):
        diags.append(f"payoff.kind must be 'call' or 'call_on_max', got {config.payoff.kind!r}")
    if not config.payoff.strikes:
        diags.append("payoff.strikes must be a nonempty list")
    elif any(not isinstance(k, (int, float)) for k in config.payoff.strikes):
        diags.append("payoff.strikes must be numbers")
    e = config.estimation
    if not e.tol > 0:
        diags.append("estimation.tol must be positive")
    if not 0 < e.alpha < 1:
        diags.append("estimation.alpha must lie in (0, 1)")
    if e.max_M < 2:
        diags.append("estimation.max_M must be >= 2")
    bad = set(e.baselines) - set(BASELINES)
    if bad:
        diags.append(f"unknown baselines {sorted(bad)}; choose from {BASELINES}")
    t = config.training
    if t.enabled:
        try:
            TrainConfig(max_epochs=t.max_epochs, batch_size=t.batch_size, lr=t.lr, cost_model=t.cost_model)
        except ValueError as exc:
            diags.append(f"training: {exc}")
        if t.M_r < 2:
            diags.append("training.M_r must be >= 2")
    if t.warm_start and not os.path.exists(_resolve(config, t.warm_start)):
        diags.append(f"warm start file {t.warm_start!r} does not exist")
    if not t.enabled and not e.baselines:
        diags.append("nothing to do: training disabled and no baselines requested")
    return diags


def _resolve(config, path):
    return path if os.path.isabs(path) else os.path.join(config.base_dir, path)


# ---------------------------------------------------------------------------
# running


def reference_price(model, payoff):
    p = model.params
    if payoff.kind != "call":
        return None
    if model.kind == "gbm" and model.dim == 1:
        return float(bs_call(model.x0[0], payoff.K, p["r"], p["sigma"], model.T))
    if model.kind == "merton":
        return float(merton_call(model.x0[0], payoff.K, p["r"], p["sigma"], p["lam"], p["alpha_j"], p["gamma_j"],
                                 model.T))
    if model.kind == "heston":
        ref = heston_reference(payoff.K, T=model.T, x0=model.x0[0], **p)
        return None if ref is None else ref.value
    return None


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(name, exc) from exc


def train_config(config):
    t = config.training
    return TrainConfig(max_epochs=t.max_epochs, batch_size=t.batch_size, step_factor=config.scheme.step_factor,
                       lr=t.lr, hidden_layers=t.hidden_layers, hidden_size=t.hidden_size, M_r=t.M_r,
                       alpha=config.estimation.alpha, eps_tol=config.estimation.tol, cost_model=t.cost_model,
                       use_stopping_rule=t.use_stopping_rule,
                       seed=config.seed if t.seed is None else t.seed)


def run_experiment(config, out_dir=None, log=None):
    """Run every strike of ``config``; returns a list of result rows (dicts).

    Rows are appended to ``results.csv`` as they are produced, trained
    networks go to ``networks/`` and the run manifest to ``manifest.json``.
    """
    log = log or (lambda msg: None)
    diags = validate_config(config)
    if diags:
        raise ConfigError("; ".join(diags))
    out_dir = out_dir or _resolve(config, config.output)
    os.makedirs(out_dir, exist_ok=True)
    model = _stage("model", build_model, config.model, config.scheme)
    scheme = default_scheme(model, config.scheme.h)
    est = config.estimation
    tcfg = train_config(config)
    seed = config.seed
    _write_manifest(config, out_dir, model, tcfg)

    warm = None
    if config.training.enabled and config.training.warm_start:
        with open(_resolve(config, config.training.warm_start), encoding="utf-8") as fh:
            warm = NetworkParams.from_dict(json.load(fh)["params"])

    rows = []
    csv_path = os.path.join(out_dir, "results.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        fh.flush()

        def emit(K, ref, e, time_s):
            row = dict(strike=K, reference=ref, mean=e.mean, half_width=e.half_width, time_s=time_s, M=e.M,
                       rel_err=e.rel_err, method=e.method, seed=seed, tol_met=e.tol_met)
            writer.writerow([_fmt(row[c]) if c != "method" else row[c] for c in CSV_COLUMNS])
            fh.flush()
            rows.append(row)
            log(f"K={K} {e.method}: {e.mean:.6f} +- {e.half_width:.2e} (M={e.M}, {time_s:.1f}s)")

        for K in config.payoff.strikes:
            payoff = Payoff(config.payoff.kind, float(K))
            ref = reference_price(model, payoff)
            if config.training.enabled:
                t0 = time.perf_counter()
                ds = _stage("first_pass", first_pass, model, payoff,
                            coarse_scheme(model, scheme.h, config.scheme.step_factor), tcfg.M_r, seed)
                trained = _stage("training", train, ds, tcfg, warm_start=warm, fine_h=scheme.h)
                del ds
                t_train = time.perf_counter() - t0
                log(f"K={K} trained {trained.epochs_run} epochs, variance {trained.history[0]:.4g} -> "
                    f"{trained.best_variance:.4g}")
                _save_network(out_dir, K, trained, model, payoff)
                e = _stage("cv_mc", cv_mc, model, trained, scheme, payoff, est.tol, est.alpha, seed, est.max_M)
                emit(K, ref, e, t_train + e.wall_time)
                if config.training.transfer:
                    warm = trained.params
            for b in est.baselines:
                if b == "vanilla":
                    e = _stage("vanilla", vanilla_mc, model, scheme, payoff, est.tol, est.alpha, seed, est.max_M)
                elif b == "crude_cv":
                    e = _stage("crude_cv", crude_cv_mc, model, scheme, payoff, est.tol, est.alpha, seed, est.max_M)
                else:
                    e = _stage("mlmc", mlmc, model, payoff, scheme.h, est.mlmc_factor, est.mlmc_levels, est.tol,
                               est.alpha, seed)
                emit(K, ref, e, e.wall_time)
    return rows


def _save_network(out_dir, K, trained, model, payoff):
    d = os.path.join(out_dir, "networks")
    os.makedirs(d, exist_ok=True)
    blob = trained.to_dict()
    blob["manifest"] = {"model": model.describe(), "payoff": {"kind": payoff.kind, "K": payoff.K}}
    with open(os.path.join(d, f"K_{K}.json"), "w", encoding="utf-8") as fh:
        json.dump(blob, fh, default=_json_default)


def _write_manifest(config, out_dir, model, tcfg):
    manifest = {
        "config": config.to_dict(),
        "model": model.describe(),
        "seed": config.seed,
        "training_seed": tcfg.seed,
        "versions": {"neuralcv": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "pyyaml": yaml.__version__},
        "columns": CSV_COLUMNS,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(type(o).__name__)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="neuralcv", description="Neural control variate experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--seed", type=int, default=None, help="override the master seed")
    run.add_argument("--out", default=None, help="output directory (default: config 'output')")
    run.add_argument("--tol", type=float, default=None, help="override the estimation tolerance")
    run.add_argument("-q", "--quiet", action="store_true")
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config)
    except (OSError, ConfigError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "validate":
        diags = validate_config(config)
        for d in diags:
            print(d)
        if not diags:
            print("ok")
        return 1 if diags else 0

    if args.seed is not None:
        config.seed = args.seed
    if args.tol is not None:
        config.estimation.tol = args.tol
    diags = validate_config(config)
    if diags:
        for d in diags:
            print(f"invalid config: {d}", file=sys.stderr)
        return 2
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    try:
        run_experiment(config, args.out, log=log)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
