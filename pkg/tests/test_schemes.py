from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from neuralcv import _rng
from neuralcv.models import Call, SingularTempered, build_exp_levy, build_gbm, build_heston, build_merton
from neuralcv.schemes import (
    ControlLayout,
    PathBatch,
    SchemeSpec,
    control_layout,
    default_scheme,
    euler_step,
    heston_step,
    jump_adapted_path,
    simulate,
    simulate_batch,
)

HESTON = dict(r=0.02, kappa=0.25, theta=0.5, sigma_v=0.3, rho=-0.3)
SYM = SingularTempered(1.0, 1.0, 0.5, 2.0, 1e-3)


def test_scheme_spec_divisibility():
    assert SchemeSpec("euler", 0.003).n_steps(3.0) == 1000
    with pytest.raises(ValueError):
        SchemeSpec("euler", 0.007).n_steps(3.0)
    with pytest.raises(ValueError):
        SchemeSpec("euler", -1.0)
    with pytest.raises(ValueError):
        SchemeSpec("milstein", 0.1)
    assert SchemeSpec("euler", 0.003).coarsened(5).h == pytest.approx(0.015)


def test_default_scheme_kinds():
    assert default_scheme(build_gbm(0.02, 0.3), 0.1).kind == "euler"
    assert default_scheme(build_heston(**HESTON, v0=0.15), 0.1).kind == "heston"
    assert default_scheme(build_merton(0.02, 0.2, 1.0, -0.05, 0.3), 0.1).kind == "jump_adapted"


def test_control_layouts():
    assert control_layout(build_gbm(0.02, 0.3)) == ControlLayout(1)
    lay = control_layout(build_exp_levy(0.02, [[0.15, 0], [0.06, 0.1375]], [0.2, 0.2], SYM))
    assert lay.n_out == 4 and lay.mode == "levy"
    assert (lay.w, lay.W, lay.N) == (slice(0, 2), slice(2, 3), slice(3, 4))
    merton = control_layout(build_merton(0.02, 0.2, 1.0, -0.05, 0.3))
    assert merton.n_out == 2 and merton.W == slice(1, 1)


def test_euler_step_examples():
    m = build_gbm(0.02, 0.3)
    assert euler_step(m, 0.0, np.array([[1.0]]), 0.003, np.zeros((1, 1)))[0, 0] == pytest.approx(1.00006, abs=1e-15)
    rho = np.eye(2)
    m2 = build_gbm(0.0, 1.0, rho, d=2)
    x = np.array([[1.0, 1.0]])
    dW = np.array([[0.1, -0.2]])
    assert np.allclose(euler_step(m2, 0.0, x, 0.5, dW), x + x * dW)


def test_heston_step_zero_volvol():
    p = dict(HESTON, sigma_v=0.0)
    _, v = heston_step(p, 1.0, 0.15, 0.003, 0.1, -0.4)
    assert v == pytest.approx((0.15 + 0.25 * 0.5 * 0.003) / (1 + 0.25 * 0.003), rel=1e-14)


def test_heston_step_residual():
    h, v, dW1, dW2 = 0.003, 0.15, 0.1, 0.0
    x1, v1 = heston_step(HESTON, 1.0, v, h, dW1, dW2)
    dWv = HESTON["rho"] * dW1
    k, th, s = HESTON["kappa"], HESTON["theta"], HESTON["sigma_v"]
    resid = v1 - (v + k * (th - v1) * h + s * np.sqrt(v1) * dWv - 0.5 * s * s * h)
    assert abs(resid) < 1e-14
    assert x1 == pytest.approx(1.0 + 0.02 * h + np.sqrt(v) * dW1)


def test_heston_variance_stays_positive():
    m = build_heston(**HESTON, v0=0.15)
    rng = np.random.default_rng(5)
    v = np.full(1000, 0.15)
    x = np.ones(1000)
    h = 3e-3
    vmin = np.inf
    for _ in range(1000):  # 10^6 variance steps in total
        dW = rng.standard_normal((2, 1000)) * np.sqrt(h)
        x, v = heston_step(m.params, x, v, h, dW[0], dW[1])
        vmin = min(vmin, v.min())
    assert vmin > 0


def test_gbm_zero_vol_exact():
    m = build_gbm(0.02, 0.0)
    gamma, _ = simulate_batch(m, SchemeSpec("euler", 0.003), Call(0.9), 20, 3)
    # the Euler discount and drift do not quite cancel, so compare with the discrete value
    assert np.all(gamma == gamma[0])
    assert gamma[0] == pytest.approx((1.0 * (1 + 0.02 * 0.003) ** 1000 - 0.9) * (1 - 0.02 * 0.003) ** 1000, rel=1e-12)
    assert gamma[0] == pytest.approx(1 - 0.9 * np.exp(-0.06), abs=1e-5)


@pytest.mark.parametrize("model", [build_gbm(0.02, 0.3), build_merton(0.02, 0.2, 1.0, -0.05, 0.3)])
def test_reproducibility(model):
    scheme = default_scheme(model, 0.03)
    a, _ = simulate_batch(model, scheme, Call(1.0), 2500, 42)
    b, _ = simulate_batch(model, scheme, Call(1.0), 2500, 42)
    c, _ = simulate_batch(model, scheme, Call(1.0), 2500, 43)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_blocks_are_independent_of_batching():
    m = build_gbm(0.02, 0.3)
    s = SchemeSpec("euler", 0.03)
    full = simulate(m, s, Call(1.0), 2 * _rng.BLOCK_SIZE, 1).gamma
    second = simulate(m, s, Call(1.0), _rng.BLOCK_SIZE, 1, first_block=1).gamma
    assert np.array_equal(full[_rng.BLOCK_SIZE:], second)


def test_gbm_mean_matches_published_price():
    m = build_gbm(0.02, 0.3)
    g = simulate(m, SchemeSpec("euler", 3e-3), Call(1.0), 2 * 10**5, 11).gamma
    se = g.std(ddof=1) / np.sqrt(g.size)
    assert abs(g.mean() - 0.22943) < 3 * se


def test_euler_weak_order_second_moment():
    # Euler's second moment of GBM has a closed form, so the weak bias can be
    # computed without Monte Carlo noise.  The MC check ties it to the simulator.
    r, s, T = 0.02, 0.3, 3.0
    exact = np.exp((2 * r + s * s) * T)
    hs = np.array([T / 125, T / 250, T / 500, T / 1000])
    bias = np.array([((1 + r * h) ** 2 + s * s * h) ** round(T / h) - exact for h in hs])
    slope = np.polyfit(np.log(hs), np.log(np.abs(bias)), 1)[0]
    assert 0.7 <= slope <= 1.3
    x = simulate(build_gbm(r, s), SchemeSpec("euler", T / 125), Call(1.0), 10**5, 4).X_T[:, 0]
    m2 = ((1 + r * hs[0]) ** 2 + s * s * hs[0]) ** 125
    assert abs(np.mean(x ** 2) - m2) < 3 * np.std(x ** 2) / np.sqrt(x.size)


def test_y_positive_and_records_uniform():
    m = build_heston(**HESTON, v0=0.15)
    res = simulate(m, SchemeSpec("heston", 0.03), Call(1.0), 500, 2, record=True)
    b = res.batch
    assert np.all(b.Y > 0) and np.all(res.Y_T > 0)
    assert np.all(b.n_steps == 100)
    rec = b.record(7)
    assert rec.step_kinds == ["Deterministic"] * 100
    assert rec.times[-1] == pytest.approx(3.0, abs=1e-12)
    assert np.all(np.diff(rec.times) > 0)
    assert rec.terminal_gamma_base == res.gamma[7]


def test_brownian_increment_variance():
    m = build_merton(0.02, 0.2, 1.0, -0.05, 0.3)
    res = simulate(m, SchemeSpec("jump_adapted", 0.03), Call(1.0), 4000, 8, record=True)
    b = res.batch
    ok = b.valid() & (b.dt > 0)
    u = b.dw[..., 0][ok] / np.sqrt(b.dt[ok])
    assert abs(u.var() - 1.0) < 4 * np.sqrt(2.0 / u.size)
    assert abs(u.mean()) < 4 / np.sqrt(u.size)


def test_jump_adapted_grid():
    m = build_exp_levy(0.02, [[0.2]], [0.2], SYM)
    h = 3 / 100
    for i in range(20):
        rec = jump_adapted_path(m, m.derived, h, np.random.default_rng(i))
        gaps = np.diff(rec.times)
        assert np.all(gaps > 0) and np.all(gaps <= h + 1e-15)
        assert rec.times[0] == 0.0
        assert abs(rec.times[-1] - 3.0) < 1e-12
        kinds = np.array(rec.step_kinds)
        assert np.all(np.abs(rec.jump_sizes[kinds == "Deterministic"]) == 0)
        assert np.all(np.abs(rec.jump_sizes[kinds == "Jump"]) >= 1e-3)
        assert np.isnan(rec.terminal_gamma_base)


def test_jump_count_is_poisson():
    m = build_merton(0.02, 0.2, 1.0, -0.05, 0.3)
    res = simulate(m, SchemeSpec("jump_adapted", 0.3), Call(1.0), 10**5, 12)
    jumps = res.n_steps - 10
    lam_T = 3.0
    assert abs(jumps.mean() - lam_T) < 3 * np.sqrt(lam_T / jumps.size)
    assert abs(jumps.var() - lam_T) < 0.05 * lam_T


def test_vanishing_measure_is_euler():
    tiny = SingularTempered(1e-7, 1e-7, 0.5, 2.0, 1e-3)
    m = build_exp_levy(0.02, [[0.2]], [0.2], tiny)
    assert m.derived.lambda_eps * m.T < 1e-3
    a = simulate(m, SchemeSpec("jump_adapted", 0.03), Call(1.0), 10**5, 1).X_T[:, 0]
    diffusion = replace(m, measure=None, derived=None)
    b = simulate(diffusion, SchemeSpec("euler", 0.03), Call(1.0), 10**5, 2).X_T[:, 0]
    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_zero_jump_coefficient_is_pure_diffusion():
    m = build_exp_levy(0.02, [[0.2]], [0.0], SYM)
    res = simulate(m, SchemeSpec("jump_adapted", 0.03), Call(1.0), 20000, 1)
    diffusion = replace(m, measure=None, derived=None)
    b = simulate(diffusion, SchemeSpec("euler", 0.03), Call(1.0), 20000, 2)
    assert stats.ks_2samp(res.X_T[:, 0], b.X_T[:, 0]).pvalue > 0.01


def test_controls_are_linear_in_outputs():
    m = build_merton(0.02, 0.2, 1.0, -0.05, 0.3)
    s = SchemeSpec("jump_adapted", 0.1)
    base = simulate(m, s, Call(1.0), 300, 5)
    c1 = simulate(m, s, Call(1.0), 300, 5, control=lambda t, x: np.column_stack([x[:, 0], np.zeros(len(t))]))
    c2 = simulate(m, s, Call(1.0), 300, 5, control=lambda t, x: np.column_stack([2 * x[:, 0], np.zeros(len(t))]))
    assert np.array_equal(base.X_T, c1.X_T)
    assert np.allclose(c2.gamma - base.gamma, 2 * (c1.gamma - base.gamma))


def test_subset_and_concatenate_roundtrip():
    m = build_merton(0.02, 0.2, 1.0, -0.05, 0.3)
    b = simulate(m, SchemeSpec("jump_adapted", 0.1), Call(1.0), 50, 5, record=True).batch
    parts = [b.subset(np.arange(0, 20)), b.subset(np.arange(20, 50))]
    again = PathBatch.concatenate(parts)
    for m_ in (0, 25, 49):
        r1, r2 = b.record(m_), again.record(m_)
        assert np.array_equal(r1.times, r2.times)
        assert np.array_equal(r1.jump_sizes, r2.jump_sizes)


def test_scheme_model_mismatch():
    with pytest.raises(ValueError):
        simulate(build_gbm(0.02, 0.3), SchemeSpec("jump_adapted", 0.1), Call(1.0), 10, 0)
    with pytest.raises(ValueError):
        simulate(build_merton(0.02, 0.2, 1.0, -0.05, 0.3), SchemeSpec("euler", 0.1), Call(1.0), 10, 0)
    with pytest.raises(ValueError):
        simulate(build_gbm(0.02, 0.3), SchemeSpec("heston", 0.1), Call(1.0), 10, 0)
    with pytest.raises(ValueError):
        simulate(build_gbm(0.02, 0.3), SchemeSpec("euler", 0.1), Call(1.0), 0, 0)
