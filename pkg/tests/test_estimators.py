import numpy as np
import pytest
from scipy.special import ndtri

from neuralcv.cvtrain import zero_controls
from neuralcv.estimators import (
    RunningMoments,
    confidence_halfwidth,
    crude_cv_mc,
    cv_mc,
    level_cost,
    mlmc,
    vanilla_mc,
)
from neuralcv.models import Call, build_gbm, build_heston, build_merton
from neuralcv.oracles import HESTON_TABLE, bs_call, bs_optimal_control, merton_call
from neuralcv.schemes import ControlLayout, SchemeSpec

GBM = build_gbm(0.02, 0.3)
MERTON = build_merton(0.02, 0.2, 1.0, -0.05, 0.3)


class AnalyticControl:
    """The closed-form optimal control wrapped like trained controls."""

    layout = ControlLayout(1)

    def __init__(self, K):
        self.K = K

    def __call__(self, t, x):
        return bs_optimal_control(t, x[:, 0], self.K, 0.02, 0.3, 3.0)[:, None]


def test_confidence_halfwidth():
    assert confidence_halfwidth(1.0, 10**4) == pytest.approx(1.959964 / 100, rel=1e-6)
    assert confidence_halfwidth(0.0, 10) == 0.0
    assert confidence_halfwidth(4.0, 100, alpha=0.3174) == pytest.approx(0.2, rel=1e-3)
    assert ndtri(0.975) == pytest.approx(1.959963984540054, rel=1e-12)
    with pytest.raises(ValueError):
        confidence_halfwidth(1.0, 1)


def test_streaming_variance_matches_two_pass():
    x = np.random.default_rng(0).lognormal(0.0, 1.0, 100_003) + 1e3
    acc = RunningMoments()
    for chunk in np.array_split(x, 17):
        acc.add(chunk)
    assert acc.count == x.size
    assert acc.mean == pytest.approx(x.mean(), rel=1e-14)
    assert acc.variance == pytest.approx(np.var(x, ddof=1), rel=1e-10)
    # merging in a different grouping gives the same answer
    a, b = RunningMoments().add(x[:5]), RunningMoments().add(x[5:])
    assert a.merge(b).variance == pytest.approx(np.var(x, ddof=1), rel=1e-10)


def test_vanilla_gbm():
    est = vanilla_mc(GBM, SchemeSpec("euler", 0.015), Call(1.0), tol=1e-3, seed=1)
    assert est.tol_met and est.half_width <= 1e-3
    assert abs(est.mean - bs_call(1.0, 1.0, 0.02, 0.3, 3.0)) < 3 * est.half_width
    assert est.rel_err is None
    assert est.half_width == pytest.approx(confidence_halfwidth(est.variance, est.M))


def test_vanilla_zero_vol_stops_after_one_batch():
    est = vanilla_mc(build_gbm(0.02, 0.0), SchemeSpec("euler", 0.3), Call(1.0), tol=1e-6)
    assert est.M == 10_000 and est.half_width == 0.0 and est.variance == 0.0


def test_vanilla_budget_flag():
    est = vanilla_mc(GBM, SchemeSpec("euler", 0.3), Call(1.0), tol=1e-6, max_M=25_000)
    assert not est.tol_met and est.M == 25_000


def test_vanilla_merton():
    est = vanilla_mc(MERTON, SchemeSpec("jump_adapted", 0.015), Call(1.0), tol=1e-3, seed=2)
    ref = merton_call(1.0, 1.0, 0.02, 0.2, 1.0, -0.05, 0.3, 3.0)
    assert abs(est.mean - ref) < 3 * est.half_width


def test_zero_controls_reproduce_vanilla():
    s = SchemeSpec("jump_adapted", 0.1)
    a = vanilla_mc(MERTON, s, Call(1.0), tol=5e-3, seed=3)
    b = cv_mc(MERTON, zero_controls(MERTON), s, Call(1.0), tol=5e-3, seed=3)
    assert (a.mean, a.M, a.variance) == (b.mean, b.M, b.variance)


def test_incompatible_controls():
    with pytest.raises(ValueError):
        cv_mc(MERTON, zero_controls(GBM), SchemeSpec("jump_adapted", 0.1), Call(1.0), tol=1e-2)


def test_analytic_control_relative_error():
    est = cv_mc(GBM, AnalyticControl(1.0), SchemeSpec("euler", 3e-3), Call(1.0), tol=1e-3, seed=4)
    assert est.rel_err < 0.1
    assert est.M == 20_000  # the two-batch floor
    assert abs(est.mean - bs_call(1.0, 1.0, 0.02, 0.3, 3.0)) < 3 * est.half_width + 1e-4


def test_efficiency_ordering():
    s = SchemeSpec("euler", 0.03)
    kw = dict(tol=1e-3, seed=5)
    van = vanilla_mc(GBM, s, Call(1.0), **kw)
    crude = crude_cv_mc(GBM, s, Call(1.0), **kw)
    cv = cv_mc(GBM, AnalyticControl(1.0), s, Call(1.0), **kw)
    assert cv.M < crude.M < van.M
    for e in (crude, cv):
        assert abs(e.mean - van.mean) < 3 * np.hypot(e.half_width, van.half_width)


def test_crude_cv_perfect_control():
    est = crude_cv_mc(GBM, SchemeSpec("euler", 0.03), Call(0.0), tol=1e-4, seed=6)
    assert est.M == 20_000
    assert est.variance < 1e-8
    assert est.info["coef"][0] == pytest.approx(-1.0, abs=1e-3)


def test_crude_cv_degenerate_falls_back():
    est = crude_cv_mc(build_gbm(0.02, 0.0), SchemeSpec("euler", 0.3), Call(1.0), tol=1e-4)
    assert est.info["degenerate"] and est.variance == 0.0


def test_crude_cv_is_worse_out_of_the_money():
    s = SchemeSpec("euler", 0.03)
    kw = dict(tol=2e-4, seed=7, max_M=20_000)
    van = vanilla_mc(GBM, s, Call(3.0), **kw)
    crude = crude_cv_mc(GBM, s, Call(3.0), **kw)
    cv = cv_mc(GBM, AnalyticControl(3.0), s, Call(3.0), **kw)
    assert van.variance / crude.variance < van.variance / cv.variance


def test_crude_cv_heston():
    m = build_heston(0.02, 0.25, 0.5, 0.3, -0.3, 0.15)
    est = crude_cv_mc(m, SchemeSpec("heston", 0.015), Call(1.0), tol=1e-3, seed=8)
    assert abs(est.mean - HESTON_TABLE[1.0]) < 3 * est.half_width


def test_mlmc_single_level_is_vanilla():
    est = mlmc(GBM, Call(1.0), 0.03, 4, 1, tol=2e-3, seed=9)
    assert est.info["levels"] == [100.0]
    ref = vanilla_mc(GBM, SchemeSpec("euler", 0.03), Call(1.0), tol=2e-3, seed=10)
    assert abs(est.mean - ref.mean) < 3 * np.hypot(est.half_width, ref.half_width)


def test_mlmc_telescoping_and_decay():
    est = mlmc(GBM, Call(1.0), 3 / 256, 4, 4, tol=2e-3, seed=11)
    assert est.info["levels"] == [4.0, 16.0, 64.0, 256.0]
    V = est.info["V_l"]
    assert V[1] > V[2] > V[3]
    fine = vanilla_mc(GBM, SchemeSpec("euler", 3 / 256), Call(1.0), tol=2e-3, seed=12)
    assert abs(est.mean - fine.mean) < 3 * np.hypot(est.half_width, fine.half_width)
    assert est.half_width <= 2e-3


def test_mlmc_jump_levels():
    est = mlmc(MERTON, Call(1.0), 3 / 64, 4, 3, tol=4e-3, seed=13)
    V = est.info["V_l"]
    assert V[1] > V[2]
    ref = merton_call(1.0, 1.0, 0.02, 0.2, 1.0, -0.05, 0.3, 3.0)
    assert abs(est.mean - ref) < 3 * est.half_width + est.info["bias_estimate"]


def test_mlmc_coupling_shares_noise():
    from neuralcv import _rng
    from neuralcv.estimators import _coupled_jump, _coupled_uniform

    pf, pc = _coupled_uniform(build_gbm(0.02, 0.0), Call(0.5), 0.1, 3, 50, _rng.stream(0, "t", 0))
    assert np.allclose(pf, pf[0]) and np.allclose(pc, pc[0])
    pf, pc = _coupled_jump(MERTON, Call(1.0), 0.01, 4, 2000, _rng.stream(0, "t", 0))
    assert np.var(pf - pc) < 0.05 * np.var(pf)


def test_mlmc_validation():
    with pytest.raises(ValueError):
        mlmc(GBM, Call(1.0), 0.1, 1, 3, tol=1e-3)
    with pytest.raises(ValueError):
        mlmc(GBM, Call(1.0), 1.0, 4, 3, tol=1e-3)
    assert level_cost(GBM, 0.03, 4) == pytest.approx(125.0)
