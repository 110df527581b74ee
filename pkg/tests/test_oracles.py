import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuralcv.oracles import HESTON_TABLE, bs_call, bs_optimal_control, heston_reference, merton_call
from oracle_data.frozen import (
    BS_DERIVED,
    BS_PAPER,
    HESTON_PAPER,
    MERTON_DERIVED,
    MERTON_PAPER,
    STRIKES,
)

BS = dict(r=0.02, sigma=0.3, T=3.0)
MERTON = dict(r=0.02, sigma=0.2, lam=1.0, alpha_j=-0.05, gamma_j=0.3, T=3.0)


@pytest.mark.parametrize("K", STRIKES)
def test_bs_call_against_mpmath(K):
    assert bs_call(1.0, K, **BS) == pytest.approx(BS_DERIVED[K], rel=1e-13)


@pytest.mark.parametrize("K", STRIKES)
def test_bs_call_reproduces_published_column(K):
    assert round(float(bs_call(1.0, K, **BS)), 5) == pytest.approx(BS_PAPER[K], abs=1e-12)


def test_bs_call_zero_vol_limit():
    for x in (0.5, 1.0, 1.5):
        expected = max(x - 1.0 * np.exp(-0.02 * 3), 0.0)
        assert bs_call(x, 1.0, 0.02, 1e-9, 3.0) == pytest.approx(expected, abs=1e-8)
        assert bs_call(x, 1.0, 0.02, 0.0, 3.0) == pytest.approx(expected, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(x=st.floats(0.2, 5.0), K=st.floats(0.2, 5.0), sigma=st.floats(0.01, 1.0), T=st.floats(0.05, 5.0))
def test_bs_call_bounds(x, K, sigma, T):
    c = bs_call(x, K, 0.02, sigma, T)
    assert max(x - K * np.exp(-0.02 * T), 0.0) - 1e-12 <= c <= x + 1e-12


def test_optimal_control_matches_finite_difference_delta():
    h = 1e-5
    delta = (bs_call(1 + h, 1.0, **BS) - bs_call(1 - h, 1.0, **BS)) / (2 * h)
    assert bs_optimal_control(0.0, 1.0, 1.0, **BS) == pytest.approx(-0.3 * 1.0 * delta, abs=1e-6)


def test_optimal_control_limits():
    assert bs_optimal_control(0.0, 1e-8, 1.0, **BS) == pytest.approx(0.0, abs=1e-12)
    x = 50.0
    assert bs_optimal_control(0.0, x, 1.0, **BS) == pytest.approx(-0.3 * x, rel=1e-8)
    # at expiry: payoff sub-gradient
    assert bs_optimal_control(3.0, 0.9, 1.0, **BS) == 0.0
    assert bs_optimal_control(3.0, 1.1, 1.0, **BS) == pytest.approx(-0.33)
    assert bs_optimal_control(3.0, 1.0, 1.0, **BS) == pytest.approx(-0.15)


@settings(max_examples=40, deadline=None)
@given(t=st.floats(0.0, 2.9), x=st.floats(0.05, 4.0), dx=st.floats(1e-3, 1.0))
def test_optimal_control_nonpositive_and_decreasing(t, x, dx):
    g1 = bs_optimal_control(t, x, 1.0, **BS)
    g2 = bs_optimal_control(t, x + dx, 1.0, **BS)
    assert g1 <= 0.0
    assert g2 <= g1 + 1e-15


@pytest.mark.parametrize("K", STRIKES)
def test_merton_series_against_mpmath(K):
    # the series stops once the dropped tail is below 1e-10
    assert merton_call(1.0, K, **MERTON) == pytest.approx(MERTON_DERIVED[K], abs=1e-10)


@pytest.mark.parametrize("K", STRIKES)
def test_merton_series_reproduces_published_column(K):
    assert abs(merton_call(1.0, K, **MERTON) - MERTON_PAPER[K]) < 5e-6 + 1e-12


def test_merton_no_jumps_is_black_scholes():
    p = dict(MERTON, lam=0.0)
    for K in STRIKES:
        assert merton_call(1.0, K, **p) == bs_call(1.0, K, 0.02, 0.2, 3.0)


def test_merton_truncation_tail():
    value, n = merton_call(1.0, 1.0, **MERTON, return_terms=True)
    # five more terms of the series
    from scipy.special import gammaln

    lam_adj = 1.0 * (1 + np.expm1(-0.05 + 0.045))
    extra = 0.0
    for j in range(n, n + 5):
        w = np.exp(-lam_adj * 3 + j * np.log(lam_adj * 3) - gammaln(j + 1))
        extra += w * 1.0  # a call is worth at most the spot
    assert extra < 1e-10


def test_merton_decreasing_in_strike():
    Ks = np.linspace(0.5, 1.5, 41)
    prices = [merton_call(1.0, K, **MERTON) for K in Ks]
    assert np.all(np.diff(prices) < 0)


def test_heston_table_lookup():
    assert HESTON_TABLE == HESTON_PAPER
    ref = heston_reference(1.0)
    assert ref.value == 0.34406 and ref.method == "PaperTable"
    assert heston_reference(1.05) is None
    assert heston_reference(1.0, kappa=0.3) is None


def _heston_cf_call(K, r, kappa, theta, sigma_v, rho, v0, T, x0=1.0):
    """Independent Heston price by Fourier inversion (the "little trap" form)."""
    from scipy.integrate import quad

    def phi(u):
        b = kappa - rho * sigma_v * 1j * u
        d = np.sqrt(b * b + sigma_v ** 2 * (1j * u + u * u))
        g = (b - d) / (b + d)
        e = np.exp(-d * T)
        C = kappa * theta / sigma_v ** 2 * ((b - d) * T - 2 * np.log((1 - g * e) / (1 - g)))
        D = (b - d) / sigma_v ** 2 * (1 - e) / (1 - g * e)
        return np.exp(1j * u * (np.log(x0) + r * T) + C + D * v0)

    k = np.log(K)
    P1 = quad(lambda u: (np.exp(-1j * u * k) * phi(u - 1j) / (1j * u * phi(-1j))).real, 0, 200, limit=500)[0]
    P2 = quad(lambda u: (np.exp(-1j * u * k) * phi(u) / (1j * u)).real, 0, 200, limit=500)[0]
    return x0 * (0.5 + P1 / np.pi) - K * np.exp(-r * T) * (0.5 + P2 / np.pi)


@pytest.mark.parametrize("K", sorted(HESTON_PAPER))
def test_heston_table_against_fourier(K):
    p = dict(r=0.02, kappa=0.25, theta=0.5, sigma_v=0.3, rho=-0.3, v0=0.15, T=3.0)
    assert _heston_cf_call(K, **p) == pytest.approx(HESTON_TABLE[K], abs=1e-5)
