import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kpzlab import nonlin
from kpzlab.nonlin import SpecError, SymmetryError, make_nonlinearity, poly


def sqrt_F():
    return make_nonlinearity({"family": "sqrt1pu2"})


def test_polynomial_derivatives():
    F = poly(0, 0, 1)
    u = np.linspace(-3, 3, 7)
    assert np.all(F.deriv(2, u) == 2.0)
    assert np.all(F.deriv(3, u) == 0.0)


def test_sqrt_family_second_derivative():
    F = sqrt_F()
    assert F.deriv(2, 0.0) == pytest.approx(1.0, abs=1e-15)
    u = np.linspace(-4, 4, 9)
    assert np.allclose(F.deriv(2, u), (1 + u * u) ** -1.5, rtol=1e-13)


@pytest.mark.parametrize("spec", [{"family": "poly", "coeffs": [1, 0, 2, 0, 0.5]}, {"family": "sqrt1pu2"},
                                  {"family": "gauss"}])
def test_odd_derivatives_vanish_at_origin(spec):
    F = make_nonlinearity(spec)
    for l in (1, 3, 5, 7):
        assert F.deriv(l, 0.0) == pytest.approx(0.0, abs=1e-12)


def test_rejects_odd_and_malformed_specs():
    with pytest.raises(SymmetryError):
        poly(0, 1, 1)
    with pytest.raises(SymmetryError):
        make_nonlinearity({"family": "table", "data": _table(lambda u: u ** 3 + u * 0)})
    with pytest.raises(SpecError):
        make_nonlinearity({"family": "cubic"})
    with pytest.raises(SpecError):
        make_nonlinearity({"family": "table"})
    with pytest.raises(SpecError):
        make_nonlinearity({"family": "sqrt1pu2", "extra": 1})


def _table(f, n=2001, lim=8.0):
    u = np.linspace(-lim, lim, n)
    cols = [u]
    v = f(u)
    for _ in range(8):
        cols.append(v)
        v = np.gradient(v, u, edge_order=2)
    return np.stack(cols, axis=1)


def test_tabulated_family_tracks_closed_form():
    F = make_nonlinearity({"family": "table", "data": _table(lambda u: np.sqrt(1 + u * u))})
    ref = sqrt_F()
    u = np.linspace(-2, 2, 9)
    assert np.allclose(F(u), ref(u), atol=1e-8)
    assert np.allclose(F.deriv(2, u), ref.deriv(2, u), atol=1e-3)


def test_growth_bound_holds():
    for spec in ({"family": "poly", "coeffs": [0, 0, 1, 0, 0.1]}, {"family": "sqrt1pu2"}):
        assert make_nonlinearity(spec).check_growth()


def test_taylor_remainder_cases():
    F2 = poly(0, 0, 1)
    F4 = poly(0, 0, 0, 0, 1)
    assert nonlin.taylor_remainder_G(F2, 1.3, -0.7) == pytest.approx(0.0, abs=1e-14)
    assert nonlin.taylor_remainder_G(F4, 0.0, 1.7) == pytest.approx(1.7 ** 4, rel=1e-14)


@settings(max_examples=80, deadline=None)
@given(st.floats(-5, 5))
def test_taylor_remainder_vanishes_at_zero_increment(x):
    assert nonlin.taylor_remainder_G(sqrt_F(), x, 0.0) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 4.0), st.floats(-1.0, 1.0))
def test_coupling_for_quartic_matches_closed_form(s2, lam):
    gm = nonlin.coupling_constant(poly(0, 0, 1, 0, lam), s2)
    assert gm.a == pytest.approx(1 + 6 * lam * s2, abs=1e-8)
    assert gm.a_hat == pytest.approx(s2 + 3 * lam * s2 * s2, abs=1e-8)


def test_coupling_quadratic_is_one():
    for s2 in (0.05, 0.2, 3.0):
        assert nonlin.coupling_constant(poly(0, 0, 1), s2).a == pytest.approx(1.0, abs=1e-14)


def test_coupling_rejects_nonpositive_variance():
    with pytest.raises(ValueError):
        nonlin.coupling_constant(poly(0, 0, 1), 0.0)


# E (1 + s2 N^2)^(-3/2) / 2 at s2 = 0.199151403, by 40-digit mpmath quadrature (frozen)
A_SQRT_LINE = 0.4070599116


def test_coupling_sqrt_value_and_mc():
    s2 = 0.199151403
    gm = nonlin.coupling_constant(sqrt_F(), s2)
    assert gm.a == pytest.approx(A_SQRT_LINE, abs=1e-8)
    a, se, ah, se_h = nonlin.coupling_constant_mc(sqrt_F(), s2, n=1_000_000, seed=2)
    assert abs(a - gm.a) <= 3 * se
    assert abs(ah - gm.a_hat) <= 3 * se_h


@pytest.mark.parametrize("spec", [{"family": "poly", "coeffs": [0, 0, 1, 0, 0.1]}, {"family": "sqrt1pu2"},
                                  {"family": "gauss"}])
@pytest.mark.parametrize("s2", [0.1, 1.0, 4.0])
def test_quadrature_converged_and_odd_moments_vanish(spec, s2):
    F = make_nonlinearity(spec)
    v1, order = nonlin.gauss_expect_converged(lambda u: F.deriv(2, u), s2)
    v2 = nonlin.gauss_expect(lambda u: F.deriv(2, u), s2, 2 * order)
    assert abs(v1 - v2) < 1e-10
    assert nonlin.coupling_constant(F, s2).a == pytest.approx(0.5 * v1, abs=1e-10)
    for l in (1, 3):
        assert abs(nonlin.gauss_expect(lambda u: F.deriv(l, u), s2, 128)) < 1e-12


def test_chaos_coefficients():
    c = nonlin.chaos_coefficients_cn(poly(0, 0, 1), 0.3, 3)
    assert c[0] == pytest.approx(2.0) and np.all(np.abs(c[1:]) < 1e-10)
    assert nonlin.chaos_coefficients_cn(poly(0, 0, 0, 0, 1), 0.3, 1)[1] == pytest.approx(24.0)
    F = sqrt_F()
    q = nonlin.chaos_coefficients_cn(F, 1.0, 1)[1]
    assert q == pytest.approx(nonlin.hermite_projection(F, 1.0, 4), abs=1e-8)


def test_hermite_projection_matches_derivative_for_low_orders():
    F = make_nonlinearity({"family": "gauss"})
    for m in (2, 4, 6):
        direct = nonlin.gauss_expect(lambda u: F.deriv(m, u), 0.5, 256)
        assert nonlin.hermite_projection(F, 0.5, m) == pytest.approx(direct, abs=1e-10)


def test_fourier_decay_polynomial_is_zero():
    K, norms, _, _ = nonlin.fourier_norm_decay(poly(0, 0, 1, 0, 0.1), K_max=8)
    assert np.all(norms < 1e-12)


def test_fourier_decay_gaussian_is_fast():
    _, _, slope, _ = nonlin.fourier_norm_decay(make_nonlinearity({"family": "gauss"}), K_max=32)
    assert slope < -10


def test_fourier_decay_sqrt_rate():
    _, _, slope, se = nonlin.fourier_norm_decay(sqrt_F(), K_max=32)
    assert slope <= -7 + 2 * se


def test_dictionary_monotone_under_enlargement():
    F = sqrt_F()
    _, small, _, _ = nonlin.fourier_norm_decay(F, K_max=12, n_dict=8)
    _, large, _, _ = nonlin.fourier_norm_decay(F, K_max=12, n_dict=16)
    assert np.all(large >= small)
