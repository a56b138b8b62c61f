import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kpzlab import renorm
from kpzlab.nonlin import coupling_constant, make_nonlinearity, poly
from kpzlab.renorm import ConsistencyError, RenormConstants, Selector, SpecError

U2 = poly(0, 0, 1)
U4 = poly(0, 0, 1, 0, 0.1)
SQRT = make_nonlinearity({"family": "sqrt1pu2"})
S2 = renorm.whole_line_sigma_sq()


def _cov3(s2, c_xy, c_xz, c_yz):
    return np.array([[s2, c_xy, c_xz], [c_xy, s2, c_yz], [c_xz, c_yz, s2]])


def test_triple_expectation_independent_centred_is_zero():
    cov = np.diag([0.3, 0.5, 0.2])
    g = Selector(U4, 0, 0)
    assert abs(renorm.triple_expectation(cov, g, g, g)) < 1e-10


def test_triple_expectation_gaussian_moment():
    cov = _cov3(1.0, 0.3, 0.2, 0.5)
    X = renorm.identity_selector()
    sq = Selector(None, 2)
    # E[X Y Z^2] = E XY E ZZ + 2 E XZ E YZ
    assert renorm.triple_expectation(cov, X, X, sq) == pytest.approx(0.3 + 2 * 0.2 * 0.5, abs=1e-12)


def test_triple_expectation_near_degenerate_converges():
    cov = _cov3(S2, S2 * (1 - 1e-4), S2 * (1 - 2e-4), S2 * (1 - 1e-4))
    s = Selector(SQRT, 2)
    v = renorm.triple_expectation(cov, s, s, s)
    # nearly coincident points: E F''(X)^3
    x, w = np.polynomial.hermite_e.hermegauss(200)
    ref = float(w @ SQRT.deriv(2, math.sqrt(S2) * x) ** 3) / math.sqrt(2 * math.pi)
    assert v == pytest.approx(ref, rel=1e-3)


def test_pair_correction_vanishes_for_quadratic():
    exp, _, vals = renorm.pair_correction_fit(U2, S2, np.geomspace(1e-3, S2 / 2, 6))
    assert np.all(np.abs(vals) < 1e-14) and exp == math.inf


def test_pair_correction_exponent_positive_for_sqrt():
    exp, se, _ = renorm.pair_correction_fit(SQRT, S2, np.geomspace(1e-3, S2 / 2, 8))
    assert exp - 1 > 0 and se < 0.05


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.95, 0.95))
def test_pair_series_matches_quadrature(r):
    a = renorm.hermite_coeffs(Selector(U4, 2, 0), S2, 24)
    b = renorm.hermite_coeffs(Selector(U4, 0, 0), S2, 24)
    cov = np.array([[S2, r * S2], [r * S2, S2]])
    direct = renorm.pair_expectation(cov, Selector(U4, 2, 0), Selector(U4, 0, 0))
    assert renorm.PairSeries(a, b)(r) == pytest.approx(direct, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.4, 0.4), st.floats(-0.4, 0.4), st.floats(-0.4, 0.4))
def test_triple_series_matches_quadrature(rxy, rxz, ryz):
    F = SQRT
    sels = (Selector(F, 1), Selector(F, 1), Selector(F, 0, 0))
    coeffs = [renorm.hermite_coeffs(s, S2, 40) for s in sels]
    cov = S2 * _cov3(1.0, rxy, rxz, ryz)
    if np.linalg.eigvalsh(cov).min() <= 0:
        return
    direct = renorm.triple_expectation(cov, *sels)
    series = renorm.TripleSeries(*coeffs)(np.array([rxy]), np.array([rxz]), np.array([ryz]))[0]
    assert series == pytest.approx(direct, abs=1e-8)


def test_constants_for_quadratic():
    r = renorm.compute_constants(U2, 0.05, n_samples=20_000, seed=1)
    assert r.a == pytest.approx(1.0, abs=1e-14)
    assert r.c2 == pytest.approx(S2 / 0.05, rel=1e-12)
    assert r.c220p == 0.0 and r.error_bars["c220p"] == 0.0
    assert r.c220 > 0 and r.c211 < 0
    assert r.check_assembly()


def test_a_times_c2_is_a_hat_over_eps():
    for eps in (0.02, 0.05, 0.1, 0.2):
        r = renorm.compute_constants(U4, eps, n_samples=2_000, seed=0)
        assert r.a * r.c2 == pytest.approx(coupling_constant(U4, S2).a_hat / eps, rel=1e-12)
        assert r.check_assembly()


def test_assembly_formula():
    assert RenormConstants.assemble(2.0, 1.0, 0.5, 0.25, 0.125) == 2.0 + 8.0 * (0.5 + 1.0 + 0.125)


def test_eps_range_enforced():
    with pytest.raises(SpecError):
        renorm.compute_constants(U2, 0.3, n_samples=10)
    with pytest.raises(SpecError):
        renorm.log_cancellation_check(U2, [0.02, 0.04, 0.08], n_samples=10)
    with pytest.raises(SpecError):
        renorm.log_cancellation_check(U2, [0.02, 0.03, 0.04, 0.05], n_samples=10)


def test_mc_reproducible_across_workers():
    _, ints = renorm._integrands(U4, S2, 0.08, 24)
    a = renorm.mc_integral(ints["c211"], 0.08, S2, 30_000, seed=5, chunk=7_000, workers=1)
    b = renorm.mc_integral(ints["c211"], 0.08, S2, 30_000, seed=5, chunk=7_000, workers=3)
    assert a == b


def test_two_proposals_agree():
    out = renorm.consistency_check(U4, 0.08, n_samples=40_000, seed=2)
    for d, se in out.values():
        assert abs(d) <= 3 * se + 1e-14


def test_consistency_error_raised_on_disagreement(monkeypatch):
    real = renorm.compute_constants

    def biased(F, eps, n_samples, seed, n_max, variant=0, workers=None):
        r = real(F, eps, n_samples, seed, n_max, variant, workers)
        if variant == 1:
            import dataclasses

            r = dataclasses.replace(r, c220=r.c220 + 1.0)
        return r

    monkeypatch.setattr(renorm, "compute_constants", biased)
    with pytest.raises(ConsistencyError):
        renorm.consistency_check(U4, 0.08, n_samples=5_000)


def test_antisymmetric_symbols_vanish():
    out = renorm.annihilation_check(U4, 0.05, n_samples=40_000, seed=3)
    for m, se in out.values():
        assert abs(m) <= 3 * se + 1e-12


def test_triple_decomposition_quadratic_terms_vanish():
    covs = [_cov3(S2, 0.3 * c, 0.2 * c, c) for c in np.geomspace(1e-3, S2 / 2, 4)]
    res = renorm.triple_decomposition_check(U2, covs)
    assert np.abs(res["rows"][:, 3:6]).max() < 1e-14


def test_triple_decomposition_quartic_unit_variance():
    res = renorm.triple_decomposition_check(poly(0, 0, 0, 0, 1), [_cov3(1.0, 0.01, 0.02, 0.03)])
    assert res["defect"] < 1e-8


def test_triple_decomposition_sqrt_exponent():
    covs = [_cov3(S2, 0.3 * c, 0.2 * c, c) for c in np.geomspace(1e-3, S2 / 2, 6)]
    res = renorm.triple_decomposition_check(SQRT, covs)
    assert res["defect"] < 1e-8
    assert res["exponent"] - 1 > 0


def test_curvature_triple_constant_stable_in_eps():
    c1 = renorm.curvature_triple_constant(SQRT, 0.1, n_configs=12, seed=1)
    c2 = renorm.curvature_triple_constant(SQRT, 0.05, n_configs=12, seed=1)
    assert np.isfinite(c1) and np.isfinite(c2)
    assert 0.5 < c1 / c2 < 2.0


def test_curvature_ratio_zero_for_quadratic():
    assert renorm.curvature_triple_ratio(U2, _cov3(S2, 0.05, 0.02, 0.1)) < 1e-12
