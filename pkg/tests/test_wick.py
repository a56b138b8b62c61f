import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kpzlab import wick
from kpzlab.field import CorrelationFn, sandwich_grid
from kpzlab.wick import AssumptionError, BudgetError, TypeSpace, WickGraph


def _cfg(n, seed, eps=0.05):
    rng = np.random.default_rng(seed)
    pts = wick.cone_points(n, rng)
    return pts, wick.covariance_matrix(pts, eps)


def test_sin_sin_closed_form():
    cov = np.array([[1.0, 0.5], [0.5, 1.0]])
    v = wick.trig_expectation(cov, ["sin", "sin"], [1.0, 1.0])
    assert v == pytest.approx(math.exp(-1) * math.sinh(0.5), abs=1e-14)


def test_single_point_expectations():
    s2 = 0.3
    cov = np.array([[s2]])
    assert wick.trig_expectation(cov, ["sin"], [2.0]) == 0.0
    assert wick.trig_expectation(cov, ["cos"], [2.0]) == pytest.approx(math.exp(-2 * s2), abs=1e-15)
    assert wick.trig_expectation(cov, ["cos"], [2.0], centered=[True]) == pytest.approx(0.0, abs=1e-15)


def test_theta_derivative_matches_finite_difference():
    _, cov = _cfg(3, 1)
    th = np.array([0.7, 1.1, 0.4])
    kinds = ["sin", "cos", "sin"]
    d = wick.trig_expectation(cov, kinds, th, r=[0, 1, 0])
    h = 1e-5
    up = wick.trig_expectation(cov, kinds, th + [0, h, 0])
    dn = wick.trig_expectation(cov, kinds, th - [0, h, 0])
    assert d == pytest.approx((up - dn) / (2 * h), abs=1e-9)


@pytest.mark.parametrize("n", range(1, 7))
def test_pairing_counts_double_factorial(n):
    assert wick.count_pairings([1] * (2 * n)) == math.prod(range(1, 2 * n, 2))


def test_intra_block_pairs_excluded():
    assert wick.count_pairings([2]) == 0
    assert wick.count_pairings([1, 1], blocks=[0, 0]) == 0
    assert wick.count_pairings([2, 2]) == 2
    assert wick.wick_pairing_expectation(np.eye(3), [1, 1, 1]) == 0.0


def test_wick_degree_budget():
    with pytest.raises(BudgetError):
        wick.wick_pairing_expectation(np.ones((2, 2)), [11, 11])


def test_moment_tensor_matches_pairing_recursion():
    _, cov = _cfg(3, 2)
    T = wick.wick_moment_tensor(cov, [3, 3, 2])
    for n in [(1, 1, 0), (2, 1, 1), (3, 3, 2), (2, 2, 2), (1, 0, 0)]:
        assert T[n] == pytest.approx(wick.wick_pairing_expectation(cov, n), rel=1e-12, abs=1e-15)


def test_chaos_series_reconstruction():
    rng = np.random.default_rng(0)
    for i in range(30):
        n = int(rng.integers(1, 7))
        pts = wick.cone_points(n, rng)
        cov = wick.covariance_matrix(pts, (0.02, 0.05, 0.1)[i % 3])
        th = rng.uniform(0, 1.0, n)
        kinds = [str(k) for k in rng.choice(["sin", "cos"], n)]
        cen = list(rng.random(n) < 0.5)
        a = wick.trig_expectation(cov, kinds, th, cen)
        b = wick.chaos_series_expectation(cov, kinds, th, cen, order=8)
        assert abs(a - b) < 1e-8


def test_chaos_coefficient_closed_forms():
    s2, th = 0.2, 1.7
    odd, even = TypeSpace.make(1, 0), TypeSpace.make(0, 1)
    cov = np.array([[s2]])
    g = math.exp(-th * th * s2 / 2)
    assert wick.chaos_coeff(cov, odd, [th], [1]) == pytest.approx(th * g, rel=1e-13)
    assert wick.chaos_coeff(cov, odd, [th], [0]) == 0.0
    c2 = wick.chaos_coeff(cov, even, [th], [2])
    assert c2 == pytest.approx(-th * th / 2 * g, rel=1e-13)
    assert c2 == pytest.approx(wick.chaos_coeff_gh(s2, "cos", th, 2), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6), st.floats(0.0, 5.0))
def test_chaos_parity_rule(n0, n1, th):
    sp = TypeSpace.make(1, 1)
    _, cov = _cfg(2, 3)
    c = wick.chaos_coeff(cov, sp, [th, th], [n0, n1])
    if (n0 + n1 - 1) % 2:
        assert c == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 8), st.floats(0.0, 4.0), st.sampled_from(["sin", "cos"]))
def test_single_point_coeff_two_routes(n, th, kind):
    s2 = 0.2
    sp = TypeSpace.make(1, 0) if kind == "sin" else TypeSpace.make(0, 1)
    a = wick.chaos_coeff(np.array([[s2]]), sp, [th], [n])
    assert a == pytest.approx(wick.chaos_coeff_gh(s2, kind, th, n), abs=1e-12)


def test_root_cover_and_assumption_check():
    rs = wick.root_cover(TypeSpace.make(1, 0), [(1,)])
    assert rs.roots == frozenset({(0,), (3,)})
    rs = wick.root_cover(TypeSpace.make(1, 1), [(0, 0)])
    assert (0, 0) not in rs.roots and rs.check()
    bad = wick.RemovalSet(TypeSpace.make(1, 0), frozenset({(1,)}), frozenset({(1,)}))
    with pytest.raises(AssumptionError):
        bad.check()


def test_branching_respects_e0():
    sp = TypeSpace.make(1, 1)
    assert sp.in_branching((3, 2), (1, 2))
    assert not sp.in_branching((1, 2), (1, 0))
    assert not sp.in_branching((2, 0), (1, 0))


def test_truncation_orthogonal_on_full_shells():
    sp = TypeSpace.make(1, 1)
    th = np.array([1.3, 2.0])
    for seed in range(5):
        _, cov = _cfg(2, seed)
        M = [(1, 0), (0, 1)]
        for m in M:
            assert abs(wick.truncate_T_M(cov, sp, th, M, m)) < 1e-12


def test_truncation_leaks_within_a_partial_shell():
    # correlated types: X^(0,1) is not orthogonal to X^(1,0)
    sp = TypeSpace.make(1, 1)
    th = np.array([1.3, 2.0])
    _, cov = _cfg(2, 1)
    v = wick.truncate_T_M(cov, sp, th, [(1, 0)], (1, 0))
    assert v == pytest.approx(wick.chaos_coeff(cov, sp, th, (0, 1)) * cov[0, 1], rel=1e-12)


def test_truncation_trivial_cases():
    sp = TypeSpace.make(1, 1)
    th = np.array([0.8, 1.5])
    _, cov = _cfg(2, 4)
    trig = [(0, "sin", 0.8, False, 0), (1, "cos", 1.5, True, 0)]
    full = wick.mixed_expectation(cov, trig, [(0, 1, 0)])
    assert wick.truncate_T_M(cov, sp, th, [], (1, 0)) == pytest.approx(full, abs=1e-15)
    assert abs(wick.truncate_T_M(cov, TypeSpace.make(0, 1), [1.5], [(0,)], (0,))) < 1e-15


def test_cluster_cases():
    eps, tb = 0.01, 2.0
    far = np.array([[0.0, 0.0], [0.0, 0.5], [0.0, -0.5]])
    lab, smax = wick.cluster(far, eps, tb, [0, 1, 2])
    assert len(set(lab)) == 3 and smax == [0, 1, 2]
    step = tb ** 2 * eps
    chain = np.array([[0.0, k * step] for k in range(5)])
    lab, _ = wick.cluster(chain, eps, tb, [0] * 5)
    assert len(set(lab)) == 1
    mixed = np.array([[0.0, 0.0], [0.0, 0.01], [0.0, 0.5], [0.0, 0.9]])
    _, smax = wick.cluster(mixed, eps, tb, [0, 1, 0, 1])
    assert smax == []


def test_graph_values():
    _, cov = _cfg(4, 5)
    assert wick.graph_value(WickGraph(tuple(range(4)), {}), cov) == 1.0
    g = WickGraph(tuple(range(4)), {(0, 1): 2})
    assert wick.graph_value(g, cov) == pytest.approx(cov[0, 1] ** 2, rel=1e-14)
    a = WickGraph(tuple(range(4)), {(0, 1): 1})
    b = WickGraph(tuple(range(4)), {(2, 3): 3})
    ab = WickGraph(tuple(range(4)), {(0, 1): 1, (2, 3): 3})
    assert wick.graph_value(ab, cov) == pytest.approx(wick.graph_value(a, cov) * wick.graph_value(b, cov), rel=1e-14)
    with pytest.raises(ValueError):
        WickGraph((0, 1), {(0, 0): 1})


def test_reduction_move_on_random_configs():
    corr = {e: CorrelationFn(e) for e in (0.02, 0.05, 0.1)}
    lam = {e: c.sandwich_lambda(*sandwich_grid(e))[0] for e, c in corr.items()}
    rng = np.random.default_rng(7)
    for i in range(300):
        eps = (0.02, 0.05, 0.1)[i % 3]
        pts = wick.cone_points(3, rng)
        cov = wick.covariance_matrix(pts, eps, corr[eps])
        g = WickGraph((0, 1, 2), {(0, 1): 1, (0, 2): 1})
        new, factor = wick.reduction_move(g, 0, 1, 2, cov, pts, eps, lam[eps])
        assert new.mult(1, 2) == 1 and new.mult(0, 1) == 0 and np.isfinite(factor)


def test_reduction_move_preconditions():
    pts, cov = _cfg(3, 0)
    g = WickGraph((0, 1, 2), {(0, 1): 1})
    with pytest.raises(ValueError):
        wick.reduction_move(g, 0, 1, 2, cov, pts, 0.05, 2.0)
    with pytest.raises(ValueError):
        wick.reduction_move(WickGraph((0, 1, 2), {(0, 1): 2}), 0, 1, 1, cov, pts, 0.05, 2.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 10.0), st.floats(0.0, 10.0), st.sampled_from([0.02, 0.05, 0.1]))
def test_special_bound_odd_pair_at_most_one(seed, t1, t2, eps):
    rng = np.random.default_rng(seed)
    cov = wick.covariance_matrix(wick.cone_points(2, rng), eps)
    ratio, lhs, _ = wick.special_bound_ratio(cov, TypeSpace.make(2, 0), [t1, t2])
    s1, s2, c = cov[0, 0], cov[1, 1], cov[0, 1]
    exact = math.exp(-(t1 * t1 * s1 + t2 * t2 * s2) / 2) * math.sinh(t1 * t2 * c)
    assert lhs == pytest.approx(exact, abs=1e-13)
    assert ratio <= 1.0 + 1e-12


def test_special_bound_odd_count_vanishes():
    _, cov = _cfg(3, 8)
    ratio, lhs, rhs = wick.special_bound_ratio(cov, TypeSpace.make(3, 0), [1.0, 2.0, 3.0], recenter=False)
    assert ratio == 0.0 and abs(lhs) < 1e-12 and rhs == 0.0
    ratio, lhs, _ = wick.special_bound_ratio(cov[:2, :2], TypeSpace.make(2, 0), [0.0, 0.0])
    assert lhs == 0.0 and ratio == 0.0


def test_general_bound_k1_mean_removed():
    sp = TypeSpace.make(0, 1)
    lhs, _ = wick.general_bound_sides(np.array([[0.2]]), sp, 1, [(0,)], [1.5], N_max=2)
    assert abs(lhs) < 1e-15


def test_general_bound_small_ensemble():
    res = wick.general_bound_ensemble(TypeSpace.make(1, 1), 2, [(0, 0)], 12, [0.05, 0.1], seed=3, N_max=3)
    assert res["N_star"] is not None
    assert np.all(np.isfinite(res["worst"]))


def test_general_bound_rejects_nonconforming_removal():
    with pytest.raises(AssumptionError):
        wick.general_bound_ensemble(TypeSpace.make(1, 0), 2, [(1,), (5,)], 2, [0.1], N_max=2)


def test_product_expansion_identity():
    sp = TypeSpace.make(1, 1)
    _, cov = _cfg(4, 1)
    th = np.array([1.3, 2.0])
    for S in ((), (0,), (0, 1)):
        d, *_ = wick.product_expansion_identity(cov, sp, 2, [(1, 0)], th, [1, 0, 0, 1], S=S)
        assert d < 1e-10
    d, *_ = wick.product_expansion_identity(cov, sp, 2, [], th, [0, 0, 0, 0], S=(0, 1))
    assert d < 1e-12


def test_covariance_positive_definite():
    pts, cov = _cfg(5, 9)
    assert np.all(np.linalg.eigvalsh(cov) >= -1e-14)
    assert np.all(cov > 0)


def test_cone_points_in_cone():
    rng = np.random.default_rng(0)
    for n in (2, 4, 6):
        p = wick.cone_points(n, rng)
        dt = np.abs(p[:, None, 0] - p[None, :, 0])
        dx = np.abs(p[:, None, 1] - p[None, :, 1])
        assert np.all(dx <= 2 * np.sqrt(dt) + 1e-12)
