"""Wick calculus for trigonometric functions of correlated Gaussians.

Expectations of products of ``sin``/``cos`` factors are computed exactly by
expanding each factor into complex exponentials; ``E exp(i w.X)`` is
``exp(-w.Sigma.w / 2)``. Wick-monomial probes ride along through the
complex Cameron-Martin shift ``E[e^{i w.X} W(Y)] = e^{-w.Sigma.w/2}
E[W(Y + i Cov(Y, X) w)]``, evaluated by a pairing recursion. Derivatives in
the frequencies are carried as truncated Taylor jets.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field as dfield
from functools import lru_cache

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .field import CorrelationFn, parabolic_norm

MAX_TRIG_POINTS = 24
MAX_WICK_DEGREE = 20
MAX_BLOCKS = 4
_CHUNK = 1 << 15


class BudgetError(ValueError):
    pass


class AssumptionError(ValueError):
    pass


# ---------------------------------------------------------------- types


@dataclass(frozen=True)
class TypeSpace:
    types: tuple
    odd: frozenset

    def __post_init__(self):
        if not set(self.odd) <= set(self.types):
            raise ValueError("odd types must be a subset of the type set")
        if len(set(self.types)) != len(self.types):
            raise ValueError("duplicate type labels")

    @classmethod
    def make(cls, n_odd, n_even):
        names = tuple(f"o{i}" for i in range(n_odd)) + tuple(f"e{i}" for i in range(n_even))
        return cls(names, frozenset(names[:n_odd]))

    @property
    def even(self):
        return frozenset(self.types) - self.odd

    @property
    def is_odd(self):
        return np.array([t in self.odd for t in self.types])

    def __len__(self):
        return len(self.types)

    def subsets(self, n):
        """The sets O1, O2, E1, E2, E0 of a multi-index (as index sets)."""
        odd = self.is_odd
        n = np.asarray(n)
        return {
            "O1": {i for i in range(len(n)) if odd[i] and n[i] % 2 == 1},
            "O2": {i for i in range(len(n)) if odd[i] and n[i] % 2 == 0},
            "E1": {i for i in range(len(n)) if not odd[i] and n[i] % 2 == 1},
            "E2": {i for i in range(len(n)) if not odd[i] and n[i] >= 2 and n[i] % 2 == 0},
            "E0": {i for i in range(len(n)) if not odd[i] and n[i] == 0},
        }

    def in_branching(self, n, m):
        """Whether ``n`` lies in the branching ``B(m) = {m + 2k : k = 0 on E0(m)}``."""
        d = np.asarray(n) - np.asarray(m)
        if np.any(d < 0) or np.any(d % 2):
            return False
        return all(d[i] == 0 for i in self.subsets(m)["E0"])


def _multi_indices(dim, max_len):
    for total in range(max_len + 1):
        for cut in itertools.combinations(range(total + dim - 1), dim - 1):
            prev = -1
            out = []
            for c in cut + (total + dim - 1,):
                out.append(c - prev - 1)
                prev = c
            yield tuple(out)


@dataclass(frozen=True)
class RemovalSet:
    space: TypeSpace
    M: frozenset
    roots: frozenset
    L_max: int = 12

    def check(self):
        """Verify ``B(m) subset M^c`` for roots and the cover of ``M^c`` up to ``L_max``."""
        for m in self.roots:
            if m in self.M:
                raise AssumptionError(f"root {m} lies in M")
        for n in _multi_indices(len(self.space), self.L_max):
            covered = any(self.space.in_branching(n, m) for m in self.roots)
            if n in self.M and covered:
                raise AssumptionError(f"{n} in M is reached from a root")
            if n not in self.M and not covered:
                raise AssumptionError(f"{n} in the complement of M is not covered")
        return True


def root_cover(space, M, L_max=12):
    """Minimal roots of ``M^c`` found by exhaustive search up to length ``L_max``.

    Raises when new roots keep appearing near ``L_max`` (no finite cover
    within the budget) or when the cover reaches back into ``M``.
    """
    M = frozenset(tuple(int(v) for v in m) for m in M)
    comp = [n for n in _multi_indices(len(space), L_max) if n not in M]
    roots = []
    for n in comp:
        if not any(space.in_branching(n, m) for m in roots):
            roots.append(n)
    if any(sum(r) > L_max - 2 for r in roots):
        raise AssumptionError("root set does not close below the length cap")
    rs = RemovalSet(space, M, frozenset(roots), L_max)
    rs.check()
    return rs


# ---------------------------------------------------------------- configurations


@dataclass
class GaussianConfig:
    """Jointly Gaussian values ``X_u = eps^(1/2) Psi_eps(x_u)`` at labelled points.

    ``labels[u] = (k, t)`` gives the block ``k`` and the type index ``t``;
    ``theta`` holds one frequency per type.
    """

    points: np.ndarray
    eps: float
    cov: np.ndarray
    labels: list
    theta: np.ndarray = dfield(default=None)

    @property
    def theta_bar(self):
        return 1.0 + float(np.max(np.abs(self.theta), initial=0.0))

    def point_theta(self):
        return np.array([self.theta[t] for _, t in self.labels], dtype=float)

    def block(self, k):
        return [u for u, (kk, _) in enumerate(self.labels) if kk == k]


def _clip_psd(cov):
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    tr = float(np.trace(cov))
    if w.min() < -1e-12 * tr:
        raise ValueError(f"covariance not PSD (min eigenvalue {w.min():.3e})")
    if w.min() < 0:
        cov = (v * np.maximum(w, 0.0)) @ v.T
    return cov


def covariance_matrix(points, eps, corr=None, fast=False):
    """``E X_u X_v = eps varrho_eps(x_u - x_v)`` from the whole-space correlation.

    The spline table (``fast``) is accurate to about 1e-5 relative, which is
    not enough to keep nearly coincident points positive definite.
    """
    corr = corr or CorrelationFn(eps)
    p = np.asarray(points, float)
    dt = p[:, None, 0] - p[None, :, 0]
    dx = p[:, None, 1] - p[None, :, 1]
    cov = eps * (corr.fast(dt, dx) if fast else corr(dt, dx))
    if np.any(cov <= 0):
        raise ValueError("covariances must be strictly positive")
    return _clip_psd(cov)


def config_from_points(points, eps, labels, theta, corr=None):
    return GaussianConfig(np.asarray(points, float), eps, covariance_matrix(points, eps, corr),
                          list(labels), np.asarray(theta, float))


def cone_points(n, rng, d_min=1e-3, d_max=1.0):
    """``n`` space-time points whose pairwise displacements stay in ``|x| <= 2 sqrt|t|``.

    Points form a time-ordered chain with parabolic step sizes log-uniform
    on ``[d_min, d_max]`` and spatial increments ``alpha sqrt(gap)`` with
    ``|alpha| <= min(1, 2/sqrt(n-1))`` (Cauchy-Schwarz keeps every pair in
    the cone).
    """
    if n == 1:
        return np.zeros((1, 2))
    amax = min(1.0, 2.0 / math.sqrt(n - 1))
    r = np.exp(rng.uniform(math.log(d_min), math.log(d_max), n - 1))
    alpha = rng.uniform(-amax, amax, n - 1)
    gap = (r / (1.0 + np.abs(alpha))) ** 2
    t = np.concatenate([[0.0], np.cumsum(gap)])
    x = np.concatenate([[0.0], np.cumsum(alpha * np.sqrt(gap))])
    order = rng.permutation(n)
    return np.stack([t, x], axis=1)[order]


# ---------------------------------------------------------------- jets


class _Jets:
    """Truncated multivariate Taylor series; entry ``m`` holds the ``h^m`` coefficient."""

    def __init__(self, orders):
        self.orders = tuple(int(o) for o in orders)
        self.index = list(itertools.product(*[range(o + 1) for o in self.orders]))
        self.pos = {m: i for i, m in enumerate(self.index)}
        self.size = len(self.index)
        self.depth = sum(self.orders)
        pairs = []
        for i, a in enumerate(self.index):
            for j, b in enumerate(self.index):
                k = tuple(x + y for x, y in zip(a, b))
                if k in self.pos:
                    pairs.append((i, j, self.pos[k]))
        self.pairs = pairs

    def unit(self, shape=()):
        out = np.zeros(shape + (self.size,), dtype=complex)
        out[..., 0] = 1.0
        return out

    def mul(self, a, b):
        if self.size == 1:
            return a * b
        shape = np.broadcast_shapes(a.shape, b.shape)
        out = np.zeros(shape, dtype=complex)
        for i, j, k in self.pairs:
            out[..., k] += a[..., i] * b[..., j]
        return out

    def exp(self, a):
        if self.size == 1:
            return np.exp(a)
        nil = a.copy()
        nil[..., 0] = 0.0
        res = self.unit(a.shape[:-1])
        term = res.copy()
        for m in range(1, self.depth + 1):
            term = self.mul(term, nil) / m
            res = res + term
        return np.exp(a[..., :1]) * res

    def unit_vec(self, var):
        m = [0] * len(self.orders)
        m[var] = 1
        return self.pos.get(tuple(m))

    def pair_vec(self, v1, v2):
        m = [0] * len(self.orders)
        m[v1] += 1
        m[v2] += 1
        return self.pos.get(tuple(m))

    def derivative(self, jet, r):
        """``d^r`` at ``h = 0`` from the Taylor coefficients."""
        idx = self.pos[tuple(r)]
        return jet[..., idx] * float(np.prod([math.factorial(v) for v in r]))


# ---------------------------------------------------------------- core expectation


_TRIG_DERIV = {  # d^n f = sign * g
    "sin": [("sin", 1), ("cos", 1), ("sin", -1), ("cos", -1)],
    "cos": [("cos", 1), ("sin", -1), ("cos", -1), ("sin", 1)],
}


def _branches(kind, centered):
    if kind == "sin":
        out = [(1, 0.5 / 1j, False), (-1, -0.5 / 1j, False)]
    elif kind == "cos":
        out = [(1, 0.5, False), (-1, 0.5, False)]
    else:
        raise ValueError(f"unknown trig kind {kind!r}")
    if centered and kind == "cos":
        out.append((0, -1.0, True))
    return out


def _term_chunks(branch_lists):
    n = len(branch_lists)
    counts = [len(b) for b in branch_lists]
    total = int(np.prod(counts, dtype=float)) if n else 1
    if total > (1 << 25):
        raise BudgetError(f"{total} exponential terms exceed the enumeration budget")
    sign_tab = [np.array([b[0] for b in bl]) for bl in branch_lists]
    coef_tab = [np.array([b[1] for b in bl], dtype=complex) for bl in branch_lists]
    cent_tab = [np.array([b[2] for b in bl]) for bl in branch_lists]
    for start in range(0, total, _CHUNK):
        flat = np.arange(start, min(total, start + _CHUNK))
        idx = np.unravel_index(flat, counts) if n else ()
        S = np.stack([sign_tab[u][idx[u]] for u in range(n)], axis=1) if n else np.zeros((1, 0))
        C = np.ones(flat.size, dtype=complex)
        CM = np.zeros((flat.size, n), dtype=bool)
        for u in range(n):
            C *= coef_tab[u][idx[u]]
            CM[:, u] = cent_tab[u][idx[u]]
        yield S.astype(float), C, CM


def _probe_dp(jets, mu, pcov, powers, blocks):
    """``E[prod_blocks Wick(Y + mu)]`` summed over cross-block pairings, per term."""
    n_terms = mu.shape[0]
    powers = tuple(int(p) for p in powers)

    @lru_cache(maxsize=None)
    def rec(d):
        try:
            v = next(i for i, p in enumerate(d) if p > 0)
        except StopIteration:
            return jets.unit((n_terms,))
        dv = list(d)
        dv[v] -= 1
        out = jets.mul(mu[:, v], rec(tuple(dv)))
        for w, pw in enumerate(dv):
            if pw > 0 and blocks[w] != blocks[v]:
                dw = list(dv)
                dw[w] -= 1
                out = out + pw * pcov[v, w] * rec(tuple(dw))
        return out

    return rec(powers)


def _mixed_jet(cov, trig, probes=()):
    """Jet of ``E[prod_u trig_u(theta_u X_u) * prod_blocks Wick monomial]``.

    ``trig``: list of ``(index, kind, theta, centered, r)``; the jet is in the
    shifts of the frequencies with ``r_u > 0``. ``probes``: list of
    ``(index, power, block)`` for Wick factors; factors sharing a block form
    one Wick product.
    """
    cov = np.asarray(cov, float)
    if len(trig) > MAX_TRIG_POINTS:
        raise BudgetError(f"at most {MAX_TRIG_POINTS} trigonometric factors")
    probes = [p for p in probes if p[1] > 0]
    if sum(p[1] for p in probes) > MAX_WICK_DEGREE:
        raise BudgetError(f"Wick degree above {MAX_WICK_DEGREE}")
    t_idx = np.array([t[0] for t in trig], dtype=int)
    theta = np.array([t[2] for t in trig], dtype=float)
    rs = [int(t[4]) for t in trig]
    dvars = [u for u, r in enumerate(rs) if r > 0]
    jets = _Jets([rs[u] for u in dvars])
    Stt = cov[np.ix_(t_idx, t_idx)]
    var = np.diag(Stt)
    p_idx = np.array([p[0] for p in probes], dtype=int)
    Stp = cov[np.ix_(t_idx, p_idx)]
    pcov = cov[np.ix_(p_idx, p_idx)]
    powers = [p[1] for p in probes]
    blocks = [p[2] for p in probes]
    total = jets.unit()
    total[...] = 0.0
    branch_lists = [_branches(t[1], t[3]) for t in trig]
    for S, C, CM in _term_chunks(branch_lists):
        w = S * theta
        Sw = w @ Stt
        a = np.zeros((S.shape[0], jets.size), dtype=complex)
        a[:, 0] = -0.5 * np.einsum("ij,ij->i", w, Sw) - 0.5 * (CM * (var * theta ** 2)).sum(axis=1)
        for vi, u in enumerate(dvars):
            pos = jets.unit_vec(vi)
            a[:, pos] = -S[:, u] * Sw[:, u] - CM[:, u] * var[u] * theta[u]
            for vj, v in enumerate(dvars):
                if vj < vi:
                    continue
                pos2 = jets.pair_vec(vi, vj)
                if pos2 is None:
                    continue
                if vi == vj:
                    a[:, pos2] = -0.5 * S[:, u] ** 2 * Stt[u, u] - 0.5 * CM[:, u] * var[u]
                else:
                    a[:, pos2] = -S[:, u] * S[:, v] * Stt[u, v]
        val = jets.exp(a) * C[:, None]
        if probes:
            mu = np.zeros((S.shape[0], len(probes), jets.size), dtype=complex)
            mu[:, :, 0] = 1j * (w @ Stp)
            for vi, u in enumerate(dvars):
                pos = jets.unit_vec(vi)
                mu[:, :, pos] = 1j * S[:, u, None] * Stp[u][None, :]
            val = jets.mul(val, _probe_dp(jets, mu, pcov, powers, blocks))
        total = total + val.sum(axis=0)
    return jets, total


def mixed_expectation(cov, trig, probes=()):
    jets, jet = _mixed_jet(cov, trig, probes)
    r = [int(t[4]) for t in trig if int(t[4]) > 0]
    return float(jets.derivative(jet, r).real)


def trig_expectation(cov, kinds, theta, centered=None, r=None):
    """``E d^r_theta prod_u cent{trig_u(theta_u X_u)}``.

    ``kinds`` are ``"sin"``/``"cos"`` per point; ``centered`` flags the
    factors whose mean is subtracted (only ``cos`` means are nonzero).
    """
    n = len(kinds)
    centered = [False] * n if centered is None else list(centered)
    r = [0] * n if r is None else list(r)
    trig = [(u, kinds[u], float(theta[u]), bool(centered[u]), int(r[u])) for u in range(n)]
    return mixed_expectation(cov, trig)


# ---------------------------------------------------------------- pairings


def _pair_rec(cov, powers, blocks):
    cov = np.asarray(cov, float)

    @lru_cache(maxsize=None)
    def rec(d):
        try:
            v = next(i for i, p in enumerate(d) if p > 0)
        except StopIteration:
            return 1.0
        dv = list(d)
        dv[v] -= 1
        out = 0.0
        for w, pw in enumerate(dv):
            if pw > 0 and blocks[w] != blocks[v]:
                dw = list(dv)
                dw[w] -= 1
                out += pw * cov[v, w] * rec(tuple(dw))
        return out

    return rec(tuple(int(p) for p in powers))


def wick_pairing_expectation(cov, powers, blocks=None):
    """``E[prod_blocks Wick(X_u^{<>n_u})]`` by enumerating admissible pairings.

    Each point is its own Wick block unless ``blocks`` groups points into a
    single Wick product; pairings inside a block are excluded.
    """
    powers = [int(p) for p in powers]
    if sum(powers) > MAX_WICK_DEGREE:
        raise BudgetError(f"Wick degree above {MAX_WICK_DEGREE}")
    if sum(powers) % 2:
        return 0.0
    blocks = list(range(len(powers))) if blocks is None else list(blocks)
    return float(_pair_rec(cov, powers, blocks))


def count_pairings(powers, blocks=None):
    n = len(powers)
    return int(round(wick_pairing_expectation(np.ones((n, n)), powers, blocks)))


def wick_moment_tensor(cov, max_deg, blocks=None):
    """All ``E[prod_u X_u^{<>n_u}]`` for ``n_u <= max_deg[u]`` at once.

    Uses ``E prod Wick = prod n_u! [s^n] exp(sum_{u<v} c_uv s_u s_v)`` with
    the sum over pairs in different blocks.
    """
    cov = np.asarray(cov, float)
    max_deg = [int(m) for m in max_deg]
    d = len(max_deg)
    blocks = list(range(d)) if blocks is None else list(blocks)
    T = np.zeros([m + 1 for m in max_deg])
    T[(0,) * d] = 1.0
    for u in range(d):
        for v in range(u + 1, d):
            if blocks[u] == blocks[v]:
                continue
            c = cov[u, v]
            top = min(max_deg[u], max_deg[v])
            new = T.copy()
            for m in range(1, top + 1):
                src = [slice(None)] * d
                dst = [slice(None)] * d
                src[u] = slice(0, max_deg[u] + 1 - m)
                src[v] = slice(0, max_deg[v] + 1 - m)
                dst[u] = slice(m, None)
                dst[v] = slice(m, None)
                new[tuple(dst)] += c ** m / math.factorial(m) * T[tuple(src)]
            T = new
    for u in range(d):
        shape = [1] * d
        shape[u] = max_deg[u] + 1
        T = T * np.array([math.factorial(k) for k in range(max_deg[u] + 1)], float).reshape(shape)
    return T


# ---------------------------------------------------------------- chaos coefficients


def _block_trig(space, idx, theta, n=None, r=None, recenter=True):
    """Trig factors of ``d^n_X Phi(theta, X)`` on one block; returns ``(trig, sign)``."""
    odd = space.is_odd
    trig = []
    sign = 1.0
    for t, u in enumerate(idx):
        kind = "sin" if odd[t] else "cos"
        nt = 0 if n is None else int(n[t])
        new_kind, s = _TRIG_DERIV[kind][nt % 4]
        sign *= s
        cent = recenter and (not odd[t]) and nt == 0
        trig.append((u, new_kind, float(theta[t]), cent, 0 if r is None else int(r[t])))
    return trig, sign


def _theta_power_jet(jets, theta, n, dvars_pos):
    """Jet of ``prod_t (theta_t + h_t)^{n_t}`` over the differentiated variables."""
    out = jets.unit()
    const = 1.0
    for t, nt in enumerate(n):
        if nt == 0:
            continue
        if t in dvars_pos:
            vi = dvars_pos[t]
            f = np.zeros(jets.size, dtype=complex)
            for m, mult in enumerate(jets.index):
                if all(mult[j] == 0 for j in range(len(mult)) if j != vi):
                    k = mult[vi]
                    if k <= nt:
                        f[m] = math.comb(nt, k) * theta[t] ** (nt - k)
            out = jets.mul(out, f)
        else:
            const *= theta[t] ** nt
    return out * const


def chaos_coeff(cov, space, theta, n, r=None):
    """``d^r_theta C_n(theta, X)``, the coefficient of ``X^{<>n}`` in ``Phi``.

    ``C_n = E[d^n_X Phi] / n!``; the parity rule returns an exact zero.
    """
    n = [int(v) for v in n]
    n_odd = len(space.odd)
    if (sum(n) - n_odd) % 2:
        return 0.0
    idx = list(range(len(space)))
    trig, sign = _block_trig(space, idx, theta, n, r)
    jets, jet = _mixed_jet(cov, trig)
    rr = [int(t[4]) for t in trig]
    dpos = {t: i for i, t in enumerate([t for t in range(len(rr)) if rr[t] > 0])}
    jet = jets.mul(jet, _theta_power_jet(jets, theta, n, dpos))
    fact = float(np.prod([math.factorial(v) for v in n]))
    return float(sign * jets.derivative(jet, [v for v in rr if v > 0]).real / fact)


def chaos_coeff_gh(sigma_sq, kind, theta, n, order=80):
    """Single-point ``C_n`` by Gauss-Hermite: ``E[d^n cent{trig}(theta X)] / n!``."""
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / math.sqrt(2 * math.pi)
    X = math.sqrt(sigma_sq) * x
    g, s = _TRIG_DERIV[kind][n % 4]
    f = np.sin(theta * X) if g == "sin" else np.cos(theta * X)
    val = s * theta ** n * float(np.dot(w, f))
    if n == 0 and kind == "cos":
        val -= math.exp(-0.5 * theta ** 2 * sigma_sq)
    return val / math.factorial(n)


def _point_chaos(kind, theta, sigma_sq, centered, order):
    """Closed-form ``C_n`` of ``trig(theta X)`` for ``n <= order``."""
    g = math.exp(-0.5 * theta * theta * sigma_sq)
    c = np.zeros(order + 1)
    for n in range(order + 1):
        if (kind == "sin") == (n % 2 == 1):
            c[n] = (-1) ** (n // 2) * theta ** n * g / math.factorial(n)
    if kind == "cos" and centered:
        c[0] = 0.0
    return c


def chaos_series_expectation(cov, kinds, theta, centered=None, order=8):
    """``E prod_u cent{trig_u(theta_u X_u)}`` from the chaos expansion truncated at degree ``order`` per point."""
    cov = np.asarray(cov, float)
    n = len(kinds)
    centered = [False] * n if centered is None else list(centered)
    T = wick_moment_tensor(cov, [order] * n)
    for u in range(n):
        c = _point_chaos(kinds[u], float(theta[u]), cov[u, u], centered[u], order)
        T = np.tensordot(c, T, axes=([0], [0]))
    return float(T)


# ---------------------------------------------------------------- truncation


def _block_wick_pair(cov, idx_a, pa, idx_b, pb):
    """``E[X_A^{<>pa} X_B^{<>pb}]`` for two single-block Wick monomials."""
    ids = list(idx_a) + list(idx_b)
    sub = np.asarray(cov)[np.ix_(ids, ids)]
    blocks = [0] * len(idx_a) + [1] * len(idx_b)
    return wick_pairing_expectation(sub, list(pa) + list(pb), blocks)


def truncate_T_M(cov, space, theta, M, probe, r=None):
    """``E[T_M(d^r Phi(theta, X)) X^{<>probe}]`` for a single block."""
    idx = list(range(len(space)))
    trig, _ = _block_trig(space, idx, theta, None, r)
    probes = [(u, int(probe[t]), 0) for t, u in enumerate(idx)]
    val = mixed_expectation(cov, trig, probes)
    for m in M:
        c = chaos_coeff(cov, space, theta, m, r)
        if c != 0.0:
            val -= c * _block_wick_pair(cov, idx, m, idx, probe)
    return val


# ---------------------------------------------------------------- clustering


def cluster(points, eps, theta_bar, blocks):
    """Transitive closure of ``|x_u - x_v| <= theta_bar^2 eps`` in the parabolic metric.

    Returns ``(labels, S_max)``: a cluster label per point and the block
    indices whose clusters contain no point of another block.
    """
    p = np.asarray(points, float)
    d = parabolic_norm(p[:, None, 0] - p[None, :, 0], p[:, None, 1] - p[None, :, 1])
    adj = csr_matrix(d <= theta_bar ** 2 * eps * (1 + 1e-12))
    _, lab = connected_components(adj, directed=False)
    blocks = np.asarray(blocks)
    s_max = []
    for s in np.unique(blocks):
        mine = set(lab[blocks == s])
        if all(set(blocks[lab == c]) == {s} for c in mine):
            s_max.append(int(s))
    return lab, s_max


# ---------------------------------------------------------------- graphs


@dataclass
class WickGraph:
    vertices: tuple
    edge_mult: dict

    def __post_init__(self):
        clean = {}
        for e, m in self.edge_mult.items():
            e = frozenset(e)
            if len(e) != 2:
                raise ValueError("self-loops are not allowed")
            if m < 0:
                raise ValueError("negative multiplicity")
            if m:
                clean[e] = clean.get(e, 0) + int(m)
        self.edge_mult = clean

    def mult(self, u, v):
        return self.edge_mult.get(frozenset((u, v)), 0)

    def degree(self, u):
        return sum(m for e, m in self.edge_mult.items() if u in e)


def graph_value(graph, cov):
    """``prod_edges cov^mult`` accumulated in the log domain."""
    cov = np.asarray(cov, float)
    logv = 0.0
    for e, m in graph.edge_mult.items():
        u, v = tuple(e)
        c = cov[u, v]
        if c <= 0:
            raise ValueError("graph values need positive covariances")
        logv += m * math.log(c)
    return math.exp(logv)


def reduction_move(graph, x, y, z, cov, points, eps, lam):
    """Trade edges ``(x,y), (x,z)`` for one edge ``(y,z)``.

    Returns the new graph and the factor ``2 Lambda^3 eps / (min(|x-y|,|x-z|) + eps)``,
    after checking ``|old| <= factor |new|``.
    """
    if y == z:
        raise ValueError("y = z would create a self-loop")
    if graph.mult(x, y) < 1 or graph.mult(x, z) < 1:
        raise ValueError("the move needs edges (x,y) and (x,z)")
    em = dict(graph.edge_mult)
    em[frozenset((x, y))] -= 1
    em[frozenset((x, z))] -= 1
    em[frozenset((y, z))] = em.get(frozenset((y, z)), 0) + 1
    new = WickGraph(graph.vertices, em)
    p = np.asarray(points, float)
    dxy = parabolic_norm(*(p[x] - p[y]))
    dxz = parabolic_norm(*(p[x] - p[z]))
    factor = 2.0 * lam ** 3 * eps / (min(dxy, dxz) + eps)
    old_v = graph_value(graph, cov)
    new_v = graph_value(new, cov)
    if old_v > factor * new_v * (1 + 1e-12):
        raise AssertionError(f"reduction bound violated: {old_v:.3e} > {factor * new_v:.3e}")
    return new, factor


# ---------------------------------------------------------------- bounds


def special_bound_ratio(cov, space, theta, r=None, recenter=True):
    """``|LHS| / (theta_bar^p RHS)`` for one configuration, one point per type.

    With ``recenter`` the left side is ``E d^r Phi`` and the right side
    ``E[prod_O X_t prod_E X_t^{<>2}]`` with ``p = |O| + 2|E|``; without it the
    factors are not centred and the right side is ``E prod_O X_t`` with
    ``p = |O|``. Returns ``(ratio, lhs, rhs)``.
    """
    odd = space.is_odd
    idx = list(range(len(space)))
    theta = np.asarray(theta, float)
    tb = 1.0 + float(np.max(np.abs(theta), initial=0.0))
    trig, _ = _block_trig(space, idx, theta, None, r, recenter=recenter)
    lhs = mixed_expectation(cov, trig)
    if recenter:
        powers = [1 if o else 2 for o in odd]
        p = int(odd.sum()) + 2 * int((~odd).sum())
        rhs = wick_pairing_expectation(cov, powers)
    else:
        sel = [u for u in idx if odd[u]]
        sub = np.asarray(cov)[np.ix_(sel, sel)]
        rhs = wick_pairing_expectation(sub, [1] * len(sel))
        p = len(sel)
    rhs *= tb ** p
    if rhs == 0.0:
        if abs(lhs) > 1e-12:
            raise AssertionError(f"right side vanishes while the left side is {lhs:.3e}")
        return 0.0, lhs, rhs
    return abs(lhs) / rhs, lhs, rhs


def special_bound_ensemble(spaces, n_configs, eps_list, seed=0, theta_max=10.0, r=None, recenter=True):
    """Worst special-bound ratio per ``eps`` over random cone configurations.

    Configuration ``i`` uses ``spaces[i % len(spaces)]``; its points and
    frequencies are drawn once and reused at every ``eps``, so the entries
    for ``eps`` and ``eps / 2`` compare the same displacements.
    """
    from ._exec import stream

    corr = {e: CorrelationFn(e) for e in eps_list}
    worst = {e: 0.0 for e in eps_list}
    rows = []
    for i in range(n_configs):
        space = spaces[i % len(spaces)]
        rng = stream(seed, 5, 1 << 20, i)
        pts = cone_points(len(space), rng)
        theta = rng.uniform(0.0, theta_max, len(space))
        for e in eps_list:
            cov = covariance_matrix(pts, e, corr[e])
            ratio, lhs, rhs = special_bound_ratio(cov, space, theta, r, recenter)
            worst[e] = max(worst[e], ratio)
            rows.append((i, len(space.odd), len(space.even), e, lhs, rhs, ratio))
    return {"worst": worst, "rows": rows}


def _expand_terms(K, M):
    """Terms of ``prod_k (Phi_k - sum_{p in M} C_p X_k^{<>p})``: ``(I, p-assignment)``."""
    M = [tuple(m) for m in M]
    for mask in itertools.product((False, True), repeat=K):
        I = [k for k in range(K) if mask[k]]
        for ps in itertools.product(M, repeat=len(I)):
            yield I, dict(zip(I, ps))


def _lhs_general(cov, space, K, M, theta, r, probe=None):
    """``E prod_k T_M(d^r Phi(theta, X_k)) [X^{<>probe}]`` by full expansion.

    Points are block-major: point ``k*|T| + t``. ``probe`` is a power per
    point (each point its own Wick block).
    """
    nT = len(space)
    coeffs = {}
    for k in range(K):
        sub = np.asarray(cov)[k * nT:(k + 1) * nT, k * nT:(k + 1) * nT]
        for m in M:
            coeffs[(k, tuple(m))] = chaos_coeff(sub, space, theta, m, r)
    total = 0.0
    for I, ps in _expand_terms(K, M):
        coef = (-1) ** len(I)
        for k in I:
            coef *= coeffs[(k, ps[k])]
        if coef == 0.0:
            continue
        trig = []
        probes = []
        for k in range(K):
            idx = list(range(k * nT, (k + 1) * nT))
            if k in I:
                probes += [(u, int(ps[k][t]), ("blk", k)) for t, u in enumerate(idx)]
            else:
                tr, _ = _block_trig(space, idx, theta, None, r)
                trig += tr
        if probe is not None:
            probes += [(u, int(p), ("probe", u)) for u, p in enumerate(probe)]
        total += coef * mixed_expectation(cov, trig, probes)
    return total


def general_bound_sides(cov, space, K, M, theta, r=None, N_max=6):
    """Left side and the right side for ``N = 1..N_max`` of the general bound.

    Right side: ``theta_bar^N E prod_k T_M[prod_O P_N(X_kt) prod_E Q_N(X_kt)]``
    where ``P_N``/``Q_N`` sum the odd/even Wick powers up to ``2N``. The
    allowed degrees form a product set, so each sum over them is a slice of
    a moment tensor.
    """
    if K > MAX_BLOCKS:
        raise BudgetError(f"K is capped at {MAX_BLOCKS}")
    cov = np.asarray(cov, float)
    nT = len(space)
    odd = space.is_odd
    M = [tuple(int(v) for v in m) for m in M]
    theta = np.asarray(theta, float)
    tb = 1.0 + float(np.max(np.abs(theta), initial=0.0))
    lhs = _lhs_general(cov, space, K, M, theta, r)
    top = 2 * N_max
    loc = {}
    for k in range(K):
        sub = cov[k * nT:(k + 1) * nT, k * nT:(k + 1) * nT]
        loc[k] = wick_moment_tensor(sub, [top] * nT)
    rhs = np.zeros(N_max)
    for N in range(1, N_max + 1):
        allowed = [np.array([n for n in range(1, 2 * N + 1) if (n % 2 == 1) == bool(odd[t])])
                   for t in range(nT)]
        # chaos coefficients of G_k: E[d^m G_k] / m! = sum_n prod_t C(n_t, m_t) E[prod X^{<>(n_t - m_t)}]
        cG = {}
        for k in range(K):
            for m in M:
                w = []
                ix = []
                for t in range(nT):
                    a = allowed[t][allowed[t] >= m[t]]
                    w.append(np.array([math.comb(int(n), m[t]) for n in a], float))
                    ix.append(a - m[t])
                block = loc[k][np.ix_(*ix)]
                for t in range(nT):
                    shape = [1] * nT
                    shape[t] = -1
                    block = block * w[t].reshape(shape)
                cG[(k, m)] = float(block.sum())
        own = None
        total = 0.0
        for I, ps in _expand_terms(K, M):
            coef = (-1) ** len(I)
            for k in I:
                coef *= cG[(k, ps[k])]
            if coef == 0.0:
                continue
            maxd = [2 * N if k not in I else ps[k][t] for k in range(K) for t in range(nT)]
            if I:
                blocks = [("I", k) if k in I else (k, t) for k in range(K) for t in range(nT)]
                tens = wick_moment_tensor(cov, maxd, blocks)
            else:
                if own is None:
                    own = wick_moment_tensor(cov, maxd)
                tens = own
            ix = []
            for k in range(K):
                for t in range(nT):
                    ix.append(allowed[t] if k not in I else np.array([ps[k][t]]))
            total += coef * float(tens[np.ix_(*ix)].sum())
        rhs[N - 1] = tb ** N * total
    return lhs, rhs


def general_bound_ensemble(space, K, M, n_configs, eps_list, seed=0, N_max=6,
                           theta_max=10.0, r=None, bound=1e3):
    """Worst ``|LHS|/RHS_N`` over random cone configurations, per ``N``.

    ``N_star`` is the smallest ``N`` with every ratio finite and at most
    ``bound``. Returns a dict with per-trial rows for CSV output.
    """
    from ._exec import stream

    M = [tuple(m) for m in M]
    rs = root_cover(space, M)
    nT = len(space)
    rows = []
    worst = np.zeros(N_max)
    for i in range(n_configs):
        rng = stream(seed, 5, i)
        eps = float(eps_list[i % len(eps_list)])
        pts = cone_points(K * nT, rng)
        theta = rng.uniform(0.0, theta_max, nT)
        labels = [(k, t) for k in range(K) for t in range(nT)]
        cfg = config_from_points(pts, eps, labels, theta)
        lhs, rhs = general_bound_sides(cfg.cov, space, K, M, theta, r, N_max)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(rhs > 0, np.abs(lhs) / rhs, np.where(np.abs(lhs) > 1e-12, np.inf, 0.0))
        worst = np.maximum(worst, ratio)
        rows.append((i, eps, lhs, *ratio))
    ok = [N for N in range(1, N_max + 1) if np.isfinite(worst[N - 1]) and worst[N - 1] <= bound]
    return {"worst": worst, "N_star": ok[0] if ok else None, "rows": rows, "removal": rs}


# ---------------------------------------------------------------- product expansion


def _wick_block_values(X, cov_block, p):
    """Pointwise ``X^{<>p}`` for one correlated block via ``H_{n+e_t} = x_t H_n - sum_v C_tv n_v H_{n-e_v}``."""
    d = len(p)
    memo = {(0,) * d: np.ones(X.shape[0])}

    def H(n):
        if n in memo:
            return memo[n]
        t = next(i for i in range(d) if n[i] > 0)
        lo = list(n)
        lo[t] -= 1
        lo = tuple(lo)
        out = X[:, t] * H(lo)
        for v in range(d):
            if lo[v] > 0:
                lv = list(lo)
                lv[v] -= 1
                out = out - cov_block[t, v] * lo[v] * H(tuple(lv))
        memo[n] = out
        return out

    return H(tuple(int(v) for v in p))


def product_expansion_identity(cov, space, K, M, theta, probe, S=(), order=32):
    """Defect of the product expansion over ``I, J`` with kept set ``S``.

    Both sides are integrated against the probe by tensor Gauss-Hermite
    quadrature: the product of truncated factors, and the signed sum over
    ``I u J = [K] minus S`` of kept truncated factors, removed chaos parts
    and untruncated factors. The product is also compared with the exact
    exponential expansion. Returns ``(defect, lhs, rhs, exact)``.
    """
    nT = len(space)
    d = K * nT
    if d > 5:
        raise BudgetError("quadrature route is limited to 5 Gaussian dimensions")
    S = sorted(set(int(s) for s in S))
    if any(s < 0 or s >= K for s in S):
        raise ValueError("S must be a subset of the block indices")
    cov = np.asarray(cov, float)
    theta = np.asarray(theta, float)
    odd = space.is_odd
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / math.sqrt(2 * math.pi)
    Z = np.stack([g.ravel() for g in np.meshgrid(*([x] * d), indexing="ij")], axis=1)
    W = np.ones(Z.shape[0])
    for g in np.meshgrid(*([w] * d), indexing="ij"):
        W *= g.ravel()
    X = Z @ np.linalg.cholesky(cov).T
    phi, removed = {}, {}
    for k in range(K):
        idx = list(range(k * nT, (k + 1) * nT))
        sub = cov[np.ix_(idx, idx)]
        f = np.ones(X.shape[0])
        for t, u in enumerate(idx):
            if odd[t]:
                f *= np.sin(theta[t] * X[:, u])
            else:
                f *= np.cos(theta[t] * X[:, u]) - math.exp(-0.5 * theta[t] ** 2 * cov[u, u])
        phi[k] = f
        removed[k] = np.zeros(X.shape[0])
        for m in M:
            removed[k] += chaos_coeff(sub, space, theta, m) * _wick_block_values(X[:, idx], sub, m)
    pr = np.ones(X.shape[0])
    for u, p in enumerate(probe):
        if p:
            pr *= _wick_block_values(X[:, [u]], cov[np.ix_([u], [u])], [p])
    lhs_pt = np.ones(X.shape[0])
    for k in range(K):
        lhs_pt *= phi[k] - removed[k]
    rest = [k for k in range(K) if k not in S]
    rhs_pt = np.zeros(X.shape[0])
    for mask in itertools.product((False, True), repeat=len(rest)):
        term = np.full(X.shape[0], (-1.0) ** sum(mask))
        for s in S:
            term *= phi[s] - removed[s]
        for k, in_I in zip(rest, mask):
            term *= removed[k] if in_I else phi[k]
        rhs_pt += term
    lhs = float(np.dot(W, lhs_pt * pr))
    rhs = float(np.dot(W, rhs_pt * pr))
    exact = _lhs_general(cov, space, K, M, theta, None, probe)
    return max(abs(lhs - rhs), abs(lhs - exact)), lhs, rhs, exact
