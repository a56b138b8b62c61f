"""Renormalisation constants and checks on their divergence structure.

All integrals fix the base point at the origin and use the whole-line
covariance of ``X = eps^(1/2) Psi_eps``. Kernels carry a spatial derivative
(every edge of the trees is ``I'``), and the truncated kernel is the line
heat kernel times the cutoff of :class:`kpzlab.field.TruncatedKernel`.

Gaussian expectations of products of functions of correlated variables are
written as Hermite series. With ``h_n = He_n / sqrt(n!)`` and normalised
coefficients ``b_n = E[g(sigma N) h_n(N)]``

    E[A(Y) B(Z)] = sum_n a_n b_n r^n
    E[A(X) B(Y) C(Z)] = sum_{p,q,r} a_{p+q} b_{p+r} c_{q+r}
                        sqrt((p+q)! (p+r)! (q+r)!) / (p! q! r!) r_xy^p r_xz^q r_yz^r

where the ``r`` are normalised correlations. For polynomial ``F`` these sums
are finite. The multi-dimensional integrals are estimated by importance
sampling with parabolic-radial proposals centred on every singular point.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import field as fld
from ._exec import pmap, stream, thread_cap, tree_sum
from .field import NumericalError
from .nonlin import coupling_constant

_TAG = 4
R_KERNEL = 0.6  # parabolic radius containing the kernel support
R_DIFF = 1.2
SUPPORT_T = 0.09  # the cutoff vanishes for t >= 2^(-3/2) horizon^2
SUPPORT_X = 0.3


class ConsistencyError(RuntimeError):
    pass


class SpecError(ValueError):
    pass


# ---------------------------------------------------------------- triple expectation


@dataclass(frozen=True)
class Selector:
    """A factor ``g(X)`` built from a stored derivative of ``F``.

    ``drop`` removes the chaos components of order ``<= drop``: ``0`` centres
    the factor and ``1`` also removes the linear part. ``None`` keeps it raw.
    """

    F: object
    order: int = 0
    drop: int = None

    def raw(self, u):
        if self.F is None:
            return u ** self.order
        return self.F.deriv(self.order, u)


def identity_selector():
    """``g(X) = X``."""
    return Selector(None, 1)


def _gh(order):
    x, w = special.roots_hermitenorm(order)
    return x, w / math.sqrt(2.0 * math.pi)


def _chaos_head(sel, var, order=512):
    """``(E g, E[g X] / var)`` for a factor of variance ``var``."""
    x, w = _gh(order)
    sd = math.sqrt(var)
    g = sel.raw(sd * x)
    return float(w @ g), float(w @ (g * x)) / sd


def _apply(sel, u, head):
    g = sel.raw(u)
    if sel.drop is None:
        return g
    g = g - head[0]
    if sel.drop >= 1:
        g = g - head[1] * u
    return g


def _psd_factor(cov):
    cov = 0.5 * (cov + cov.T)
    lam, vec = np.linalg.eigh(cov)
    if lam.min() < -1e-12 * max(1.0, lam.max()):
        raise ValueError("covariance is not positive semidefinite")
    return vec * np.sqrt(np.clip(lam, 0.0, None))


def _triple_gh(L, sels, heads, q):
    x, w = _gh(q)
    g = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1).reshape(-1, 3)
    wt = (w[:, None, None] * w[None, :, None] * w[None, None, :]).ravel()
    u = g @ L.T
    prod = wt.copy()
    for i in range(3):
        prod = prod * _apply(sels[i], u[:, i], heads[i])
    return float(prod.sum())


def triple_expectation(cov3, g1, g2, g3, q=40, tol=1e-10, q_max=320):
    """``E[g1(X) g2(Y) g3(Z)]`` by tensor Gauss-Hermite after a PSD factorisation.

    The order is doubled until two successive values agree within ``tol``
    (relative to the factor scale); nearly degenerate covariances need the
    higher orders. Failure at ``q_max`` raises :class:`NumericalError`.
    """
    cov3 = np.asarray(cov3, float)
    if cov3.shape != (3, 3):
        raise ValueError("cov3 must be 3x3")
    sels = (g1, g2, g3)
    for s in sels:
        if s.F is not None and not 0 <= s.order <= 7:
            raise ValueError("derivative order outside 0..7")
    L = _psd_factor(cov3)
    heads = [_chaos_head(s, cov3[i, i]) if s.drop is not None else None for i, s in enumerate(sels)]
    scale = 1.0
    x, w = _gh(2 * q)
    for i, s in enumerate(sels):
        scale *= math.sqrt(max(float(w @ _apply(s, math.sqrt(cov3[i, i]) * x, heads[i]) ** 2), 1e-300))
    v1 = _triple_gh(L, sels, heads, q)
    while True:
        q *= 2
        v2 = _triple_gh(L, sels, heads, q)
        # the absolute floor covers factors that vanish identically
        if abs(v2 - v1) <= tol * scale + 1e-16:
            return v2
        if q >= q_max:
            raise NumericalError(f"triple quadrature not converged at order {q}: {v1} vs {v2}")
        v1 = v2


def pair_expectation(cov2, g1, g2, q=80):
    """``E[g1(Y) g2(Z)]`` by 2-D Gauss-Hermite."""
    cov2 = np.asarray(cov2, float)
    L = _psd_factor(cov2)
    x, w = _gh(q)
    g = np.stack(np.meshgrid(x, x, indexing="ij"), axis=-1).reshape(-1, 2)
    wt = (w[:, None] * w[None, :]).ravel()
    u = g @ L.T
    out = wt.copy()
    for i, s in enumerate((g1, g2)):
        head = _chaos_head(s, cov2[i, i]) if s.drop is not None else None
        out = out * _apply(s, u[:, i], head)
    return float(out.sum())


# ---------------------------------------------------------------- Hermite series


def hermite_coeffs(sel, sigma_sq, n_max, order=512):
    """Normalised coefficients ``b_n = E[g(sigma N) He_n(N)] / sqrt(n!)``."""
    x, w = _gh(order)
    sd = math.sqrt(sigma_sq)
    g = sel.raw(sd * x)
    out = np.empty(n_max + 1)
    h_prev, h = np.zeros_like(x), np.ones_like(x)
    for n in range(n_max + 1):
        out[n] = w @ (g * h)
        h_prev, h = h, (x * h - math.sqrt(n) * h_prev) / math.sqrt(n + 1)
    if sel.drop is not None:
        out[: sel.drop + 1] = 0.0
    scale = max(1.0, float(np.abs(out).max()))
    out[np.abs(out) < 1e-13 * scale] = 0.0
    return out


def _effective_len(*bs):
    n = 0
    for b in bs:
        nz = np.nonzero(b)[0]
        if nz.size:
            n = max(n, int(nz[-1]) + 1)
    return max(n, 1)


class PairSeries:
    """``r -> E[A(Y) B(Z)]`` with ``E YZ = r sigma^2``."""

    def __init__(self, a, b):
        n = _effective_len(a, b)
        self.coef = a[:n] * b[:n]
        self.truncated = n == len(a)

    def __call__(self, r):
        return np.polynomial.polynomial.polyval(r, self.coef)


class TripleSeries:
    """``(r_xy, r_xz, r_yz) -> E[A(X) B(Y) C(Z)]`` truncated at the stored length."""

    def __init__(self, a, b, c):
        n = _effective_len(a, b, c)
        P = n
        W = np.zeros((P, P, P))
        lf = special.gammaln(np.arange(2 * P + 1) + 1.0)
        for p in range(P):
            for q in range(P):
                for r in range(P):
                    i, j, k = p + q, p + r, q + r
                    if i >= n or j >= n or k >= n:
                        continue
                    coef = a[i] * b[j] * c[k]
                    if coef == 0.0:
                        continue
                    W[p, q, r] = coef * math.exp(0.5 * (lf[i] + lf[j] + lf[k]) - lf[p] - lf[q] - lf[r])
        self.P = P
        self.W = W
        self.truncated = n == len(a)

    def __call__(self, rxy, rxz, ryz):
        P = self.P
        k = np.arange(P)
        Pxy = np.asarray(rxy)[:, None] ** k
        Pxz = np.asarray(rxz)[:, None] ** k
        Pyz = np.asarray(ryz)[:, None] ** k
        tmp = Pyz @ self.W.reshape(P * P, P).T
        return np.einsum("np,nq,npq->n", Pxy, Pxz, tmp.reshape(-1, P, P))


# ---------------------------------------------------------------- proposals


def _parabolic(t, x):
    return np.sqrt(np.abs(t)) + np.abs(x)


def _shell(rng, r):
    """Uniform points on the parabolic spheres of radii ``r``."""
    u = np.sqrt(rng.random(r.size))
    st = np.where(rng.random(r.size) < 0.5, -1.0, 1.0)
    sx = np.where(rng.random(r.size) < 0.5, -1.0, 1.0)
    return st * (r * u) ** 2, sx * r * (1.0 - u)


POW_ALPHA = 0.5


@dataclass(frozen=True)
class _Comp:
    centre: int  # index into the list of already drawn points, -1 = origin
    kind: str  # "pow" (radial density ~ r^(alpha-1) on [0, a]), "log" (on [a, b]) or "box"
    a: float
    b: float = 0.0
    weight: float = 1.0
    alpha: float = POW_ALPHA

    def sample(self, rng, n):
        if self.kind == "box":
            # a = time extent, b = half width in space
            return self.a * rng.random(n), self.b * (2.0 * rng.random(n) - 1.0)
        return _shell(rng, self.radii(rng, n))

    def box_density(self, t, x):
        inside = (t > 0) & (t < self.a) & (np.abs(x) < self.b)
        return np.where(inside, 1.0 / (2.0 * self.a * self.b), 0.0)

    def radii(self, rng, n):
        if self.kind == "pow":
            return self.a * rng.random(n) ** (1.0 / self.alpha)
        return self.a * (self.b / self.a) ** rng.random(n)

    def density(self, r):
        # a parabolic sphere of radius r has measure 4 r^2
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "pow":
                g = self.alpha * r ** (self.alpha - 1.0) / self.a ** self.alpha
                return np.where(r < self.a, g / (4.0 * r * r), 0.0)
            d = 1.0 / (4.0 * r ** 3 * math.log(self.b / self.a))
        return np.where((r > self.a) & (r < self.b), d, 0.0)


def _weights(comps):
    w = np.array([c.weight for c in comps])
    return w / w.sum()


def _stage_sample(rng, n, comps, drawn):
    pick = rng.choice(len(comps), size=n, p=_weights(comps))
    t = np.empty(n)
    x = np.empty(n)
    for j, c in enumerate(comps):
        m = pick == j
        k = int(m.sum())
        if not k:
            continue
        dt, dx = c.sample(rng, k)
        if c.centre >= 0:
            dt = dt + drawn[c.centre][0][m]
            dx = dx + drawn[c.centre][1][m]
        t[m], x[m] = dt, dx
    return t, x


def _chain_density(stages, pts):
    q = np.ones(pts[0][0].shape)
    for i, comps in enumerate(stages):
        t, x = pts[i]
        qi = np.zeros(t.shape)
        for w, c in zip(_weights(comps), comps):
            if c.kind == "box":
                qi += w * c.box_density(t, x)
                continue
            if c.centre >= 0:
                r = _parabolic(t - pts[c.centre][0], x - pts[c.centre][1])
            else:
                r = _parabolic(t, x)
            qi += w * c.density(r)
        q = q * qi
    return q


def proposal(eps, n_points, variant=0):
    """Mixture proposals for ``n_points`` chained points.

    Each point mixes a power-law core, a log-uniform shell and a uniform
    ball around the origin and around every earlier point. ``variant`` changes the scales,
    giving an independent estimator for the consistency check.
    """
    core, lo = ((1.0, 1.0 / 16.0), (2.0, 1.0 / 64.0))[variant]
    stages = []
    for i in range(n_points):
        comps = []
        for centre in range(-1, i):
            R = R_KERNEL if centre < 0 else R_DIFF
            comps.append(_Comp(centre, "pow", core * eps, weight=0.2))
            comps.append(_Comp(centre, "log", lo * eps, R, weight=0.5))
            # alpha = 3 is uniform in the parabolic ball
            comps.append(_Comp(centre, "pow", R, weight=0.3, alpha=3.0))
        # every point lies within i + 1 kernel supports of the origin
        comps.append(_Comp(-1, "box", (i + 1) * SUPPORT_T, (i + 1) * SUPPORT_X, weight=0.4 * len(comps) / 3))
        stages.append(tuple(comps))
    return tuple(stages)


# ---------------------------------------------------------------- kernel and correlation


def kernel_dx_line(t, x, horizon=0.5):
    """Spatial derivative of the truncated kernel built on the line heat kernel."""
    kern = fld.TruncatedKernel(horizon)
    t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
    out = np.zeros(t.shape)
    m = (t > 0) & (t < horizon ** 2) & (np.abs(x) < 0.5)
    if np.any(m):
        tm, xm = t[m], x[m]
        out[m] = (fld.heat_kernel_line_dx(tm, xm) * kern.chi(tm, xm)
                  + fld.heat_kernel_line(tm, xm) * kern.chi_dx(tm, xm))
    return out


# ---------------------------------------------------------------- constants


@dataclass(frozen=True)
class RenormConstants:
    eps: float
    a: float
    a_hat: float
    sigma_sq: float
    c2: float
    c220: float
    c211: float
    c220p: float
    c_eps: float
    error_bars: dict
    horizon: float = 0.5
    n_samples: int = 0

    @staticmethod
    def assemble(a, c2, c220, c211, c220p):
        return a * c2 + a ** 3 * (c220 + 4.0 * c211 + c220p)

    def check_assembly(self):
        return self.assemble(self.a, self.c2, self.c220, self.c211, self.c220p) == self.c_eps


@dataclass
class _Integrand:
    """One of the renormalisation integrals, as a function of chained points.

    ``parents[i]`` is the point that the kernel increment ending at point
    ``i`` starts from; flipping the spatial sign of any increment preserves
    Lebesgue measure and is used for antithetic averaging.
    """

    name: str
    parents: tuple
    kernels: tuple  # pairs (i, j): a factor K'(p_j - p_i), index -1 = origin
    series: object
    pairs: tuple  # point pairs whose correlations feed the series
    prefactor: float

    @property
    def n_points(self):
        return len(self.parents)

    def reflect(self, pts, mask):
        inc = []
        for i, (t, x) in enumerate(pts):
            par = self.parents[i]
            inc.append((t, x) if par < 0 else (t - pts[par][0], x - pts[par][1]))
        out = []
        for i, (dt, dx) in enumerate(inc):
            if mask[i]:
                dx = -dx
            par = self.parents[i]
            out.append((dt, dx) if par < 0 else (dt + out[par][0], dx + out[par][1]))
        return out

    def __call__(self, pts, rho):
        val = np.full(pts[0][0].shape, self.prefactor)
        for i, j in self.kernels:
            ti, xi = (0.0, 0.0) if i < 0 else pts[i]
            val = val * kernel_dx_line(pts[j][0] - ti, pts[j][1] - xi)
        live = val != 0.0
        if not np.any(live):
            return val
        rs = []
        for i, j in self.pairs:
            tj, xj = pts[j][0][live], pts[j][1][live]
            if i >= 0:
                tj, xj = tj - pts[i][0][live], xj - pts[i][1][live]
            rs.append(rho(tj, xj))
        val[live] = val[live] * self.series(*rs)
        return val


def _integrands(F, sigma_sq, eps, n_max):
    gm = coupling_constant(F, sigma_sq)
    a = gm.a
    cF = hermite_coeffs(Selector(F, 0, 0), sigma_sq, n_max)
    F1 = hermite_coeffs(Selector(F, 1), sigma_sq, n_max)
    cF2 = hermite_coeffs(Selector(F, 2, 0), sigma_sq, n_max)
    e2 = eps * eps
    # after y -> -y, z -> -z every kernel reads K'(later - earlier)
    return gm, {
        "c220": _Integrand("c220", (-1, -1), ((-1, 0), (-1, 1)), PairSeries(cF, cF), ((0, 1),),
                           1.0 / (a * a * e2)),
        "c211": _Integrand("c211", (-1, 0), ((-1, 0), (0, 1)), TripleSeries(F1, F1, cF),
                           ((-1, 0), (-1, 1), (0, 1)), 1.0 / (4.0 * a ** 3 * e2)),
        "c220p": _Integrand("c220p", (-1, -1), ((-1, 0), (-1, 1)), TripleSeries(cF2, cF, cF),
                            ((-1, 0), (-1, 1), (0, 1)), 1.0 / (2.0 * a ** 3 * e2)),
        "2'0'": _Integrand("2'0'", (-1,), ((-1, 0),), PairSeries(cF2, cF), ((-1, 0),),
                           1.0 / (2.0 * a * a * eps)),
        "2'1'": _Integrand("2'1'", (-1,), ((-1, 0),), PairSeries(F1, cF), ((-1, 0),),
                           1.0 / (2.0 * a * a * eps ** 1.5)),
    }


def _normalised_rho(eps, sigma_sq):
    corr = fld.CorrelationFn(eps)

    def rho(t, x):
        return corr.fast(t, x) * eps / sigma_sq

    return rho


def _mc_chunk(args):
    integrand, stages, rho, seed, key, chunk, n, antithetic = args
    rng = stream(seed, _TAG, *key, chunk)
    pts = []
    for comps in stages:
        pts.append(_stage_sample(rng, n, comps, pts))
    masks = itertools.product((0, 1), repeat=integrand.n_points) if antithetic else [(0,) * integrand.n_points]
    f = np.zeros(n)
    q = np.zeros(n)
    # the averaged integrand over the reflection group divided by the averaged density
    for mask in masks:
        p = integrand.reflect(pts, mask)
        f += integrand(p, rho)
        q += _chain_density(stages, p)
    v = f / q
    return np.array([v.sum(), (v * v).sum()])


def mc_integral(integrand, eps, sigma_sq, n_samples, seed=0, variant=0, chunk=100_000, workers=None,
                antithetic=True):
    """Importance-sampled estimate ``(mean, standard error)``; reproducible across worker counts."""
    stages = proposal(eps, integrand.n_points, variant)
    rho = _normalised_rho(eps, sigma_sq)
    key = (zlib_key(integrand.name), int(round(eps * 1e9)), variant)
    sizes = [min(chunk, n_samples - s) for s in range(0, n_samples, chunk)]
    items = [(integrand, stages, rho, seed, key, i, m, antithetic) for i, m in enumerate(sizes)]
    parts = pmap(_mc_chunk, items, workers if workers is not None else thread_cap())
    s, s2 = tree_sum(parts)
    mean = s / n_samples
    var = max(s2 / n_samples - mean * mean, 0.0)
    return float(mean), float(math.sqrt(var / (n_samples - 1)))


def zlib_key(name):
    import zlib

    return zlib.crc32(name.encode())


def whole_line_sigma_sq():
    """Variance of ``X``; independent of ``eps`` on the line."""
    return fld.CorrelationFn(0.1).sigma_sq


def compute_constants(F, eps, n_samples=1_000_000, seed=0, n_max=24, variant=0, workers=None):
    """All four constants and ``C_eps`` at one ``eps``."""
    if not 0.01 <= eps <= 0.2:
        raise SpecError("eps must lie in [0.01, 0.2]")
    sigma_sq = whole_line_sigma_sq()
    gm, ints = _integrands(F, sigma_sq, eps, n_max)
    a = gm.a
    c2 = gm.a_hat / (a * eps)
    vals, errs = {}, {"c2": 0.0}
    for name in ("c220", "c211", "c220p"):
        m, se = mc_integral(ints[name], eps, sigma_sq, n_samples, seed, variant, workers=workers)
        vals[name], errs[name] = m, se
    c_eps = RenormConstants.assemble(a, c2, vals["c220"], vals["c211"], vals["c220p"])
    errs["c_eps"] = abs(a) ** 3 * math.sqrt(errs["c220"] ** 2 + 16 * errs["c211"] ** 2 + errs["c220p"] ** 2)
    return RenormConstants(eps, a, gm.a_hat, sigma_sq, c2, vals["c220"], vals["c211"], vals["c220p"],
                           c_eps, errs, n_samples=n_samples)


def consistency_check(F, eps, n_samples=500_000, seed=0, n_max=24, n_sigma=3.0):
    """Two independent proposals must agree within ``n_sigma`` combined errors."""
    r0 = compute_constants(F, eps, n_samples, seed, n_max, variant=0)
    r1 = compute_constants(F, eps, n_samples, seed + 1, n_max, variant=1)
    out = {}
    for name in ("c220", "c211", "c220p"):
        d = getattr(r0, name) - getattr(r1, name)
        se = math.hypot(r0.error_bars[name], r1.error_bars[name])
        out[name] = (d, se)
        if abs(d) > n_sigma * se + 1e-14:
            raise ConsistencyError(f"{name}: proposals differ by {d:.3g} (se {se:.3g})")
    return out


def annihilation_check(F, eps, n_samples=1_000_000, seed=0, n_max=24):
    """Means of the symbols 2'0' and 2'1'; both vanish by spatial antisymmetry of K'."""
    sigma_sq = whole_line_sigma_sq()
    _, ints = _integrands(F, sigma_sq, eps, n_max)
    out = {}
    for name in ("2'0'", "2'1'"):
        out[name] = mc_integral(ints[name], eps, sigma_sq, n_samples, seed)
    return out


# ---------------------------------------------------------------- slopes


def _wls_slope(x, y, se):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    w = 1.0 / np.maximum(np.asarray(se, float), 1e-300) ** 2
    A = np.stack([np.ones_like(x), x], axis=1)
    cov = np.linalg.inv(A.T @ (A * w[:, None]))
    beta = cov @ (A.T @ (w * y))
    return float(beta[1]), float(math.sqrt(cov[1, 1]))


def log_cancellation_check(F, eps_list, n_samples=2_000_000, seed=0, n_max=24, workers=None):
    """Slopes of ``c220``, ``c211`` and ``c220 + 4 c211`` against ``log(1/eps)``."""
    eps_list = sorted(float(e) for e in eps_list)
    if len(eps_list) < 4 or eps_list[-1] / eps_list[0] < 8.0 * (1 - 1e-12):
        raise SpecError("need at least 4 eps values spanning a factor of 8")
    rows = [compute_constants(F, e, n_samples, seed, n_max, workers=workers) for e in eps_list]
    L = [math.log(1.0 / r.eps) for r in rows]
    s220 = _wls_slope(L, [r.c220 for r in rows], [r.error_bars["c220"] for r in rows])
    s211 = _wls_slope(L, [r.c211 for r in rows], [r.error_bars["c211"] for r in rows])
    comb = [r.c220 + 4.0 * r.c211 for r in rows]
    comb_se = [math.hypot(r.error_bars["c220"], 4.0 * r.error_bars["c211"]) for r in rows]
    sc = _wls_slope(L, comb, comb_se)
    p = np.array([r.c220p for r in rows])
    spread = float((p.max() - p.min()) / max(abs(p.mean()), 1e-300)) if np.any(p != 0) else 0.0
    return {
        "rows": rows,
        "slope_c220": s220,
        "slope_c211": s211,
        "slope_combined": sc,
        "c220p_spread": spread,
        "divergent": abs(s220[0]) > 5 * s220[1] and abs(s211[0]) > 5 * s211[1],
        "cancels": abs(sc[0]) <= 2 * sc[1],
        "c220p_bounded": spread < 0.1,
    }


# ---------------------------------------------------------------- triple-correlation bounds


def _fit_power(x, y):
    x = np.log(np.asarray(x, float))
    y = np.log(np.asarray(y, float))
    A = np.stack([np.ones_like(x), x], axis=1)
    beta, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    n = len(x)
    s2 = float(res[0]) / (n - 2) if res.size and n > 2 else 0.0
    cov = s2 * np.linalg.inv(A.T @ A)
    return float(beta[1]), float(math.sqrt(max(cov[1, 1], 0.0)))


def pair_correction_fit(F, sigma_sq, c_values):
    """Fit ``|E F'(Y) F'(Z) - 4 a^2 E YZ| ~ (E YZ)^(1 + beta')``; returns ``(exponent, se, values)``."""
    a = coupling_constant(F, sigma_sq).a
    vals = []
    for c in c_values:
        cov = np.array([[sigma_sq, c], [c, sigma_sq]])
        vals.append(pair_expectation(cov, Selector(F, 1), Selector(F, 1)) - 4.0 * a * a * c)
    vals = np.array(vals)
    if np.all(np.abs(vals) < 1e-14):
        return math.inf, 0.0, vals
    exp, se = _fit_power(c_values, np.abs(vals))
    return exp, se, vals


def triple_decomposition_terms(F, cov3):
    """Left side, ``H1``, ``H2`` (direct) and ``H2`` (sub-decomposition) for one covariance."""
    cov3 = np.asarray(cov3, float)
    a = coupling_constant(F, cov3[0, 0]).a
    F1, cF = Selector(F, 1), Selector(F, 0, 0)
    T1 = Selector(F, 1, 1)
    X = identity_selector()
    wick = 4.0 * a ** 3 * 2.0 * cov3[0, 2] * cov3[1, 2]
    lhs = triple_expectation(cov3, F1, F1, cF) - wick
    h1 = triple_expectation(cov3, T1, F1, cF)
    h2 = 2.0 * a * triple_expectation(cov3, X, T1, cF)
    yz = cov3[1:, 1:]
    sub = 2.0 * a * (cov3[0, 1] * pair_expectation(yz, Selector(F, 2, 0), cF)
                     + cov3[0, 2] * pair_expectation(yz, T1, T1))
    return lhs, h1, h2, sub


def triple_decomposition_check(F, covs, tol=1e-8):
    """Decomposition defects and the fitted exponent of ``H2 / (E XY + E XZ)`` in ``E YZ``."""
    rows = []
    for cov in covs:
        lhs, h1, h2, sub = triple_decomposition_terms(F, cov)
        scale = max(1.0, abs(lhs))
        rows.append((cov[1][2], cov[0][1] + cov[0][2], lhs, h1, h2, sub,
                     abs(lhs - h1 - h2) / scale, abs(h2 - sub) / scale))
    rows = np.array(rows)
    defect = float(rows[:, 6:].max())
    if defect > tol:
        raise NumericalError(f"decomposition defect {defect:.3g} exceeds {tol:g}")
    ratio = np.abs(rows[:, 4]) / rows[:, 1]
    good = ratio > 1e-14
    if good.sum() >= 3:
        exp, se = _fit_power(rows[good, 0], ratio[good])
    else:
        exp, se = math.inf, 0.0
    return {"defect": defect, "exponent": exp, "exponent_se": se, "rows": rows}


def curvature_triple_ratio(F, cov3):
    """``|E F''F''F'' - 8 a^3| / sum of squared cross covariances``."""
    cov3 = np.asarray(cov3, float)
    a = coupling_constant(F, cov3[0, 0]).a
    s = Selector(F, 2)
    v = triple_expectation(cov3, s, s, s) - 8.0 * a ** 3
    d = cov3[0, 1] ** 2 + cov3[0, 2] ** 2 + cov3[1, 2] ** 2
    return abs(v) / d


def curvature_triple_constant(F, eps, n_configs=50, seed=0):
    """Worst ratio over random cone configurations at one ``eps``."""
    from .wick import cone_points, covariance_matrix

    rng = stream(seed, _TAG, 7, int(round(eps * 1e9)))
    corr = fld.CorrelationFn(eps)
    worst = 0.0
    for _ in range(n_configs):
        pts = cone_points(3, rng)
        cov = covariance_matrix(pts, eps, corr)
        worst = max(worst, curvature_triple_ratio(F, cov))
    return worst
