"""Renormalised model fields for the basic symbols and their pairings with test functions."""

import math
from dataclasses import dataclass

import numpy as np

from . import field as fld
from ._exec import pmap, thread_cap, tree_sum
from .field import FieldSample, ResolutionError, TorusGrid
from .nonlin import coupling_constant

KAPPA = 0.01


class ConsistencyError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSymbol:
    tag: str
    homogeneity: float

    TAGS = ("zeroP", "oneP", "twoP", "onePzero", "twoPzero")

    def __post_init__(self):
        if self.tag not in self.TAGS:
            raise ValueError(f"unknown symbol {self.tag!r}")

    @property
    def base(self):
        return {"onePzero": "oneP", "twoPzero": "twoP"}.get(self.tag, self.tag)

    @property
    def convolved(self):
        return self.tag in ("onePzero", "twoPzero")


def symbol(tag, kappa=KAPPA):
    hom = {"zeroP": -kappa, "oneP": -0.5 - kappa, "twoP": -1.0 - 2 * kappa}
    base = {"onePzero": "oneP", "twoPzero": "twoP"}.get(tag, tag)
    if base not in hom:
        raise ValueError(f"unknown symbol {tag!r}")
    h = hom[base] + (1.0 if base != tag else 0.0)
    return ModelSymbol(tag, h)


@dataclass(frozen=True)
class ModelConstants:
    """Coupling and centring constant matched to the variance of the sampled field."""

    eps: float
    sigma_sq: float
    a: float
    c2: float


def model_constants(F, eps, sigma_sq):
    """``a = E F''(X)/2`` and ``c2 = E F(X)/(a eps)`` at variance ``sigma_sq``."""
    gm = coupling_constant(F, sigma_sq)
    if gm.a == 0:
        raise ValueError("coupling constant vanishes")
    return ModelConstants(eps, sigma_sq, gm.a, gm.a_hat / (gm.a * eps))


# ---------------------------------------------------------------- kernel convolution


def _cell_gl(n=24):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def kernel_weights(grid, which="Kprime", horizon=0.5):
    """Cell integrals of ``K'`` (or ``K``) for the discrete space-time convolution.

    Lag ``l`` covers ``s`` in ``[(l - 1/2) dt, (l + 1/2) dt]`` clipped at 0 and
    column ``j`` the periodic cell around ``x_j``. For ``K'`` the spatial
    integral is exact: ``K(s, x_j + dx/2) - K(s, x_j - dx/2)``.
    """
    kern = fld.TruncatedKernel(horizon)
    dt, dx = grid.dt, grid.dx
    n_lag = int(math.ceil(horizon ** 2 / dt)) + 1
    xs = np.arange(grid.n_space) * dx
    xs = xs - np.round(xs)
    u, wu = _cell_gl()
    W = np.zeros((n_lag, grid.n_space))
    for l in range(n_lag):
        lo, hi = max(0.0, (l - 0.5) * dt), (l + 0.5) * dt
        # s = lo + (hi - lo) v^2 resolves the s -> 0 end of the first cell
        s = lo + (hi - lo) * u ** 2
        ws = (hi - lo) * 2.0 * u * wu
        ok = s > 0
        s, ws = s[ok], ws[ok]
        S = s[:, None]
        if which == "Kprime":
            vals = kern.K(S, xs[None, :] + 0.5 * dx) - kern.K(S, xs[None, :] - 0.5 * dx)
        else:
            vals = _cell_heat(S, xs[None, :], dx) * kern.chi(S, xs[None, :])
            vals = np.where(S < horizon ** 2, vals, 0.0)
        W[l] = ws @ vals
    return W


def _cell_heat(s, x, dx):
    """Integral of the periodic heat kernel over ``[x - dx/2, x + dx/2]``."""
    from scipy.special import erf

    out = np.zeros(np.broadcast(s, x).shape)
    r = 2.0 * np.sqrt(s)
    for k in range(-2, 3):
        out += 0.5 * (erf((x + 0.5 * dx - k) / r) - erf((x - 0.5 * dx - k) / r))
    return out


def convolve(sample, which="Kprime", horizon=0.5):
    """``K' * f`` (or ``K * f``) on the rows of ``sample`` with a full kernel history.

    The first ``n_lag - 1`` rows lack history and are dropped; the result lives
    on a shorter grid with the same spacing.
    """
    g = sample.grid
    W = kernel_weights(g, which, horizon)
    n_lag = W.shape[0]
    f = sample.window
    if f.shape[0] < n_lag:
        raise ResolutionError(f"need at least {n_lag} rows of history for the kernel")
    n_out = f.shape[0] - n_lag + 1
    n_fft = 1 << int(math.ceil(math.log2(f.shape[0] + n_lag)))
    Fw = np.fft.rfft2(W, s=(n_fft, g.n_space))
    Ff = np.fft.rfft2(f, s=(n_fft, g.n_space))
    full = np.fft.irfft2(Fw * Ff, s=(n_fft, g.n_space))
    vals = full[n_lag - 1:n_lag - 1 + n_out]
    return FieldSample(TorusGrid(g.n_space, n_out, g.dt), np.ascontiguousarray(vals), "solution", eps=sample.eps)


# ---------------------------------------------------------------- model fields


def evaluate_symbol(sym, psi, F, a, constants):
    """Pointwise model field of ``sym`` from a free-field sample."""
    if isinstance(sym, str):
        sym = symbol(sym)
    if a == 0:
        raise ValueError("a must be nonzero")
    eps = psi.eps
    if constants.eps != eps:
        raise ConsistencyError(f"constants at eps={constants.eps}, field at eps={eps}")
    X = math.sqrt(eps) * psi.window
    base = sym.base
    if base == "zeroP":
        vals = F.deriv(2, X) / (2.0 * a) - 1.0
    elif base == "oneP":
        vals = F.deriv(1, X) / (2.0 * a * math.sqrt(eps))
    else:
        vals = F(X) / (a * eps) - constants.c2
    out = FieldSample(psi.grid, vals, "solution", eps=eps)
    if sym.convolved:
        out = convolve(out, "Kprime")
    return out


# ---------------------------------------------------------------- test functions


def _bump_norm():
    return (0.5 * fld.bump_mass()) ** 2


@dataclass(frozen=True)
class TestFunction:
    """``phi_z^lam(t, x) = lam^-3 phi((t - t0)/lam^2, (x - x0)/lam)``.

    ``profile`` is ``"bump"`` (``psi(t/0.5) psi(x/0.5)`` of unit mass) or
    ``"mean-zero"`` (the bump minus a wider copy of the same mass).
    """

    __test__ = False

    lam: float
    t0: float = 0.0
    x0: float = 0.0
    profile: str = "bump"

    def __post_init__(self):
        if self.profile not in ("bump", "mean-zero"):
            raise ValueError(f"unknown profile {self.profile!r}")
        if not self.lam > 0:
            raise ValueError("lam must be positive")

    def terms(self):
        """Separable pieces ``(coef, time_scale, space_scale)`` of the profile."""
        if self.profile == "bump":
            return ((1.0, 1.0, 1.0),)
        return ((1.0, 1.0, 1.0), (-1.0, 4.0, 2.0))

    @property
    def half_extent(self):
        """Half widths ``(time, space)`` of the support."""
        ts = max(t for _, t, _ in self.terms())
        xs = max(x for _, _, x in self.terms())
        return 0.5 * ts * self.lam ** 2, 0.5 * xs * self.lam

    def factors(self, dt_, dx_, coef, ts, xs):
        n = _bump_norm() * ts * xs
        ft = fld.bump(dt_ / (0.5 * ts * self.lam ** 2))
        fx = fld.bump(dx_ / (0.5 * xs * self.lam))
        return coef * ft / (n * self.lam ** 2), fx / self.lam

    def __call__(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        dxr = x - self.x0
        dxr = dxr - np.round(dxr)
        out = np.zeros(t.shape)
        for coef, ts, xs in self.terms():
            ft, fx = self.factors(t - self.t0, dxr, coef, ts, xs)
            out += ft * fx
        return out


def pair_with_test(sample, test):
    """Riemann sum ``dx dt sum f phi`` over the sample window."""
    g = sample.grid
    if test.lam < 4.0 * g.dx * (1 - 1e-12):
        raise ResolutionError(f"lam={test.lam} below 4 dx={4 * g.dx}")
    return float(_pairings(sample.window, g, test.lam, np.array([test.t0]), np.array([test.x0]),
                           test.profile)[0, 0])


def _pairings(vals, g, lam, t0s, x0s, profile="bump"):
    """All pairings for base points ``t0s x x0s`` using separability."""
    t = np.arange(vals.shape[0]) * g.dt
    x = g.x
    out = np.zeros((t0s.size, x0s.size))
    proto = TestFunction(lam, profile=profile)
    for coef, ts, xs in proto.terms():
        dx_ = x[:, None] - x0s[None, :]
        dx_ = dx_ - np.round(dx_)
        dt_ = t[None, :] - t0s[:, None]
        ft, fx = proto.factors(dt_, dx_, coef, ts, xs)
        out += (ft * g.dt) @ (vals @ (fx * g.dx))
    return out


def tile_points(grid, lam, profile="bump", margin=0.0):
    """Disjoint base points covering the sample window for a given ``lam``."""
    proto = TestFunction(lam, profile=profile)
    ht, hx = proto.half_extent
    t_lo, t_hi = ht + margin, grid.t_max - grid.dt - ht
    if t_hi < t_lo:
        raise ResolutionError(f"window {grid.t_max} too short for lam={lam}")
    n_t = int((t_hi - t_lo) // (2 * ht)) + 1
    t0s = t_lo + 2 * ht * np.arange(n_t)
    n_x = max(1, int(1.0 // (2 * hx)))
    x0s = np.arange(n_x) / n_x
    return t0s, x0s


# ---------------------------------------------------------------- experiments


def model_grid(eps, lam_max, extra_time=0.0, profile="bump"):
    """Grid with ``dx <= eps/4``, ``dt <= dx^2/2`` and room for the widest test function."""
    ht, _ = TestFunction(lam_max, profile=profile).half_extent
    return TorusGrid.for_eps(eps, 2.0 * ht * 1.05 + extra_time)


def _path_moments(args):
    sym, F, consts, sampler, seed, path, lams, order, profile = args
    psi = sampler.sample(seed, path)
    fs = evaluate_symbol(sym, psi, F, consts.a, consts)
    out = []
    for lam in lams:
        t0s, x0s = tile_points(fs.grid, lam, profile)
        p = _pairings(fs.window, fs.grid, lam, t0s, x0s, profile)
        out.append(np.mean(np.abs(p) ** order))
    return np.array(out)


def moments(sym, F, eps, lams, n_paths, order=2, seed=0, profile="bump", workers=None, sampler=None):
    """Path means and standard errors of ``|<Pi tau, phi^lam>|^order`` (tiles averaged per path)."""
    if isinstance(sym, str):
        sym = symbol(sym)
    lams = np.asarray(lams, float)
    extra = 0.5 ** 2 + 0.01 if sym.convolved else 0.0
    if sampler is None:
        sampler = fld.StationarySampler(model_grid(eps, lams.max(), extra, profile), eps)
    if lams.min() < 4.0 * sampler.grid.dx * (1 - 1e-12):
        raise ResolutionError(f"lam={lams.min()} below 4 dx={4 * sampler.grid.dx}")
    consts = model_constants(F, eps, sampler.sigma_sq)
    items = [(sym, F, consts, sampler, seed, p, lams, order, profile) for p in range(n_paths)]
    rows = pmap(_path_moments, items, workers if workers is not None else thread_cap())
    rows = np.array(rows)
    mean = tree_sum(list(rows)) / n_paths
    sq = tree_sum(list(rows * rows)) / n_paths
    se = np.sqrt(np.maximum(sq - mean * mean, 0.0) / max(n_paths - 1, 1))
    return mean, se


@dataclass(frozen=True)
class ScalingFit:
    symbol: str
    eps: float
    lams: tuple
    moments: tuple
    stderr: tuple
    exponent: float
    exponent_se: float
    order: int

    def ci(self, z=1.96):
        return self.exponent - z * self.exponent_se, self.exponent + z * self.exponent_se


def scaling_fit(sym, F, eps, lams, n_paths, order=2, seed=0, workers=None):
    """Log-log weighted regression of the moment on ``lam``; returns the slope divided by ``order``."""
    lams = np.asarray(sorted(lams), float)
    if lams[-1] / lams[0] < 8.0 * (1 - 1e-12):
        raise ValueError("lam grid must span a factor of 8")
    if n_paths < 200:
        raise ValueError("need at least 200 paths")
    if isinstance(sym, str):
        sym = symbol(sym)
    m, se = moments(sym, F, eps, lams, n_paths, order, seed, workers=workers)
    y = np.log(m)
    sy = se / m
    x = np.log(lams)
    w = 1.0 / np.maximum(sy, 1e-300) ** 2
    A = np.stack([np.ones_like(x), x], axis=1)
    cov = np.linalg.inv(A.T @ (A * w[:, None]))
    beta = cov @ (A.T @ (w * y))
    return ScalingFit(sym.tag, eps, tuple(lams), tuple(m), tuple(se),
                      float(beta[1] / order), float(math.sqrt(cov[1, 1]) / order), order)


def centring_check(sym, F, eps, n_paths=200, lam=0.2, seed=0, workers=None):
    """Mean pairing with its standard error; it should vanish for every symbol."""
    if isinstance(sym, str):
        sym = symbol(sym)
    sampler = fld.StationarySampler(model_grid(eps, lam), eps)
    consts = model_constants(F, eps, sampler.sigma_sq)

    def one(path):
        fs = evaluate_symbol(sym, sampler.sample(seed, path), F, consts.a, consts)
        t0s, x0s = tile_points(fs.grid, lam)
        return float(_pairings(fs.window, fs.grid, lam, t0s, x0s).mean())

    vals = np.array(pmap(one, range(n_paths), workers if workers is not None else thread_cap()))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_paths))


def compare_to_reference(sym, F, eps, n_paths, lam=0.2, seed=0, workers=None):
    """``E |<Pi(F) tau - Pi(F_ref) tau, phi^lam>|^2`` on shared noise with ``F_ref(u) = a u^2``."""
    from .nonlin import poly

    if isinstance(sym, str):
        sym = symbol(sym)
    extra = 0.5 ** 2 + 0.01 if sym.convolved else 0.0
    sampler = fld.StationarySampler(model_grid(eps, lam, extra), eps)
    consts = model_constants(F, eps, sampler.sigma_sq)
    Fref = poly(0.0, 0.0, consts.a)
    cref = model_constants(Fref, eps, sampler.sigma_sq)

    def one(path):
        psi = sampler.sample(seed, path)
        d = evaluate_symbol(sym, psi, F, consts.a, consts).window - evaluate_symbol(
            sym, psi, Fref, cref.a, cref).window
        g = sampler.grid if not sym.convolved else TorusGrid(sampler.grid.n_space, d.shape[0], sampler.grid.dt)
        t0s, x0s = tile_points(g, lam)
        return float(np.mean(_pairings(d, g, lam, t0s, x0s) ** 2))

    vals = np.array(pmap(one, range(n_paths), workers if workers is not None else thread_cap()))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(max(n_paths, 2)))
