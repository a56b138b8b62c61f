"""The nonlinearity F and Gaussian expectations built from it.

A :class:`Nonlinearity` is an even function with derivatives up to order
seven. The coupling constant ``a = E F''(X) / 2`` and the chaos
coefficients are Gauss-Hermite integrals against ``N(0, sigma^2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dfield
from functools import lru_cache

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial.hermite_e import hermeval
from scipy import special
from scipy.interpolate import CubicSpline

from ._exec import stream
from .field import NumericalError, bump

MAX_ORDER = 7
GROWTH_RANGE = 50.0
FAMILIES = ("poly", "sqrt1pu2", "gauss", "table")


class SymmetryError(ValueError):
    pass


class SpecError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Nonlinearity:
    family: str
    derivs: tuple  # callables u -> F^(l)(u), l = 0..7
    growth_M: float
    holder_alpha: float = 0.5
    params: dict = dfield(default_factory=dict)
    error_bounds: tuple = (0.0,) * (MAX_ORDER + 1)
    growth_C: float = dfield(init=False, default=None)
    is_even: bool = dfield(init=False, default=True)

    def __post_init__(self):
        if len(self.derivs) != MAX_ORDER + 1:
            raise SpecError(f"need {MAX_ORDER + 1} derivative evaluators")
        u = np.linspace(0.05, 5.0, 100)
        f_pos, f_neg = self(u), self(-u)
        scale = max(1.0, float(np.max(np.abs(f_pos))))
        if np.max(np.abs(f_pos - f_neg)) > 1e-12 * scale:
            raise SymmetryError("F is not even")
        object.__setattr__(self, "growth_C", self._growth_constant())

    def __call__(self, u):
        return self.deriv(0, u)

    def deriv(self, order, u):
        if not 0 <= order <= MAX_ORDER:
            raise ValueError(f"derivative order {order} outside 0..{MAX_ORDER}")
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(self.derivs[order](u), u.shape).astype(float)

    def _growth_table(self):
        u = np.linspace(-GROWTH_RANGE, GROWTH_RANGE, 4001)
        w = (1.0 + np.abs(u)) ** self.growth_M
        return np.array([np.max(np.abs(self.deriv(l, u)) / w) for l in range(MAX_ORDER + 1)])

    def _growth_constant(self):
        return float(self._growth_table().max()) * (1.0 + 1e-9)

    def check_growth(self):
        """True when every derivative obeys the stored bound on ``[-50, 50]``."""
        return bool(np.all(self._growth_table() <= self.growth_C))

    def __repr__(self):
        return f"Nonlinearity({self.family}, {self.params})"


def _poly_derivs(coeffs):
    p = Polynomial(coeffs)
    out = []
    for _ in range(MAX_ORDER + 1):
        out.append(p)
        p = p.deriv()
    return tuple(out)


def _ratio_derivs(step, base):
    """Derivatives ``P_l(u) * base(u, l)`` from a recurrence on the polynomials ``P_l``."""
    polys = [Polynomial([1.0])]
    for l in range(MAX_ORDER):
        polys.append(step(polys[-1], l))
    return tuple((lambda u, P=P, l=l: P(u) * base(u, l)) for l, P in enumerate(polys))


def _sqrt_family():
    one_u2 = Polynomial([1.0, 0.0, 1.0])
    u_poly = Polynomial([0.0, 1.0])

    def step(P, l):
        # d/du [P (1+u^2)^(1/2-l)] = [P'(1+u^2) + (1-2l) u P] (1+u^2)^(-1/2-l)
        return P.deriv() * one_u2 + (1 - 2 * l) * u_poly * P

    return _ratio_derivs(step, lambda u, l: (1.0 + u * u) ** (0.5 - l))


def _gauss_family():
    u_poly = Polynomial([0.0, 1.0])

    def step(P, l):
        return P.deriv() - 2.0 * u_poly * P

    return _ratio_derivs(step, lambda u, l: np.exp(-u * u))


def _table_family(data):
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] < MAX_ORDER + 2:
        raise SpecError(f"table needs columns u, F and {MAX_ORDER} derivative columns")
    u = data[:, 0]
    if np.any(np.diff(u) <= 0):
        raise SpecError("table abscissae must increase")
    splines = [CubicSpline(u, data[:, 1 + l]) for l in range(MAX_ORDER + 1)]
    mid = 0.5 * (u[1:] + u[:-1])
    errs = [float(np.max(np.abs(splines[l].derivative()(mid) - splines[l + 1](mid))))
            for l in range(MAX_ORDER)] + [0.0]
    lo, hi = u[0], u[-1]

    def clip(s):
        return lambda x: np.where((x >= lo) & (x <= hi), s(np.clip(x, lo, hi)), np.nan)

    return tuple(clip(s) for s in splines), tuple(errs), (lo, hi)


def _read_table(path):
    arr = np.genfromtxt(path, delimiter=",")
    arr = np.atleast_2d(arr)
    return arr[~np.any(np.isnan(arr), axis=1)]


def make_nonlinearity(spec, holder_alpha=0.5):
    """Build ``F`` from a config dict.

    Accepted forms: ``{"family": "poly", "coeffs": [c0, c1, ...]}`` (power
    basis), ``{"family": "sqrt1pu2"}`` for ``sqrt(1+u^2)``, ``{"family":
    "gauss"}`` for ``exp(-u^2)``, and ``{"family": "table", "file": path}``
    or ``"data"`` with columns ``u, F, F', ..., F^(7)``.
    """
    if isinstance(spec, Nonlinearity):
        return spec
    spec = dict(spec)
    fam = spec.pop("family", None)
    if fam not in FAMILIES:
        raise SpecError(f"unknown family {fam!r}; expected one of {FAMILIES}")
    if fam == "poly":
        coeffs = [float(c) for c in spec.pop("coeffs", [])]
        if not coeffs:
            raise SpecError("poly family needs coeffs")
        if any(c != 0.0 for c in coeffs[1::2]):
            raise SymmetryError("odd powers in an even nonlinearity")
        out = Nonlinearity("poly", _poly_derivs(coeffs), float(len(coeffs) - 1), holder_alpha,
                           {"coeffs": coeffs})
    elif fam == "sqrt1pu2":
        out = Nonlinearity("sqrt1pu2", _sqrt_family(), 1.0, holder_alpha, {})
    elif fam == "gauss":
        out = Nonlinearity("gauss", _gauss_family(), 0.0, holder_alpha, {})
    else:
        if "data" in spec:
            data = spec.pop("data")
        elif "file" in spec:
            data = _read_table(spec.pop("file"))
        else:
            raise SpecError("table family needs 'file' or 'data'")
        derivs, errs, rng = _table_family(data)
        # outside the tabulated range every derivative reads as zero
        derivs = tuple((lambda u, d=d: np.nan_to_num(d(u), nan=0.0)) for d in derivs)
        out = Nonlinearity("table", derivs, float(spec.pop("growth_M", 2.0)), holder_alpha,
                           {"range": rng}, errs)
    if spec:
        raise SpecError(f"unknown keys {sorted(spec)}")
    return out


def poly(*coeffs):
    return make_nonlinearity({"family": "poly", "coeffs": list(coeffs)})


def taylor_remainder_G(F, x, y):
    """``F(x+y) - F(x) - F'(x) y - F''(x) y^2 / 2``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return F(x + y) - F(x) - F.deriv(1, x) * y - 0.5 * F.deriv(2, x) * y * y


# ---------------------------------------------------------------- Gaussian moments


@lru_cache(maxsize=None)
def _gh(order):
    x, w = special.roots_hermitenorm(order)
    return x, w / math.sqrt(2.0 * math.pi)


def gauss_expect(fun, sigma_sq, order=64):
    """``E fun(sigma N)`` by probabilists' Gauss-Hermite quadrature."""
    x, w = _gh(order)
    return float(np.dot(w, fun(math.sqrt(sigma_sq) * x)))


def gauss_expect_converged(fun, sigma_sq, start=16, cap=4096, tol=1e-10):
    """Double the order until successive values agree; returns ``(value, order)``."""
    order = start
    prev = gauss_expect(fun, sigma_sq, order)
    while order < cap:
        order *= 2
        cur = gauss_expect(fun, sigma_sq, order)
        if abs(cur - prev) < tol * max(1.0, abs(cur)):
            return cur, order
        prev = cur
    raise NumericalError(f"Gauss-Hermite did not converge by order {cap}")


@dataclass(frozen=True)
class GaussianMoments:
    sigma_sq: float
    quadrature_order: int
    a_hat: float
    a: float


def coupling_constant(F, sigma_sq):
    if sigma_sq <= 0:
        raise ValueError("sigma_sq must be positive")
    a2, n1 = gauss_expect_converged(lambda u: F.deriv(2, u), sigma_sq)
    ah, n2 = gauss_expect_converged(F, sigma_sq)
    return GaussianMoments(float(sigma_sq), max(n1, n2), ah, 0.5 * a2)


def coupling_constant_mc(F, sigma_sq, n=10_000_000, seed=0, chunk=1_000_000):
    """Monte Carlo ``(a, se_a, a_hat, se_a_hat)`` for cross-checking the quadrature."""
    rng = stream(seed, 3, 0)
    s = np.zeros(2)
    s2 = np.zeros(2)
    done = 0
    sd = math.sqrt(sigma_sq)
    while done < n:
        m = min(chunk, n - done)
        u = sd * rng.standard_normal(m)
        v = np.stack([0.5 * F.deriv(2, u), F(u)])
        s += v.sum(axis=1)
        s2 += (v * v).sum(axis=1)
        done += m
    mean = s / n
    se = np.sqrt(np.maximum(s2 / n - mean ** 2, 0.0) / (n - 1))
    return float(mean[0]), float(se[0]), float(mean[1]), float(se[1])


def hermite_projection(F, sigma_sq, m, order=256):
    """``E F^(m)(sigma N)`` via ``sigma^(1-m) E[F'(sigma N) He_(m-1)(N)]``."""
    if m < 1 or m - 1 > 40:
        raise ValueError("projection degree must lie in 0..40")
    x, w = _gh(order)
    sd = math.sqrt(sigma_sq)
    c = np.zeros(m)
    c[-1] = 1.0
    return float(np.dot(w, F.deriv(1, sd * x) * hermeval(x, c))) / sd ** (m - 1)


def chaos_coefficients_cn(F, sigma_sq, n_max):
    """``c_n = E F^(2n+2)(sigma N)`` for ``n = 0..n_max``."""
    out = []
    for n in range(n_max + 1):
        m = 2 * n + 2
        if m <= MAX_ORDER:
            out.append(gauss_expect_converged(lambda u, m=m: F.deriv(m, u), sigma_sq)[0])
        else:
            out.append(hermite_projection(F, sigma_sq, m))
    return np.array(out)


# ---------------------------------------------------------------- Fourier decay


_DICT = tuple((c, r) for r in (1.0, 0.75, 0.5, 0.25)
              for c in np.linspace(-(1.0 - r), 1.0 - r, 4))


def _dictionary_norms(M):
    """Sup norm over derivatives ``0..M+2`` of each dictionary bump, by finite differences."""
    out = []
    for _, r in _DICT:
        k = np.linspace(-r, r, 8001)
        v = bump(k / r)
        best = np.max(np.abs(v))
        for _ in range(M + 2):
            v = np.gradient(v, k)
            best = max(best, float(np.max(np.abs(v[50:-50]))))
        out.append(best)
    return np.array(out)


def _sixth_derivative_spectrum(F, k_top, half_width=800.0, n=2 ** 21):
    """Cosine transform of ``F^(6)`` on ``[0, k_top]`` by one trapezoid FFT, as a spline."""
    dx = 2.0 * half_width / n
    x = (np.arange(n) - n // 2) * dx
    spec = np.fft.rfft(np.fft.ifftshift(F.deriv(6, x))).real * dx
    k = 2 * np.pi * np.fft.rfftfreq(n, dx)
    keep = k <= k_top + 1.0
    return CubicSpline(k[keep], spec[keep])


def fourier_norm_decay(F, M=2, K_max=32, n_dict=16, n_nodes=32, g_floor=1e-8):
    """Dictionary lower bound of the localised norm of ``F_hat`` on windows ``[K-1, K+1]``.

    For ``|K| >= 2`` the window avoids the origin, so ``<F_hat, phi>`` equals
    ``<(F^(6))^, phi / (ik)^6>`` and only the integrable sixth derivative is
    transformed. Windows where that transform is below ``g_floor`` sit at the
    FFT noise floor and are left out of the fit. Returns ``(K, norms, slope,
    slope_se)`` with the slope of ``log norm`` against ``log(1+K)``.
    """
    if K_max > 64:
        raise ValueError("K_max is capped at 64")
    Ks = np.arange(2, K_max + 1)
    scales = _dictionary_norms(M)[:n_dict]
    atoms = _DICT[:n_dict]
    norms = np.zeros(Ks.size)
    resolved = np.zeros(Ks.size, dtype=bool)
    # a polynomial has F_hat supported at the origin, so its windows stay zero
    if F.family != "poly":
        ghat = _sixth_derivative_spectrum(F, K_max + 1.0)
        kn, kw = np.polynomial.legendre.leggauss(n_nodes)
        for i, K in enumerate(Ks):
            best = 0.0
            gmax = 0.0
            for (c, r), s in zip(atoms, scales):
                kk = K + c + r * kn
                gh = ghat(kk)
                gmax = max(gmax, float(np.max(np.abs(gh))))
                best = max(best, abs(r * np.dot(kw, gh * bump(kn) / kk ** 6)) / s)
            norms[i] = best
            resolved[i] = gmax > g_floor
    if resolved.sum() < 3:
        slope = float("-inf") if np.all(norms < 1e-12) else float("nan")
        return Ks, norms, slope, 0.0
    X = np.log1p(Ks[resolved])
    Y = np.log(norms[resolved])
    A = np.vstack([X, np.ones_like(X)]).T
    coef = np.linalg.lstsq(A, Y, rcond=None)[0]
    s2 = float(np.sum((Y - A @ coef) ** 2)) / max(1, X.size - 2)
    se = math.sqrt(s2 / np.sum((X - X.mean()) ** 2))
    return Ks, norms, float(coef[0]), se
