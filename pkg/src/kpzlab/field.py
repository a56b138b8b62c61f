"""Mollified space-time white noise and the free field on the unit torus.

Conventions. Time runs along axis 0 of every sampled array and space along
axis 1. The heat kernel solves ``d_t P = d_x^2 P`` so that
``P_t(x) = (4 pi t)^(-1/2) exp(-x^2 / 4t)``. The free field is
``Psi_eps = P' * xi_eps`` and its covariance is ``varrho_eps``.

Two versions of ``varrho_eps`` are exposed. The whole-space one is
``1/2 P * (rho^{*2})_eps`` with the line heat kernel; it is the object the
correlation bounds talk about and satisfies exact parabolic scaling
``varrho_eps(t, x) = eps^-1 varrho_1(t / eps^2, x / eps)``. The torus one is
the covariance of the field we actually sample: a spatial derivative has no
zero mode, so it equals the periodised whole-space function minus 1/2.
"""

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import integrate, interpolate, signal

from ._exec import stream


class ResolutionError(ValueError):
    """Grid too coarse for the requested mollification scale."""


class NumericalError(RuntimeError):
    """A quadrature did not reach its tolerance."""


# Beyond this dimensionless frequency the squared bump transform is < 1e-18.
K_CUT = 260.0


def bump(u):
    """Standard bump ``exp(-1 / (1 - u^2))`` on ``|u| < 1``, zero outside."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    m = np.abs(u) < 1.0
    out[m] = np.exp(-1.0 / (1.0 - u[m] ** 2))
    return out


@lru_cache(maxsize=None)
def _gl(n):
    return leggauss(n)


def _gl_on(a, b, n):
    x, w = _gl(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


@lru_cache(maxsize=None)
def bump_mass():
    u, w = _gl_on(-1.0, 1.0, 2000)
    return float(w @ bump(u))


def _bump_hat_direct(k):
    u, w = _gl_on(-1.0, 1.0, 1024)
    wb = w * bump(u) / bump_mass()
    k = np.atleast_1d(np.asarray(k, dtype=float))
    out = np.empty_like(k)
    for s in range(0, k.size, 2048):
        out[s:s + 2048] = np.cos(np.outer(k[s:s + 2048], u)) @ wb
    return out


@lru_cache(maxsize=None)
def _bump_hat_spline():
    kk = np.linspace(0.0, K_CUT + 5.0, 53001)
    return interpolate.CubicSpline(kk, _bump_hat_direct(kk))


def bump_hat(k):
    """Fourier transform of the unit-mass bump, ``int psi(u) cos(k u) du``."""
    k = np.abs(np.asarray(k, dtype=float))
    out = np.zeros_like(k)
    m = k <= K_CUT
    out[m] = _bump_hat_spline()(k[m])
    return out


def _autocorr_direct(u):
    """``A(u) = int psi(v) psi(v + u) dv`` for the unit-mass bump."""
    u = np.abs(np.atleast_1d(np.asarray(u, dtype=float)))
    out = np.zeros_like(u)
    x, w = _gl(256)
    z2 = bump_mass() ** 2
    for i, ui in enumerate(u):
        if ui >= 2.0:
            continue
        lo, hi = -1.0, 1.0 - ui
        half = 0.5 * (hi - lo)
        v = lo + half * (x + 1.0)
        out[i] = half * (w @ (bump(v) * bump(v + ui))) / z2
    return out


@lru_cache(maxsize=None)
def _autocorr_nodes(n=512):
    u, w = _gl_on(-2.0, 2.0, n)
    a = _autocorr_direct(u)
    return u, w, a


def _log_mgf(q):
    """``log int A(u) exp(q u) du`` evaluated stably for ``q >= 0``."""
    u, w, a = _autocorr_nodes()
    q = np.atleast_1d(np.asarray(q, dtype=float))
    keep = a > 0
    lw = np.log(w[keep] * a[keep])
    uu = u[keep]
    out = np.empty_like(q)
    for s in range(0, q.size, 4096):
        e = lw[None, :] + q[s:s + 4096, None] * uu[None, :]
        mx = e.max(axis=1)
        out[s:s + 4096] = mx + np.log(np.exp(e - mx[:, None]).sum(axis=1))
    return out


def _exp_weighted_nodes(q, length, n):
    """Nodes and weights for ``int_0^length g(s) exp(-q s) ds`` (``q >= 0``)."""
    v, w = _gl_on(0.0, 1.0, n)
    if q * length < 1e-8:
        return length * v, length * w
    c = -np.expm1(-q * length)
    s = -np.log1p(-c * v) / q
    return s, w * (c / q)


def _h_time_far(k, t, tau_s):
    """``int A(u) exp(-k^2 |t - tau_s u|) du`` for ``|t| >= 2 tau_s``.

    This is the time factor of a single Fourier mode of the covariance. Away
    from the filter support the kink of ``|.|`` is not crossed and the
    integral factorises into ``exp(-k^2 |t|)`` times a moment generating
    function of ``A``.
    """
    k2 = np.asarray(k, dtype=float) ** 2
    return np.exp(-k2 * abs(float(t)) + _log_mgf(k2 * tau_s))


@lru_cache(maxsize=None)
def _autocorr_spline():
    uu = np.linspace(-2.0, 2.0, 8001)
    vals = _autocorr_direct(uu)
    spl = interpolate.CubicSpline(uu, vals)

    def f(u):
        u = np.asarray(u, dtype=float)
        out = spl(np.clip(u, -2.0, 2.0))
        out[np.abs(u) >= 2.0] = 0.0
        return np.maximum(out, 0.0)

    return f


def _h_time_near_vec(k, t, tau_s):
    """Time factor for ``|t| < 2 tau_s``, split at the kink ``u = t / tau_s``."""
    t = abs(float(t))
    k2 = np.asarray(k, dtype=float) ** 2
    q = k2 * tau_s
    u0 = t / tau_s
    A = _autocorr_spline()
    out = np.zeros_like(k2)
    v, w = _gl_on(0.0, 1.0, 400)
    for sign, length in ((1.0, 2.0 - u0), (-1.0, 2.0 + u0)):
        if length <= 0:
            continue
        ql = q * length
        small = ql < 1e-8
        c = np.where(small, 0.0, -np.expm1(-ql))
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(small[:, None], length * v[None, :],
                         -np.log1p(-c[:, None] * v[None, :]) / np.where(small, 1.0, q)[:, None])
            ww = np.where(small[:, None], length * w[None, :],
                          w[None, :] * (c / np.where(small, 1.0, q))[:, None])
        out += (ww * A(u0 + sign * s)).sum(axis=1)
    return out


def mode_time_factor(k, t, tau_s):
    """Time factor of the covariance for Fourier modes ``k`` at lag ``t``."""
    k = np.asarray(k, dtype=float)
    if abs(t) >= 2.0 * tau_s:
        return _h_time_far(k, t, tau_s)
    out = np.empty_like(k)
    for s in range(0, k.size, 1024):
        out[s:s + 1024] = _h_time_near_vec(k[s:s + 1024], t, tau_s)
    return out


# ---------------------------------------------------------------- grids


@dataclass(frozen=True)
class TorusGrid:
    """Uniform space-time grid on ``[0, t_max] x T`` with ``T`` the unit torus."""

    n_space: int
    n_time: int
    dt: float

    def __post_init__(self):
        if int(self.n_space) < 1 or int(self.n_time) < 1:
            raise ValueError("n_space and n_time must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def dx(self):
        return 1.0 / self.n_space

    @property
    def t_max(self):
        return self.n_time * self.dt

    @property
    def x(self):
        return np.arange(self.n_space) * self.dx

    @property
    def t(self):
        return np.arange(self.n_time) * self.dt

    @classmethod
    def for_eps(cls, eps, t_max, n_space=None):
        """Coarsest grid obeying ``dx <= eps/4`` and ``dt <= dx^2/2``.

        ``n_space`` is rounded up to an even number so the spectral routines
        have a clean Nyquist mode.
        """
        if n_space is None:
            n_space = int(math.ceil(4.0 / eps - 1e-9))
            n_space += n_space % 2
        dx = 1.0 / n_space
        dt_max = 0.5 * dx * dx
        n_time = max(1, int(math.ceil(t_max / dt_max - 1e-9)))
        return cls(n_space, n_time, t_max / n_time)

    def check_resolution(self, eps):
        if eps < 4.0 * self.dx * (1 - 1e-12):
            raise ResolutionError(f"eps={eps} needs dx <= eps/4, grid has dx={self.dx}")
        if self.dt > 0.5 * self.dx ** 2 * (1 + 1e-12):
            raise ResolutionError(f"dt={self.dt} exceeds dx^2/2={0.5 * self.dx ** 2}")


@dataclass(frozen=True)
class Mollifier:
    """Product mollifier ``rho(t, x) = c psi(t/r) psi(x/r)`` with the standard bump."""

    radius: float = 1.0

    space_symmetric = True

    def shape(self, t, x):
        r = self.radius
        c = 1.0 / (r * bump_mass()) ** 2
        return c * bump(np.asarray(t) / r) * bump(np.asarray(x) / r)

    def table(self, n=129):
        """Shape tabulated on the reference square ``[-r, r]^2``."""
        g = np.linspace(-self.radius, self.radius, n)
        return g, g, self.shape(g[:, None], g[None, :])

    @property
    def mass(self):
        r = self.radius
        u, w = _gl_on(-r, r, 400)
        return float(w @ self.shape(u[:, None], u[None, :]) @ w)

    def hat_space(self, k, eps):
        """Spatial Fourier factor of ``rho_eps``."""
        return bump_hat(self.radius * eps * np.asarray(k, dtype=float))

    def time_weights(self, eps, dt):
        """Discrete time filter of ``rho_eps`` on step ``dt``, normalised to sum 1."""
        half = self.radius * eps * eps
        J = int(math.floor(half / dt))
        j = np.arange(-J, J + 1)
        w = bump(j * dt / half)
        return w / w.sum(), J


DEFAULT_MOLLIFIER = Mollifier()


# ---------------------------------------------------------------- kernels


def _image_count(t):
    return int(math.ceil(math.sqrt(4.0 * t * 40.0))) + 1


def heat_kernel(t, x):
    """Periodic heat kernel on the unit torus by an image sum."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(t <= 0):
        raise ValueError("heat kernel needs t > 0")
    t, x = np.broadcast_arrays(t, x)
    xr = x - np.round(x)
    n = _image_count(float(t.max()))
    out = np.zeros(t.shape)
    for k in range(-n, n + 1):
        term = np.exp(-((xr - k) ** 2) / (4.0 * t))
        out += term
        if k > 0 and np.all(np.exp(-((abs(k) - 0.5) ** 2) / (4.0 * t)) < 1e-16 * out):
            break
    return out / np.sqrt(4.0 * np.pi * t)


def heat_kernel_dx(t, x):
    """Spatial derivative of the periodic heat kernel."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(t <= 0):
        raise ValueError("heat kernel needs t > 0")
    t, x = np.broadcast_arrays(t, x)
    xr = x - np.round(x)
    n = _image_count(float(t.max()))
    out = np.zeros(t.shape)
    for k in range(-n, n + 1):
        y = xr - k
        out += -y / (2.0 * t) * np.exp(-y * y / (4.0 * t))
    return out / np.sqrt(4.0 * np.pi * t)


def heat_kernel_line(t, x):
    """Whole-space heat kernel (no images)."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    return np.exp(-x * x / (4.0 * t)) / np.sqrt(4.0 * np.pi * t)


def heat_kernel_line_dx(t, x):
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    return -x / (2.0 * t) * heat_kernel_line(t, x)


def parabolic_norm(t, x):
    return np.sqrt(np.abs(t)) + np.abs(x)


def _smoothstep5(s):
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


def _smoothstep5_d(s):
    inside = (s > 0) & (s < 1)
    s = np.clip(s, 0.0, 1.0)
    return np.where(inside, 30.0 * s * s * (1.0 - s) ** 2, 0.0)


# (t^2 + x^4)^(1/4) <= sqrt|t| + |x| <= 2^(3/4) (t^2 + x^4)^(1/4)
_NORM_GAP = 2.0 ** -0.75


@dataclass(frozen=True)
class TruncatedKernel:
    """``K = P chi`` with ``chi`` a quintic cutoff in a smooth parabolic norm.

    ``chi`` is a function of ``N = (t^2 + x^4)^(1/4)``: it equals 1 for
    ``N <= horizon/2`` and vanishes for ``N >= 2^(-3/4) horizon``. In the
    parabolic metric this means ``chi = 1`` on the ball of radius horizon/2
    and ``chi = 0`` outside the ball of radius horizon.
    """

    horizon: float = 0.5

    def __post_init__(self):
        if not 0 < self.horizon <= 0.5:
            raise ValueError("horizon must lie in (0, 1/2]")

    @property
    def _band(self):
        lo = 0.5 * self.horizon
        return lo, _NORM_GAP * self.horizon - lo

    def chi(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        xr = x - np.round(x)
        lo, width = self._band
        n = (t * t + xr ** 4) ** 0.25
        return 1.0 - _smoothstep5((n - lo) / width)

    def chi_dx(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        xr = x - np.round(x)
        lo, width = self._band
        n = (t * t + xr ** 4) ** 0.25
        with np.errstate(divide="ignore", invalid="ignore"):
            dn = np.where(n > 0, xr ** 3 / n ** 3, 0.0)
        return -_smoothstep5_d((n - lo) / width) * dn / width

    def K(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        out = np.zeros(t.shape)
        m = (t > 0) & (t < self.horizon ** 2)
        if np.any(m):
            out[m] = heat_kernel(t[m], x[m]) * self.chi(t[m], x[m])
        return out

    def K_dx(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        out = np.zeros(t.shape)
        m = (t > 0) & (t < self.horizon ** 2)
        if np.any(m):
            tm, xm = t[m], x[m]
            out[m] = (heat_kernel_dx(tm, xm) * self.chi(tm, xm)
                      + heat_kernel(tm, xm) * self.chi_dx(tm, xm))
        return out


def truncate_kernel(horizon=0.5):
    """Return the truncated kernel and its exact spatial derivative."""
    kern = TruncatedKernel(horizon)
    return kern.K, kern.K_dx


def kernel_identity_check(t, x, rtol=1e-11):
    """Compute ``(P')^{*2}(t, x)`` by quadrature and compare with ``P(|t|, x)/2``.

    The forward convolution is ``int P'(w + z) P'(w) dw`` over space-time
    with the whole-space kernel. The space integral uses a shifted and
    scaled trapezoid rule, the time integral adaptive quadrature.
    Returns ``(numeric, half_P, rel_err)`` arrays.
    """
    t = np.atleast_1d(np.asarray(t, float))
    x = np.atleast_1d(np.asarray(x, float))
    t, x = np.broadcast_arrays(t, x)
    eta = np.linspace(-14.0, 14.0, 141)
    deta = eta[1] - eta[0]
    num = np.empty(t.shape)
    for i, (ti, xi) in enumerate(zip(t.ravel(), x.ravel())):
        # (P')^{*2} is invariant under z -> -z
        if ti < 0:
            ti, xi = -ti, -xi
        if ti == 0:
            raise ValueError("the identity is checked off the t = 0 slice")

        def inner(s, ti=ti, xi=xi):
            u = s + ti
            mu = -xi * s / (s + u)
            sd = math.sqrt(2.0 * s * u / (s + u))
            y = mu + sd * eta
            f = heat_kernel_line_dx(s, y) * heat_kernel_line_dx(u, y + xi)
            return sd * deta * f.sum()

        scale = max(ti, xi * xi)
        pieces = [0.0, scale * 1e-3, scale, 10 * scale, 100 * scale, np.inf]
        tot = 0.0
        for a, b in zip(pieces[:-1], pieces[1:]):
            val, err = integrate.quad(inner, a, b, epsabs=0.0, epsrel=rtol, limit=400)
            tot += val
        num.ravel()[i] = tot
    ref = 0.5 * heat_kernel_line(np.abs(t), x)
    return num, ref, np.abs(num - ref) / np.abs(ref)


def kernel_identity_grid(n_t=12, n_ratio=5, t_min=1e-6, t_max=1.0):
    """Displacements with ``|z| >= 1e-3`` inside the cone ``|x| <= 2 sqrt|t|``."""
    ts = np.geomspace(t_min, t_max, n_t)
    rs = np.linspace(0.0, 2.0, n_ratio)
    T, R = np.meshgrid(ts, rs, indexing="ij")
    X = R * np.sqrt(T)
    keep = parabolic_norm(T, X) >= 1e-3
    t, x = T[keep], X[keep]
    return np.concatenate([t, -t, t]), np.concatenate([x, x, -x])


# ---------------------------------------------------------------- correlation


class CorrelationFn:
    """Covariance ``varrho_eps`` of the free field ``Psi_eps``.

    Evaluation is spectral: each Fourier mode ``k`` contributes
    ``1/2 |rho_hat_x(eps k)|^2 h(k, t)`` with ``h`` an exact time integral
    against the autocorrelation of the time profile. The whole-space version
    integrates over ``k`` with a trapezoid rule whose period is chosen so
    that aliased images are below double precision.

    ``sigma_sq`` is ``eps * varrho_eps(0)``, the variance of
    ``X = eps^(1/2) Psi_eps``.
    """

    def __init__(self, eps, moll=DEFAULT_MOLLIFIER, domain="line", k_cut=None):
        if not 0 < eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if domain not in ("line", "torus"):
            raise ValueError("domain must be 'line' or 'torus'")
        self.eps = float(eps)
        self.moll = moll
        self.domain = domain
        self.k_cut = k_cut
        self.tau_s = moll.radius * eps * eps
        self.ell_s = moll.radius * eps
        self._sigma_sq = None

    # spectral core
    def _kmax(self, t):
        kmax = K_CUT / self.ell_s
        if t > 0:
            kmax = min(kmax, math.sqrt(46.0 / t))
        if self.k_cut is not None:
            kmax = min(kmax, float(self.k_cut))
        return kmax

    def _row(self, t, x):
        """Values at a single lag ``t`` for an array of ``x``."""
        t = abs(float(t))
        kmax = self._kmax(t)
        if self.domain == "torus":
            m = np.arange(1, int(math.floor(kmax / (2 * np.pi) + 1e-9)) + 1)
            k = 2 * np.pi * m
            if k.size == 0:
                return np.zeros_like(x)
            f = self.moll.hat_space(k, self.eps) ** 2 * mode_time_factor(k, t, self.tau_s)
            return np.cos(np.outer(x, k)) @ f
        L = 2.0 * float(np.max(np.abs(x), initial=0.0)) + 13.0 * math.sqrt(t + 2.0 * self.tau_s) + 8.0 * self.ell_s
        dk = 2 * np.pi / L
        k = np.arange(0, int(math.ceil(kmax / dk)) + 1) * dk
        f = self.moll.hat_space(k, self.eps) ** 2 * mode_time_factor(k, t, self.tau_s)
        f[0] *= 0.5
        out = np.empty(x.shape)
        for s in range(0, x.size, 256):
            out[s:s + 256] = np.cos(np.outer(x[s:s + 256], k)) @ f
        return out * dk / (2 * np.pi)

    def __call__(self, t, x):
        t = np.asarray(t, float)
        x = np.asarray(x, float)
        t, x = np.broadcast_arrays(t, x)
        at = np.abs(t).ravel()
        ax = np.abs(x).ravel()
        if self.domain == "torus":
            ax = np.abs(ax - np.round(ax))
        out = np.empty(at.shape)
        uniq, inv = np.unique(at, return_inverse=True)
        for j, tv in enumerate(uniq):
            sel = inv == j
            out[sel] = self._row(tv, ax[sel])
        return out.reshape(t.shape)

    @property
    def sigma_sq(self):
        if self._sigma_sq is None:
            self._sigma_sq = float(self.eps * self(0.0, 0.0))
        return self._sigma_sq

    def mode_covariance(self, k, t):
        """``E psi_k(t) conj(psi_k(0))`` for torus Fourier coefficients."""
        k = np.asarray(k, float)
        return self.moll.hat_space(k, self.eps) ** 2 * mode_time_factor(k, t, self.tau_s) / 2.0

    def fast(self, t, x):
        """Table-interpolated whole-space values (for Monte Carlo workloads)."""
        if self.domain != "line":
            raise ValueError("fast evaluation is available for the whole-space function")
        tab = _rho_table(self.moll.radius)
        e = self.eps
        return tab(np.asarray(t, float) / (e * e), np.asarray(x, float) / e) / e

    def sandwich_lambda(self, t, x):
        """Smallest ``Lambda`` with ``1/(L(|z|+eps)) <= varrho <= L/(|z|+eps)`` on the points."""
        v = self(t, x) * (parabolic_norm(t, x) + self.eps)
        with np.errstate(divide="ignore"):
            lam = np.maximum(v, 1.0 / v)
        return float(np.max(lam)), lam

    def export_csv(self, path, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        export_csv(path, t.ravel(), x.ravel(), self(t, x).ravel())


def correlation_fn(eps, moll=DEFAULT_MOLLIFIER, domain="line", k_cut=None):
    return CorrelationFn(eps, moll, domain, k_cut)


def sigma_sq_whole_space(moll=DEFAULT_MOLLIFIER, n_s=160, n_eta=240):
    """``1/2 int int P(|s|, y) rho^{*2}(s, y) ds dy`` by direct tensor quadrature.

    Independent of the spectral evaluator: it works in real space with the
    substitutions ``s = w^2`` and ``y = sqrt(s) eta``.
    """
    r = moll.radius
    A = _autocorr_spline()
    w_nodes, w_w = _gl_on(0.0, math.sqrt(2.0 * r), n_s)
    s = w_nodes ** 2
    g, gw = _gl(n_eta)
    # the eta range covers both the Gaussian and the support of rho^{*2}
    half = np.minimum(24.0, 2.0 * r / np.sqrt(s))
    eta = half[:, None] * g[None, :]
    eta_w = half[:, None] * gw[None, :]
    # P(s, sqrt(s) eta) sqrt(s) = exp(-eta^2/4) / sqrt(4 pi)
    gauss = np.exp(-eta ** 2 / 4.0) / math.sqrt(4.0 * np.pi)
    y = np.sqrt(s)[:, None] * eta
    inner = (A(s / r)[:, None] / r * A(y / r) / r * gauss * eta_w).sum(axis=1)
    # ds = 2 w dw, and the two signs of s contribute equally
    return float(2.0 * 0.5 * (w_w * 2.0 * w_nodes) @ inner)


def sandwich_grid(eps, n_r=25, r_min=1e-3, r_max=1.0, ratios=(0.0, 0.5, 1.0, 2.0)):
    """Log-spaced displacements ``(t, x)`` in the parabolic cone ``|x| <= 2 sqrt|t|``.

    Radii are parabolic norms. Both time orientations and both spatial
    signs are included.
    """
    rs = np.geomspace(r_min, r_max, n_r)
    ts, xs = [], []
    for rr in rs:
        for a in ratios:
            # sqrt t (1 + a) = rr
            st = rr / (1.0 + a)
            for sgn_t in (1.0, -1.0):
                for sgn_x in ((1.0, -1.0) if a > 0 else (1.0,)):
                    ts.append(sgn_t * st * st)
                    xs.append(sgn_x * a * st)
    return np.array(ts), np.array(xs)


def check_corr_change(corr, z, z_prime, K_factor, lam):
    """Test ``varrho(z) <= K Lambda^2 varrho(z')`` for ``|z'| <= K |z|``.

    Returns ``(ok, ratio)`` where ``ratio = varrho(z) / varrho(z')``.
    """
    if K_factor < 1:
        raise ValueError("K_factor must be >= 1")
    nz = parabolic_norm(*z)
    nzp = parabolic_norm(*z_prime)
    if nzp > K_factor * nz * (1 + 1e-12):
        raise ValueError("need |z'| <= K |z| in the parabolic metric")
    a = float(corr(*z))
    b = float(corr(*z_prime))
    ratio = a / b
    return ratio <= K_factor * lam * lam, ratio


# ---------------------------------------------------------------- fast table


class _RhoTable:
    """Spline table of the unit-scale whole-space correlation.

    Inner box: ``log varrho_1`` on ``(sqrt tau, xi)``. Outer region
    (``tau > TAU1``): ratio to ``P(tau, xi)/2`` on ``(log tau, xi/sqrt tau)``.
    Far outside both the value is below 1e-16 of the local peak and the
    heat-kernel asymptote is returned.
    """

    TAU1 = 64.0

    def __init__(self, radius):
        corr = CorrelationFn(0.5, Mollifier(radius))
        # evaluate at eps = 1 through the scaling relation
        def rho1(tau, xi):
            return corr(tau * 0.25, xi * 0.5) * 0.5

        s = np.linspace(0.0, math.sqrt(self.TAU1), 161)
        self.xi1 = 2.0 * radius + 12.5 * math.sqrt(self.TAU1 + 2.0 * radius)
        xi = np.linspace(0.0, self.xi1, int(self.xi1 / 0.1) + 1)
        S, XI = np.meshgrid(s, xi, indexing="ij")
        vals = rho1(S ** 2, XI)
        # below 1e-16 of the row peak the spectral sum is rounding noise
        floor = 1e-16 * vals[:, :1]
        self.inner = interpolate.RectBivariateSpline(s, xi, np.log(np.maximum(vals, floor)), kx=3, ky=3)
        self.floor_ratio = 1e-15
        lt = np.linspace(math.log(self.TAU1), math.log(4.0e6), 70)
        beta = np.linspace(0.0, 12.0, 121)
        LT, B = np.meshgrid(lt, beta, indexing="ij")
        tau = np.exp(LT)
        ref = 0.5 * heat_kernel_line(tau, B * np.sqrt(tau))
        ratio = rho1(tau, B * np.sqrt(tau)) / ref
        self.outer = interpolate.RectBivariateSpline(lt, beta, ratio, kx=3, ky=3)

    def __call__(self, tau, xi):
        tau, xi = np.broadcast_arrays(np.abs(np.asarray(tau, float)), np.abs(np.asarray(xi, float)))
        out = 0.5 * heat_kernel_line(np.maximum(tau, 1e-300), xi)
        m_in = (tau <= self.TAU1) & (xi <= self.xi1)
        if np.any(m_in):
            sq = np.sqrt(tau[m_in])
            v = np.exp(self.inner.ev(sq, xi[m_in]))
            peak = np.exp(self.inner.ev(sq, 0.0 * sq))
            out[m_in] = np.where(v > self.floor_ratio * peak, v, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            beta = xi / np.sqrt(tau)
        m_out = (tau > self.TAU1) & (tau <= 4.0e6) & (beta <= 12.0)
        if np.any(m_out):
            out[m_out] *= self.outer.ev(np.log(tau[m_out]), beta[m_out])
        return out


@lru_cache(maxsize=None)
def _rho_table(radius):
    return _RhoTable(radius)


# ---------------------------------------------------------------- sampling


@dataclass
class FieldSample:
    """One realisation of a space-time field on a grid.

    ``values`` has ``n_lead + grid.n_time + n_trail`` rows. The leading rows
    are the presampled past, the trailing ones the near future needed by a
    two-sided time filter. ``window`` returns the rows on ``[0, t_max)``.
    """

    grid: TorusGrid
    values: np.ndarray
    kind: str
    n_lead: int = 0
    n_trail: int = 0
    eps: float = None

    KINDS = ("white-noise", "mollified-noise", "psi-eps", "z-eps", "solution")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        want = (self.n_lead + self.grid.n_time + self.n_trail, self.grid.n_space)
        if self.values.shape != want:
            raise ValueError(f"values shape {self.values.shape} does not match grid {want}")

    @property
    def window(self):
        return self.values[self.n_lead:self.n_lead + self.grid.n_time]

    def to_csv(self, path):
        g = self.grid
        T, X = np.meshgrid(g.t, g.x, indexing="ij")
        export_csv(path, T.ravel(), X.ravel(), self.window.ravel())


def burn_in_time(eps):
    return 10.0 * max(eps * eps, 0.05)


def sample_white_noise(grid, seed, path=0, n_lead=0, n_trail=0):
    """Independent ``N(0, 1/(dx dt))`` cells, a pure function of ``(seed, path, grid)``."""
    rng = stream(seed, 1, path)
    rows = n_lead + grid.n_time + n_trail
    vals = rng.standard_normal((rows, grid.n_space)) / math.sqrt(grid.dx * grid.dt)
    return FieldSample(grid, vals, "white-noise", n_lead, n_trail)


def noise_padding(grid, eps, moll=DEFAULT_MOLLIFIER, burn_in=True):
    """Rows of past and future noise needed by ``mollify`` then ``sample_psi``."""
    _, J = moll.time_weights(eps, grid.dt)
    lead = J + (int(math.ceil(burn_in_time(eps) / grid.dt)) if burn_in else 0)
    return lead, J


def _mollify_values(values, grid, moll, eps):
    k = 2 * np.pi * np.fft.rfftfreq(grid.n_space, d=grid.dx)
    spec = np.fft.rfft(values, axis=-1) * moll.hat_space(k, eps)
    out = np.fft.irfft(spec, n=grid.n_space, axis=-1)
    w, J = moll.time_weights(eps, grid.dt)
    shape = [1] * out.ndim
    shape[-2] = w.size
    return signal.oaconvolve(out, w.reshape(shape), mode="valid", axes=-2), J


def mollify(noise, moll=DEFAULT_MOLLIFIER, eps=0.1):
    """Convolve white noise with ``rho_eps``: spectral in space, a discrete filter in time."""
    if noise.kind != "white-noise":
        raise ValueError("mollify expects white noise")
    noise.grid.check_resolution(eps)
    vals, J = _mollify_values(noise.values, noise.grid, moll, eps)
    if noise.n_lead < J or noise.n_trail < J:
        raise ResolutionError(f"need {J} rows of padding on each side")
    return FieldSample(noise.grid, vals, "mollified-noise", noise.n_lead - J, noise.n_trail - J, eps)


def _etd_weights(k, dt):
    h = k * k * dt
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.exp(-h)
        phi1 = np.where(h > 1e-6, -np.expm1(-h) / h, 1.0 - h / 2.0 + h * h / 6.0)
        phia = np.where(h > 1e-3, (1.0 - (1.0 + h) * e) / (h * h), 0.5 - h / 3.0 + h * h / 8.0)
    return e, dt * phia, dt * (phi1 - phia)


def _psi_recursion(rows_hat, k, dt, n_skip, n_keep):
    """Exponential trapezoid integration of ``d psi_k = -k^2 psi_k dt + i k xi_k dt``.

    ``rows_hat`` has time on axis -2 and Fourier modes on axis -1. The
    mollified noise is taken piecewise linear in time, which is integrated
    exactly against the mode's exponential.
    """
    e, w1, w2 = _etd_weights(k, dt)
    ik = 1j * k
    state = np.zeros(rows_hat.shape[:-2] + rows_hat.shape[-1:], dtype=complex)
    out = np.empty(rows_hat.shape[:-2] + (n_keep, rows_hat.shape[-1]), dtype=complex)
    for n in range(n_skip + n_keep):
        if n > 0:
            state = e * state + ik * (w1 * rows_hat[..., n - 1, :] + w2 * rows_hat[..., n, :])
        if n >= n_skip:
            out[..., n - n_skip, :] = state
    return out


def sample_psi(noise_mollified, burn_in=None):
    """Free field ``Psi_eps = P' * xi_eps`` from mollified noise with a burn-in past."""
    if noise_mollified.kind != "mollified-noise":
        raise ValueError("sample_psi expects mollified noise")
    g = noise_mollified.grid
    eps = noise_mollified.eps
    need = burn_in_time(eps) if burn_in is None else burn_in
    if noise_mollified.n_lead * g.dt < need * (1 - 1e-9):
        raise ResolutionError(f"burn-in of {need} needs {int(math.ceil(need / g.dt))} leading rows")
    k = 2 * np.pi * np.fft.rfftfreq(g.n_space, d=g.dx)
    if g.n_space % 2 == 0:
        k[-1] = 0.0
    rows = noise_mollified.values[:noise_mollified.n_lead + g.n_time]
    spec = np.fft.rfft(rows, axis=-1)
    psi_hat = _psi_recursion(spec, k, g.dt, noise_mollified.n_lead, g.n_time)
    vals = np.fft.irfft(psi_hat, n=g.n_space, axis=-1)
    return FieldSample(g, vals, "psi-eps", 0, 0, eps)


def free_field(grid, eps, seed, path=0, moll=DEFAULT_MOLLIFIER):
    """White noise, mollification and free field in one call (shares the seed stream)."""
    lead, trail = noise_padding(grid, eps, moll)
    xi = sample_white_noise(grid, seed, path, lead, trail)
    return sample_psi(mollify(xi, moll, eps))


def band_limit(grid):
    """Largest wavenumber carried by the grid's field (Nyquist excluded)."""
    return 2 * np.pi * ((grid.n_space - 1) // 2)


class StationarySampler:
    """Exact stationary sampler of the torus free field by circulant embedding.

    Each Fourier mode is an independent stationary Gaussian sequence with
    covariance ``1/2 |rho_hat_x|^2 h(k, t)``; it is embedded in a circulant
    long enough for that mode to decorrelate. No burn-in is needed. The
    law matches the band-limited torus ``CorrelationFn`` exactly.
    """

    def __init__(self, grid, eps, moll=DEFAULT_MOLLIFIER):
        grid.check_resolution(eps)
        self.grid = grid
        self.eps = eps
        self.corr = CorrelationFn(eps, moll, "torus", k_cut=band_limit(grid))
        n_modes = (grid.n_space - 1) // 2
        self.modes = np.arange(1, n_modes + 1)
        k = 2 * np.pi * self.modes
        tau_s = moll.radius * eps * eps
        self.groups = []
        dt = grid.dt
        lengths = []
        for kk in k:
            span = max(grid.n_time, int(math.ceil((46.0 / kk ** 2 + 2 * tau_s) / dt)) + 1)
            lengths.append(1 << int(math.ceil(math.log2(2 * span))))
        lengths = np.array(lengths)
        for L in np.unique(lengths):
            idx = np.nonzero(lengths == L)[0]
            half = L // 2
            lags = np.arange(half + 1) * dt
            cov = np.empty((idx.size, half + 1))
            for j, lag in enumerate(lags):
                cov[:, j] = self.corr.mode_covariance(k[idx], lag) if lag < 2 * tau_s else 0.0
            far = lags >= 2 * tau_s
            if np.any(far):
                kk2 = k[idx] ** 2
                lm = _log_mgf(kk2 * tau_s)
                cov[:, far] = 0.5 * moll.hat_space(k[idx], eps)[:, None] ** 2 * np.exp(
                    -kk2[:, None] * lags[None, far] + lm[:, None])
            circ = np.concatenate([cov, cov[:, -2:0:-1]], axis=1)
            lam = np.fft.fft(circ, axis=1).real
            # quadrature noise in the covariance leaves tiny negative eigenvalues
            if np.any(lam < -1e-6 * lam.max(axis=1, keepdims=True)):
                raise NumericalError("circulant embedding is not positive")
            self.groups.append((idx, L, np.sqrt(np.maximum(lam, 0.0) / L)))
        self.sigma_sq = self.corr.sigma_sq

    def sample(self, seed, path=0):
        g = self.grid
        rng = stream(seed, 2, path)
        coef = np.zeros((g.n_time, g.n_space // 2 + 1), dtype=complex)
        for idx, L, root in self.groups:
            z = rng.standard_normal((idx.size, L)) + 1j * rng.standard_normal((idx.size, L))
            y = np.fft.fft(root * z, axis=1)[:, :g.n_time]
            # real and imaginary parts are independent with the mode covariance
            coef[:, self.modes[idx]] = y.T / math.sqrt(2.0)
        vals = np.fft.irfft(coef, n=g.n_space, axis=-1) * g.n_space
        return FieldSample(g, vals, "psi-eps", 0, 0, self.eps)


# ---------------------------------------------------------------- io


def export_csv(path, t, x, values):
    """Write columns ``t, x, value`` with round-trip float formatting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "value"])
        for a, b, c in zip(np.ravel(t), np.ravel(x), np.ravel(values)):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(c))])


# ---------------------------------------------------------------- sampling check


def sample_correlation_check(eps, n_paths=500, n_disp=10, seed=0, t_lag_max=None, workers=1, n_sigma=3.0):
    """Compare sampled ``E Psi(z) Psi(z + d)`` with the torus ``varrho_eps`` at random lags.

    Lags ``d = (s, y)`` are drawn on the grid with ``s`` up to ``t_lag_max``
    (default ``4 eps^2``) and ``|y| <= 1/2``. Each path contributes the
    average over all base points; the standard error comes from the spread
    across paths. Returns rows ``(s, y, estimate, stderr, exact, z_score)``.
    """
    from ._exec import pmap, tree_sum

    t_lag_max = 4.0 * eps * eps if t_lag_max is None else t_lag_max
    grid = TorusGrid.for_eps(eps, 2.0 * t_lag_max)
    sampler = StationarySampler(grid, eps)
    rng = stream(seed, 2, 1 << 30)
    max_row = int(t_lag_max / grid.dt)
    lag_rows = rng.integers(0, max_row + 1, n_disp)
    lag_cols = rng.integers(-grid.n_space // 2, grid.n_space // 2 + 1, n_disp)
    n_base = grid.n_time - max_row

    def one(path):
        v = sampler.sample(seed, path).window
        base = v[:n_base]
        return np.array([np.mean(base * np.roll(v[r:r + n_base], -c, axis=1)) for r, c in zip(lag_rows, lag_cols)])

    est = np.array(pmap(one, range(n_paths), workers))
    mean = tree_sum(list(est)) / n_paths
    se = est.std(axis=0, ddof=1) / math.sqrt(n_paths)
    s = lag_rows * grid.dt
    y = lag_cols * grid.dx
    exact = sampler.corr(s, y)
    z = (mean - exact) / se
    rows = list(zip(s, y, mean, se, exact, z))
    return rows, bool(np.all(np.abs(z) <= n_sigma))
