"""Growth-model and Hopf-Cole integrators on the unit torus, coupled through one white noise."""

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import field as fld
from ._exec import pmap, stream, thread_cap
from .field import FieldSample, TorusGrid
from .nonlin import coupling_constant

BLOWUP = 1e6
MAGIC = b"KPZB"
_HEADER = struct.Struct("<4sIIdd4x")


class BlowUpError(RuntimeError):
    """Raised when a path leaves the ``1e6`` ball; ``partial`` holds the rows computed so far."""

    def __init__(self, msg, partial=None, step=None):
        super().__init__(msg)
        self.partial = partial
        self.step = step


class PositivityError(RuntimeError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    grid: TorusGrid
    eps: float
    F: object
    c_eps: float = 0.0
    scheme: str = "semi-implicit-spectral"
    initial: object = "zero"
    noise: bool = True
    record_every: int = 1

    def __post_init__(self):
        if self.scheme != "semi-implicit-spectral":
            raise ValueError(f"unknown scheme {self.scheme!r}")
        self.grid.check_resolution(self.eps)
        if int(self.record_every) < 1:
            raise ValueError("record_every must be positive")


@dataclass
class PathPair:
    h_eps: FieldSample
    h_kpz: FieldSample
    drift_fit: float
    blowup: bool = False


# ---------------------------------------------------------------- spectral helpers


def _wavenumbers(n, length=1.0):
    k = 2 * np.pi * np.fft.rfftfreq(n, d=length / n)
    return k


def initial_profile(initial, grid, eps=None, seed=0):
    """Named initial data ``zero``, ``sine``, ``sampled-stationary`` or an explicit array."""
    if isinstance(initial, str):
        if initial == "zero":
            return np.zeros(grid.n_space)
        if initial == "sine":
            return np.sin(2 * np.pi * grid.x)
        if initial == "sampled-stationary":
            return _stationary_profile(grid, eps, seed)
        raise ValueError(f"unknown initial profile {initial!r}")
    h0 = np.asarray(initial, float)
    if h0.shape != (grid.n_space,):
        raise ValueError(f"initial profile needs {grid.n_space} values")
    return h0


def _stationary_profile(grid, eps, seed):
    """``Z_eps(0)`` from a stationary free-field time slice, integrated in space (zero mean)."""
    g1 = TorusGrid(grid.n_space, 1, grid.dt)
    psi = fld.StationarySampler(g1, eps).sample(seed, 0).window[0]
    k = _wavenumbers(grid.n_space)
    ph = np.fft.rfft(psi)
    with np.errstate(divide="ignore", invalid="ignore"):
        zh = np.where(k > 0, ph / (1j * k), 0.0)
    if grid.n_space % 2 == 0:
        zh[-1] = 0.0
    return np.fft.irfft(zh, n=grid.n_space)


def white_noise(grid, eps, seed, path=0, eps_pad=None):
    """White noise padded for mollification at every scale up to ``eps_pad``.

    The window rows equal ``sample_white_noise(grid, seed, path)`` bit for bit;
    the padding rows come from separate substreams, so the amount of padding
    never changes the noise inside the window.
    """
    J = fld.noise_padding(grid, max(eps, eps_pad or 0.0), burn_in=False)[1]
    core = fld.sample_white_noise(grid, seed, path).values
    scale = 1.0 / math.sqrt(grid.dx * grid.dt)
    lead = stream(seed, 1, path, 1).standard_normal((J, grid.n_space)) * scale
    trail = stream(seed, 1, path, 2).standard_normal((J, grid.n_space)) * scale
    return FieldSample(grid, np.concatenate([lead[::-1], core, trail]), "white-noise", J, J)


def _integrate(n_space, length, dt, n_steps, nonlin, forcing, h0, record_every=1):
    """``h <- e^{dt d_xx}(h + dt (nonlin(d_x h) + forcing_n))`` with rows kept every ``record_every`` steps.

    ``forcing`` is an array with one row per step (or ``None``); the state is
    carried in Fourier space so each step costs one transform pair.
    """
    k = _wavenumbers(n_space, length)
    ik = 1j * k
    if n_space % 2 == 0:
        ik[-1] = 0.0
    heat = np.exp(-k * k * dt)
    fh = np.fft.rfft(forcing, axis=1) if forcing is not None else None
    hh = np.fft.rfft(np.asarray(h0, float))
    rows = [np.asarray(h0, float).copy()]
    bound = 2.0 / n_space
    for n in range(n_steps):
        inc = np.zeros_like(hh) if fh is None else fh[n]
        if nonlin is not None:
            inc = inc + np.fft.rfft(nonlin(np.fft.irfft(ik * hh, n=n_space)))
        hh = heat * (hh + dt * inc)
        # sum |h_k| bounds max |h|; the exact check runs only when the bound trips
        if not np.isfinite(hh).all() or bound * np.abs(hh).sum() > BLOWUP:
            h = np.fft.irfft(hh, n=n_space)
            if not np.all(np.isfinite(h)) or np.max(np.abs(h)) > BLOWUP:
                raise BlowUpError(f"blow-up at step {n + 1}", np.array(rows), n + 1)
        if (n + 1) % record_every == 0:
            rows.append(np.fft.irfft(hh, n=n_space))
    return np.array(rows)


def _as_sample(rows, grid, record_every, eps):
    g = TorusGrid(grid.n_space, rows.shape[0], grid.dt * record_every)
    return FieldSample(g, rows, "solution", eps=eps)


def integrate_growth(config, seed=0, path=0, noise=None):
    """Semi-implicit spectral Euler for ``h_t = h_xx + F(eps^{1/2} h_x)/eps + xi_eps - C_eps``.

    ``noise`` may be a padded white-noise sample on ``config.grid``; otherwise
    it is drawn from ``(seed, path)``. Rows are kept at ``t = 0, r dt, 2 r dt, ...``
    with ``r = config.record_every``.
    """
    g, eps, F = config.grid, config.eps, config.F
    if config.noise:
        xi = noise if noise is not None else white_noise(g, eps, seed, path)
        xe = fld.mollify(xi, eps=eps).window
    else:
        xe = None
    se = math.sqrt(eps)
    c = float(config.c_eps)

    def nonlin(u):
        return F(se * u) / eps

    forcing = (xe[:g.n_time] if xe is not None else np.zeros((g.n_time, g.n_space))) - c
    h0 = initial_profile(config.initial, g, eps, seed)
    rows = _integrate(g.n_space, 1.0, g.dt, g.n_time, nonlin, forcing, h0, config.record_every)
    return _as_sample(rows, g, config.record_every, eps)


def integrate_hopf_cole(a, grid, seed=0, h0=None, path=0, noise=None, noise_on=True, record_every=1):
    """Ito multiplicative heat equation ``Z <- e^{dt d_xx}(Z + a Z xi dt)``; returns ``log Z / a``.

    ``noise`` is a white-noise sample on ``grid`` (the window rows are used);
    passing the sample that drove ``integrate_growth`` couples the two paths.
    """
    if a == 0:
        raise ValueError("a must be nonzero")
    h0 = np.zeros(grid.n_space) if h0 is None else initial_profile(h0, grid)
    if noise_on:
        xi = noise if noise is not None else fld.sample_white_noise(grid, seed, path)
        w = xi.window
    k = _wavenumbers(grid.n_space)
    heat = np.exp(-k * k * grid.dt)
    # log Z is carried relative to a running shift so e^{a h} never overflows
    shift = float(np.max(a * h0))
    Z = np.exp(a * h0 - shift)
    rows = [h0.copy()]
    for n in range(grid.n_time):
        if noise_on:
            Z = Z * (1.0 + a * grid.dt * w[n])
        Z = np.fft.irfft(heat * np.fft.rfft(Z), n=grid.n_space)
        if np.any(Z <= 0) or not np.all(np.isfinite(Z)):
            raise PositivityError(f"Z <= 0 at step {n + 1}; reduce dt")
        m = float(Z.max())
        shift += math.log(m)
        Z = Z / m
        if (n + 1) % record_every == 0:
            rows.append((np.log(Z) + shift) / a)
    return _as_sample(np.array(rows), grid, record_every, None)


# ---------------------------------------------------------------- micro / macro


@dataclass(frozen=True)
class MicroGrid:
    """Uniform grid on ``[0, t_max] x (R / length Z)``."""

    n_space: int
    n_time: int
    dt: float
    length: float

    @property
    def dx(self):
        return self.length / self.n_space

    @property
    def x(self):
        return np.arange(self.n_space) * self.dx


@dataclass
class MicroSample:
    grid: MicroGrid
    values: np.ndarray


def integrate_micro(F, eps, macro_grid, seed=0, path=0, noise=None, h0=None, record_every=1):
    """Microscopic model ``h_t = h_xx + eps^{1/2} F(h_x) + xi_hat`` on the torus of size ``1/eps``.

    The noise is ``xi_hat(t, x) = eps^{3/2} xi_eps(eps^2 t, eps x)`` built from
    the same white noise as the macroscopic run on ``macro_grid``.
    """
    g = macro_grid
    xi = noise if noise is not None else white_noise(g, eps, seed, path)
    xe = fld.mollify(xi, eps=eps).window * eps ** 1.5
    mg = MicroGrid(g.n_space, g.n_time, g.dt / eps ** 2, 1.0 / eps)
    se = math.sqrt(eps)

    def nonlin(u):
        return se * F(u)

    h0 = np.zeros(g.n_space) if h0 is None else np.asarray(h0, float)
    rows = _integrate(g.n_space, mg.length, mg.dt, g.n_time, nonlin, xe[:g.n_time], h0, record_every)
    return MicroSample(MicroGrid(g.n_space, rows.shape[0], mg.dt * record_every, mg.length), rows)


def rescale_micro_to_macro(h_micro, eps, c_eps, target=None):
    """``h_eps(t, x) = eps^{1/2} h(t/eps^2, x/eps) - C_eps t`` on the unit torus.

    Without ``target`` the micro grid maps onto the macro grid point for point.
    With a ``TorusGrid`` target the field is interpolated, linearly in time and
    spectrally in space.
    """
    mg = h_micro.grid
    if abs(mg.length * eps - 1.0) > 1e-9:
        raise DomainError(f"micro torus of length {mg.length} does not match eps={eps}")
    dt = mg.dt * eps ** 2
    vals = math.sqrt(eps) * h_micro.values
    src = TorusGrid(mg.n_space, mg.n_time, dt)
    if target is not None:
        vals = _interpolate(vals, src, target)
        src = target
    vals = vals - c_eps * src.t[:, None]
    return FieldSample(src, vals, "solution", eps=eps)


def rescale_macro_to_micro(h_macro, eps, c_eps):
    g = h_macro.grid
    vals = (h_macro.window + c_eps * g.t[:, None]) / math.sqrt(eps)
    return MicroSample(MicroGrid(g.n_space, g.n_time, g.dt / eps ** 2, 1.0 / eps), vals)


def _interpolate(vals, src, dst):
    if dst.t_max - dst.dt > src.t_max - src.dt + 1e-12:
        raise DomainError("target horizon exceeds the source path")
    ti = dst.t / src.dt
    i0 = np.clip(np.floor(ti).astype(int), 0, src.n_time - 1)
    i1 = np.clip(i0 + 1, 0, src.n_time - 1)
    w = (ti - i0)[:, None]
    rows = (1 - w) * vals[i0] + w * vals[i1]
    if dst.n_space == src.n_space:
        return rows
    spec = np.fft.rfft(rows, axis=1)
    n = dst.n_space
    out = np.zeros((rows.shape[0], n // 2 + 1), dtype=complex)
    m = min(out.shape[1], spec.shape[1])
    out[:, :m] = spec[:, :m]
    return np.fft.irfft(out, n=n, axis=1) * (n / src.n_space)


# ---------------------------------------------------------------- coupled experiment


def fit_drift(diff, t):
    """Least-squares ``c`` minimising ``sum (diff - c t)^2`` over all grid points."""
    tt = np.broadcast_to(t[:, None], diff.shape)
    den = float(np.sum(tt * tt))
    return float(np.sum(tt * diff) / den) if den > 0 else 0.0


def holder_seminorm(f, dx, eta=0.25):
    """Spatial ``C^eta`` seminorm of a periodic profile."""
    n = f.size
    best = 0.0
    for lag in range(1, n // 2 + 1):
        d = np.max(np.abs(np.roll(f, -lag) - f))
        best = max(best, d / (lag * dx) ** eta)
    return best


@dataclass(frozen=True)
class ErrorRow:
    eps: float
    seed: int
    sup_error: float
    holder_error: float
    drift_fit: float
    blowup_flag: bool
    a: float


def experiment_grid(eps_list, T):
    """One grid resolving the smallest ``eps``; every ``eps`` in the list runs on it."""
    return TorusGrid.for_eps(min(eps_list), T)


def _seed_rows(args):
    F, eps_list, c_map, a_list, grid, seed, record_every, eta = args
    xi = white_noise(grid, min(eps_list), seed, 0, eps_pad=max(eps_list))
    refs = [integrate_hopf_cole(a, grid, noise=xi, record_every=record_every) for a in a_list]
    out = []
    for eps in eps_list:
        cfg = SolverConfig(grid, eps, F, c_map[eps], record_every=record_every)
        try:
            h = integrate_growth(cfg, noise=xi)
        except BlowUpError:
            out.extend(ErrorRow(eps, seed, math.nan, math.nan, math.nan, True, a) for a in a_list)
            continue
        t = h.grid.t
        for a, ref in zip(a_list, refs):
            diff = h.window - ref.window
            c = fit_drift(diff, t)
            r = diff - c * t[:, None]
            out.append(ErrorRow(eps, seed, float(np.max(np.abs(r))), holder_seminorm(r[-1], grid.dx, eta),
                                c, False, a))
    return out


def coupled_convergence_experiment(F, eps_list, seeds, T=0.25, c_eps=None, a=None, record_every=64,
                                   eta=0.25, workers=None, sigma_sq=None):
    """Per-seed drift-corrected errors of the growth model against Hopf-Cole on shared noise.

    ``c_eps`` maps each ``eps`` to its renormalisation constant (default: the
    leading term ``E F(X)/eps``; any constant mismatch is absorbed by the
    fitted drift). ``a`` defaults to the coupling of ``F`` at the whole-line
    variance; a sequence of values compares every growth path against one
    reference per value, all on the same noise.
    """
    eps_list = list(eps_list)
    if any(e2 >= e1 for e1, e2 in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be decreasing")
    if sigma_sq is None:
        from .renorm import whole_line_sigma_sq

        sigma_sq = whole_line_sigma_sq()
    gm = coupling_constant(F, sigma_sq)
    if a is None:
        a_list = [gm.a]
    elif np.ndim(a) == 0:
        a_list = [float(a)]
    else:
        a_list = [float(v) for v in a]
    if c_eps is None:
        c_eps = {e: gm.a_hat / e for e in eps_list}
    grid = experiment_grid(eps_list, T)
    items = [(F, eps_list, dict(c_eps), a_list, grid, int(s), record_every, eta) for s in seeds]
    rows = pmap(_seed_rows, items, workers if workers is not None else thread_cap())
    return [r for chunk in rows for r in chunk]


def summarize(rows, a=None):
    """Median sup error, blow-up rate and row count per ``eps`` (largest first)."""
    if a is not None:
        rows = [r for r in rows if r.a == a]
    out = {}
    for eps in sorted({r.eps for r in rows}, reverse=True):
        sel = [r for r in rows if r.eps == eps]
        ok = [r.sup_error for r in sel if not r.blowup_flag]
        out[eps] = {
            "median_sup": float(np.median(ok)) if ok else math.nan,
            "median_holder": float(np.median([r.holder_error for r in sel if not r.blowup_flag])) if ok else math.nan,
            "blowup_rate": 1.0 - len(ok) / len(sel),
            "n": len(sel),
        }
    return out


# ---------------------------------------------------------------- binary io


def write_binary(path, sample):
    g = sample.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, g.n_space, g.n_time, g.dx, g.dt))
        fh.write(np.ascontiguousarray(sample.window, dtype="<f8").tobytes())


def read_binary(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, n_space, n_time, dx, dt = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError("not a kpzlab binary grid")
        vals = np.frombuffer(fh.read(), dtype="<f8")
    if vals.size != n_space * n_time or abs(dx * n_space - 1.0) > 1e-12:
        raise ValueError("corrupt binary grid")
    return FieldSample(TorusGrid(n_space, n_time, dt), vals.reshape(n_time, n_space).copy(), "solution")
