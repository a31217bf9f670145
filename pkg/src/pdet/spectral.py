"""Fourier pseudo-spectral ETDRK solvers and random initial conditions.

All PDEs live on periodic rectangles and are written as
``du/dt = L u + N(u)`` with ``L`` diagonal in Fourier space. Fields use the
``[f, x, y]`` layout; axis ``x`` is the first spatial axis.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .fields import Trajectory

log = logging.getLogger(__name__)

GS_CONFIGS = {
    # name: (feed, kill, dt_store, warmup stored steps)
    "gs-alpha": (0.008, 0.046, 30.0, 75),
    "gs-beta": (0.020, 0.046, 30.0, 50),
    "gs-gamma": (0.024, 0.056, 75.0, 70),
    "gs-delta": (0.028, 0.056, 130.0, 0),
    "gs-epsilon": (0.020, 0.056, 15.0, 300),
    "gs-theta": (0.040, 0.060, 200.0, 0),
    "gs-iota": (0.050, 0.0605, 240.0, 0),
    "gs-kappa": (0.052, 0.063, 300.0, 15),
}

PDE_KINDS = ("diff", "fisher", "sh", *GS_CONFIGS, "burgers", "kdv", "ks", "decay-turb", "kolm-flow")

FIELDS = {
    "diff": ["density"],
    "fisher": ["concentration"],
    "sh": ["concentration"],
    "burgers": ["velocity_x", "velocity_y"],
    "kdv": ["velocity_x", "velocity_y"],
    "ks": ["density"],
    "decay-turb": ["vorticity"],
    "kolm-flow": ["vorticity"],
    **{k: ["concentration_a", "concentration_b"] for k in GS_CONFIGS},
}

# substeps at the reference 2048^2 resolution; advective kinds are rescaled with grid spacing
PAPER_SUBSTEPS = {"sh": 5, "burgers": 50, "kdv": 10, "ks": 5, "decay-turb": 500, "kolm-flow": 1500}
ADVECTIVE = ("burgers", "kdv", "decay-turb", "kolm-flow")
DEFAULT_ORDER = {"ks": 4, "kdv": 4, "kolm-flow": 4}

GS_DIFFUSIVITY = (0.00002, 0.00001)
GS_SIM_DT = 1.0
KOLMOGOROV_WAVENUMBER = 4
KOLMOGOROV_AMPLITUDE = 1.0
BLOWUP_LIMIT = 1e6


class SimulationBlowUp(FloatingPointError):
    pass


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# -- grids -----------------------------------------------------------------------

class SpectralGrid:
    """Wavenumbers ``k = 2 pi n / L`` for an rfft2 layout ``[x, y//2 + 1]``."""

    def __init__(self, resolution, extent=(1.0, 1.0)):
        nx, ny = resolution
        if nx & (nx - 1) or ny & (ny - 1):
            raise ValueError(f"resolution must be powers of two, got {resolution}")
        self.shape = (nx, ny)
        self.extent = (float(extent[0]), float(extent[1]))
        ix = np.fft.fftfreq(nx, 1.0 / nx)
        iy = np.fft.rfftfreq(ny, 1.0 / ny)
        self.ix = ix[:, None]
        self.iy = iy[None, :]
        self.kx = 2 * np.pi * self.ix / self.extent[0]
        self.ky = 2 * np.pi * self.iy / self.extent[1]
        self.k2 = self.kx ** 2 + self.ky ** 2
        # odd derivatives drop the Nyquist mode, which has no real counterpart
        self.kx_odd = np.where(np.abs(self.ix) == nx // 2, 0.0, self.kx)
        self.ky_odd = np.where(np.abs(self.iy) == ny // 2, 0.0, self.ky)
        self.dealias = (np.abs(self.ix) < nx / 3) & (np.abs(self.iy) < ny / 3)

    def fft(self, u):
        return np.fft.rfft2(u, axes=(-2, -1))

    def ifft(self, u_hat):
        return np.fft.irfft2(u_hat, s=self.shape, axes=(-2, -1))

    def coords(self):
        x = np.arange(self.shape[0]) * self.extent[0] / self.shape[0]
        y = np.arange(self.shape[1]) * self.extent[1] / self.shape[1]
        return np.meshgrid(x, y, indexing="ij")


@dataclass
class SpectralState:
    coeffs: np.ndarray  # complex [f, x, y//2 + 1]
    grid: SpectralGrid

    @classmethod
    def from_physical(cls, u, grid):
        return cls(grid.fft(np.asarray(u, dtype=np.float64)), grid)

    def to_physical(self):
        return self.grid.ifft(self.coeffs)


# -- ETDRK time stepping ----------------------------------------------------------

def _contour_mean(fn, z, n_points=16, radius=1.0):
    roots = radius * np.exp(2j * np.pi * (np.arange(n_points) + 0.5) / n_points)
    zc = z[..., None] + roots
    return fn(zc).mean(axis=-1)


class ETDRK:
    """Cox-Matthews ETDRK2/ETDRK4 for a diagonal linear operator.

    The phi-function coefficients are averaged over points on a complex
    circle around each ``L*dt`` to avoid cancellation near zero.
    """

    def __init__(self, linear, dt, order=2, n_contour=16):
        if dt <= 0:
            raise ValueError("dt must be positive")
        if order not in (2, 4):
            raise ValueError(f"ETDRK order must be 2 or 4, got {order}")
        self.dt = dt
        self.order = order
        lin = np.asarray(linear)
        self.real = not np.iscomplexobj(lin)
        z = (lin * dt).astype(np.complex128)
        fix = (lambda a: a.real) if self.real else (lambda a: a)
        self.E = fix(np.exp(z))
        if order == 2:
            self.phi1 = dt * fix(_contour_mean(lambda s: (np.exp(s) - 1) / s, z, n_contour))
            self.phi2 = dt * fix(_contour_mean(lambda s: (np.exp(s) - 1 - s) / s ** 2, z, n_contour))
        else:
            self.E2 = fix(np.exp(z / 2))
            self.Q = dt * fix(_contour_mean(lambda s: (np.exp(s / 2) - 1) / s, z, n_contour))
            self.f1 = dt * fix(_contour_mean(
                lambda s: (-4 - s + np.exp(s) * (4 - 3 * s + s ** 2)) / s ** 3, z, n_contour))
            self.f2 = dt * fix(_contour_mean(lambda s: (2 + s + np.exp(s) * (s - 2)) / s ** 3, z, n_contour))
            self.f3 = dt * fix(_contour_mean(
                lambda s: (-4 - 3 * s - s ** 2 + np.exp(s) * (4 - s)) / s ** 3, z, n_contour))

    def step(self, u_hat, nonlinear=None):
        if nonlinear is None:
            return self.E * u_hat
        if self.order == 2:
            n0 = nonlinear(u_hat)
            a = self.E * u_hat + self.phi1 * n0
            return a + self.phi2 * (nonlinear(a) - n0)
        n0 = nonlinear(u_hat)
        a = self.E2 * u_hat + self.Q * n0
        na = nonlinear(a)
        b = self.E2 * u_hat + self.Q * na
        nb = nonlinear(b)
        c = self.E2 * a + self.Q * (2 * nb - n0)
        nc = nonlinear(c)
        return self.E * u_hat + self.f1 * n0 + 2 * self.f2 * (na + nb) + self.f3 * nc


def etdrk_step(state, linear, nonlinear, dt, order=2, name="pde"):
    """Advance Fourier coefficients (array or ``SpectralState``) by one step."""
    coeffs = state.coeffs if isinstance(state, SpectralState) else state
    out = ETDRK(linear, dt, order).step(coeffs, nonlinear)
    if not np.all(np.isfinite(out)):
        raise SimulationBlowUp(f"{name}: non-finite state after ETDRK step with dt={dt}")
    if isinstance(state, SpectralState):
        return SpectralState(out, state.grid)
    return out


# -- PDE operators -----------------------------------------------------------------

class Operator:
    """Linear symbol plus a dealiased nonlinear term in Fourier space."""

    def __init__(self, grid, linear, nonlinear=None):
        self.grid = grid
        self.linear = linear
        self.nonlinear = nonlinear


def _dealiased(grid, fn):
    mask = grid.dealias

    def nonlinear(u_hat):
        return fn(u_hat * mask) * mask

    return nonlinear


def diffusion_operator(grid, nu_x, nu_y):
    lin = -(nu_x * grid.kx ** 2 + nu_y * grid.ky ** 2)
    return Operator(grid, np.broadcast_to(lin, (1,) + lin.shape).copy())


def fisher_operator(grid, diffusivity, reactivity):
    lin = (-diffusivity * grid.k2 + reactivity)[None]

    def n(u_hat):
        u = grid.ifft(u_hat)
        return grid.fft(-reactivity * u * u)

    return Operator(grid, lin, _dealiased(grid, n))


def swift_hohenberg_operator(grid, reactivity, critical_number):
    lin = (reactivity - (critical_number - grid.k2) ** 2)[None]

    def n(u_hat):
        u = grid.ifft(u_hat)
        return grid.fft(u * u - u * u * u)

    return Operator(grid, lin, _dealiased(grid, n))


def gray_scott_operator(grid, feed, kill, d_a=GS_DIFFUSIVITY[0], d_b=GS_DIFFUSIVITY[1]):
    lin = np.stack([-d_a * grid.k2 - feed, -d_b * grid.k2 - (feed + kill)])
    feed_hat = np.zeros(grid.k2.shape, dtype=np.complex128)
    feed_hat[0, 0] = feed * grid.shape[0] * grid.shape[1]

    def n(u_hat):
        a, b = grid.ifft(u_hat)
        r = grid.fft(a * b * b)
        return np.stack([-r + feed_hat, r])

    return Operator(grid, lin, _dealiased(grid, n))


def burgers_operator(grid, viscosity):
    lin = np.stack([-viscosity * grid.k2] * 2)
    dx = 1j * grid.kx_odd
    dy = 1j * grid.ky_odd

    def n(u_hat):
        u, v = grid.ifft(u_hat)
        uu, uv, vv = grid.fft(np.stack([u * u, u * v, v * v]))
        return -0.5 * np.stack([dx * uu + dy * uv, dx * uv + dy * vv])

    return Operator(grid, lin, _dealiased(grid, n))


def kdv_operator(grid, viscosity, convection=-6.0, dispersivity=1.0):
    """``u_t = convection/2 div(u u) - dispersivity sum_j d_j^3 u + viscosity lap u``, per component."""
    disp = 1j * dispersivity * (grid.kx_odd ** 3 + grid.ky_odd ** 3)
    lin = np.stack([-viscosity * grid.k2 + disp] * 2)
    dx = 1j * grid.kx_odd
    dy = 1j * grid.ky_odd

    def n(u_hat):
        u, v = grid.ifft(u_hat)
        uu, uv, vv = grid.fft(np.stack([u * u, u * v, v * v]))
        return 0.5 * convection * np.stack([dx * uu + dy * uv, dx * uv + dy * vv])

    return Operator(grid, lin, _dealiased(grid, n))


def kuramoto_sivashinsky_operator(grid):
    """``u_t + |grad u|^2 / 2 + lap u + lap^2 u = 0`` with the mean mode held fixed.

    The gradient term has a positive spatial mean that would make ``mean(u)``
    drift linearly forever; it carries no dynamics, so it is removed.
    """
    lin = (grid.k2 - grid.k2 ** 2)[None]
    dx = 1j * grid.kx_odd
    dy = 1j * grid.ky_odd

    def n(u_hat):
        ux = grid.ifft(dx * u_hat)
        uy = grid.ifft(dy * u_hat)
        out = grid.fft(-0.5 * (ux * ux + uy * uy))
        out[..., 0, 0] = 0.0
        return out

    return Operator(grid, lin, _dealiased(grid, n))


def kolmogorov_forcing(grid, wavenumber=KOLMOGOROV_WAVENUMBER, amplitude=KOLMOGOROV_AMPLITUDE):
    _, y = grid.coords()
    return amplitude * np.sin(wavenumber * 2 * np.pi * y / grid.extent[1])


def vorticity_operator(grid, viscosity, forcing=None):
    """2D Navier-Stokes in vorticity form; velocity from ``lap psi = -omega``."""
    lin = (-viscosity * grid.k2)[None]
    inv_k2 = np.where(grid.k2 > 0, 1.0 / np.where(grid.k2 > 0, grid.k2, 1.0), 0.0)
    dx = 1j * grid.kx_odd
    dy = 1j * grid.ky_odd
    force_hat = None if forcing is None else grid.fft(forcing)[None]

    def n(w_hat):
        psi_hat = w_hat * inv_k2
        u = grid.ifft(dy * psi_hat)
        v = grid.ifft(-dx * psi_hat)
        wx = grid.ifft(dx * w_hat)
        wy = grid.ifft(dy * w_hat)
        adv = grid.fft(-(u * wx + v * wy))
        return adv if force_hat is None else adv + force_hat

    return Operator(grid, lin, _dealiased(grid, n))


def vorticity_solver_step(omega, viscosity, dt, extent=(1.0, 1.0), forcing=None, order=2):
    """One ETDRK step of the vorticity equation on physical-space ``omega`` ([x, y] or [1, x, y])."""
    omega = np.asarray(omega, dtype=np.float64)
    squeeze = omega.ndim == 2
    w = omega[None] if squeeze else omega
    grid = SpectralGrid(w.shape[-2:], extent)
    op = vorticity_operator(grid, viscosity, forcing)
    out = grid.ifft(etdrk_step(grid.fft(w), op.linear, op.nonlinear, dt, order, "vorticity"))
    return out[0] if squeeze else out


def velocity_from_vorticity(omega, extent=(1.0, 1.0)):
    grid = SpectralGrid(omega.shape[-2:], extent)
    w_hat = grid.fft(omega)
    psi_hat = np.where(grid.k2 > 0, w_hat / np.where(grid.k2 > 0, grid.k2, 1.0), 0.0)
    return grid.ifft(1j * grid.ky_odd * psi_hat), grid.ifft(-1j * grid.kx_odd * psi_hat)


def enstrophy(omega):
    return 0.5 * float(np.mean(np.asarray(omega) ** 2))


# -- initial conditions ----------------------------------------------------------

def _normalize_max(u):
    m = np.max(np.abs(u))
    if m == 0:
        raise ValueError("initial condition is identically zero")
    return u / m


def _index_grid(res):
    nx, ny = res
    ix = np.fft.fftfreq(nx, 1.0 / nx)[:, None]
    iy = np.fft.fftfreq(ny, 1.0 / ny)[None, :]
    return ix, iy


def ic_truncated_fourier(res, cutoff, seed):
    """Random Fourier series with all modes ``max(|i|, |j|) >= cutoff`` exactly zero."""
    if not (2 <= cutoff < 11):
        raise ValueError(f"cutoff must be an integer in [2, 11), got {cutoff}")
    rng = _rng(seed)
    ix, iy = _index_grid(res)
    mask = (np.abs(ix) < cutoff) & (np.abs(iy) < cutoff) & ~((ix == 0) & (iy == 0))
    coeffs = (rng.standard_normal(mask.shape) + 1j * rng.standard_normal(mask.shape)) * mask
    return _normalize_max(np.fft.ifft2(coeffs).real)


def ic_grf(res, exponent, seed):
    """Gaussian random field with power spectrum ``|k|^-exponent``."""
    if not (2.3 <= exponent < 3.6):
        raise ValueError(f"power-law exponent must lie in [2.3, 3.6), got {exponent}")
    rng = _rng(seed)
    ix, iy = _index_grid(res)
    kmag = np.sqrt(ix ** 2 + iy ** 2)
    amp = np.where(kmag > 0, np.where(kmag > 0, kmag, 1.0) ** (-exponent / 2), 0.0)
    noise = rng.standard_normal(amp.shape) + 1j * rng.standard_normal(amp.shape)
    return _normalize_max(np.fft.ifft2(noise * amp).real)


def ic_diffused_noise(res, intensity, seed):
    """White noise diffused by ``exp(-intensity |k|^2)`` on a unit domain."""
    if not (0.00005 <= intensity < 0.01):
        raise ValueError(f"intensity must lie in [0.00005, 0.01), got {intensity}")
    rng = _rng(seed)
    ix, iy = _index_grid(res)
    k2 = (2 * np.pi) ** 2 * (ix ** 2 + iy ** 2)
    noise = np.fft.fft2(rng.standard_normal(res))
    return _normalize_max(np.fft.ifft2(noise * np.exp(-intensity * k2)).real)


def ic_gaussian_blobs(res, n_blobs=4, region_fraction=0.6, seed=0, return_centers=False):
    """Blobs of random centre (inside the central region) and width; returns ``(c_a, c_b)``.

    Centres are in unit-domain coordinates.
    """
    rng = _rng(seed)
    nx, ny = res
    x = (np.arange(nx) + 0.5) / nx
    y = (np.arange(ny) + 0.5) / ny
    X, Y = np.meshgrid(x, y, indexing="ij")
    c_b = np.zeros(res)
    lo = 0.5 - region_fraction / 2
    centers = []
    for _ in range(n_blobs):
        cx, cy = lo + region_fraction * rng.random(2)
        sigma = rng.uniform(0.02, 0.08)
        centers.append((cx, cy))
        c_b = c_b + np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * sigma ** 2))
    c_b = np.clip(c_b, 0.0, 1.0)
    c_a = 1.0 - c_b
    if return_centers:
        return c_a, c_b, centers
    return c_a, c_b


def random_scalar_ic(res, rng):
    """Pick one of the three generic initializers uniformly and draw its parameter."""
    kind = int(rng.integers(3))
    if kind == 0:
        return ic_truncated_fourier(res, int(rng.integers(2, 11)), rng), "truncated_fourier"
    if kind == 1:
        return ic_grf(res, float(rng.uniform(2.3, 3.6)), rng), "grf"
    return ic_diffused_noise(res, float(rng.uniform(0.00005, 0.01)), rng), "diffused_noise"


# -- solver specs --------------------------------------------------------------------

@dataclass
class SolverSpec:
    pde_kind: str
    resolution: tuple = (64, 64)
    domain_extent: tuple = (1.0, 1.0)
    dt_store: float = 0.01
    substeps: int = 1
    params: dict = field(default_factory=dict)
    warmup_steps: int = 0
    num_steps: int = 30
    seed: int = 0
    order: int = 2
    sim_resolution: tuple = None  # finer solver grid, block-averaged down to ``resolution``

    REQUIRED = {
        "diff": ("nu_x", "nu_y"),
        "fisher": ("diffusivity", "reactivity"),
        "sh": ("reactivity", "critical_number"),
        "burgers": ("viscosity",),
        "kdv": ("viscosity",),
        "ks": (),
        "decay-turb": ("viscosity",),
        "kolm-flow": ("viscosity",),
        **{k: ("feed", "kill") for k in GS_CONFIGS},
    }

    def validate(self):
        if self.pde_kind not in PDE_KINDS:
            raise ValueError(f"unknown pde kind {self.pde_kind!r}; expected one of {PDE_KINDS}")
        for n in self.resolution:
            if n < 4 or n & (n - 1):
                raise ValueError(f"resolution entries must be powers of two >= 4, got {self.resolution}")
        if self.sim_resolution is not None:
            for n, m in zip(self.sim_resolution, self.resolution):
                if n < m or n % m or n & (n - 1):
                    raise ValueError(f"sim_resolution {self.sim_resolution} must be a power-of-two "
                                     f"multiple of resolution {self.resolution}")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        missing = [k for k in self.REQUIRED[self.pde_kind] if k not in self.params]
        if missing:
            raise ValueError(f"{self.pde_kind}: missing parameters {missing}")
        return self

    @property
    def dt(self):
        return self.dt_store / self.substeps

    @property
    def solver_resolution(self):
        return tuple(self.sim_resolution) if self.sim_resolution is not None else tuple(self.resolution)

    def to_dict(self):
        return {"pde_kind": self.pde_kind, "resolution": list(self.resolution),
                "domain_extent": list(self.domain_extent), "dt_store": self.dt_store,
                "substeps": self.substeps, "params": dict(self.params), "warmup_steps": self.warmup_steps,
                "num_steps": self.num_steps, "seed": self.seed, "order": self.order,
                "sim_resolution": None if self.sim_resolution is None else list(self.sim_resolution)}


def scaled_substeps(kind, resolution, safety=4):
    """Substeps at ``resolution``; advective kinds keep the reference CFL number times ``1/safety``."""
    ref = PAPER_SUBSTEPS.get(kind, 1)
    if kind not in ADVECTIVE:
        return ref
    return max(1, math.ceil(ref * max(resolution) / 2048 * safety))


GS_MIN_SIM_RESOLUTION = 128


def sample_spec(kind, seed, resolution=64, num_steps=30, substeps=None):
    """Draw the varied physical parameters for one simulation of ``kind``.

    Gray-Scott patterns are narrower than a 64^2 cell on the 2.5-wide domain and
    die out there, so those kinds are solved on at least a 128^2 grid and
    block-averaged to ``resolution``.
    """
    if kind not in PDE_KINDS:
        raise ValueError(f"unknown pde kind {kind!r}; expected one of {PDE_KINDS}")
    res = (resolution, resolution) if isinstance(resolution, int) else tuple(resolution)
    rng = np.random.default_rng([seed, PDE_KINDS.index(kind)])
    extent = (1.0, 1.0)
    warmup = 0
    if kind == "diff":
        dt, params = 0.01, {"nu_x": rng.uniform(0.005, 0.05), "nu_y": rng.uniform(0.005, 0.05)}
    elif kind == "fisher":
        dt, params = 0.005, {"diffusivity": rng.uniform(0.00005, 0.01), "reactivity": rng.uniform(5, 15)}
    elif kind == "sh":
        dt, extent = 0.5, (20 * np.pi, 20 * np.pi)
        params = {"reactivity": rng.uniform(0.4, 1.0), "critical_number": rng.uniform(0.8, 1.2)}
    elif kind in GS_CONFIGS:
        feed, kill, dt, warmup = GS_CONFIGS[kind]
        extent = (2.5, 2.5)
        params = {"feed": feed, "kill": kill}
        if substeps is None:
            substeps = int(round(dt / GS_SIM_DT))
    elif kind == "burgers":
        dt, params = 0.01, {"viscosity": rng.uniform(0.00005, 0.0003)}
    elif kind == "kdv":
        L = rng.uniform(30, 120)
        dt, extent, params = 0.05, (L, L), {"viscosity": rng.uniform(0.00005, 0.001)}
    elif kind == "ks":
        L = rng.uniform(10, 130)
        dt, extent, params, warmup = 0.5, (L, L), {}, 200
    elif kind == "decay-turb":
        dt, params = 3.0, {"viscosity": rng.uniform(0.00005, 0.0001)}
    else:  # kolm-flow
        dt, params, warmup = 0.3, {"viscosity": rng.uniform(0.0001, 0.001)}, 50
    params = {k: float(v) for k, v in params.items()}
    sim_res = None
    if kind in GS_CONFIGS and min(res) < GS_MIN_SIM_RESOLUTION:
        sim_res = tuple(max(n, GS_MIN_SIM_RESOLUTION) for n in res)
    steps = scaled_substeps(kind, sim_res or res) if substeps is None else substeps
    return SolverSpec(kind, res, tuple(float(e) for e in extent), dt, steps, params, warmup,
                      num_steps, seed, DEFAULT_ORDER.get(kind, 2), sim_res).validate()


def build_operator(spec: SolverSpec):
    grid = SpectralGrid(spec.solver_resolution, spec.domain_extent)
    p = spec.params
    kind = spec.pde_kind
    if kind == "diff":
        return diffusion_operator(grid, p["nu_x"], p["nu_y"])
    if kind == "fisher":
        return fisher_operator(grid, p["diffusivity"], p["reactivity"])
    if kind == "sh":
        return swift_hohenberg_operator(grid, p["reactivity"], p["critical_number"])
    if kind in GS_CONFIGS:
        return gray_scott_operator(grid, p["feed"], p["kill"])
    if kind == "burgers":
        return burgers_operator(grid, p["viscosity"])
    if kind == "kdv":
        return kdv_operator(grid, p["viscosity"])
    if kind == "ks":
        return kuramoto_sivashinsky_operator(grid)
    if kind == "decay-turb":
        return vorticity_operator(grid, p["viscosity"])
    forcing = kolmogorov_forcing(grid, p.get("forcing_wavenumber", KOLMOGOROV_WAVENUMBER),
                                 p.get("forcing_amplitude", KOLMOGOROV_AMPLITUDE))
    return vorticity_operator(grid, p["viscosity"], forcing)


def initial_condition(spec: SolverSpec):
    """Seeded initial state ``[f, x, y]`` and the name of the initializer used."""
    rng = np.random.default_rng([spec.seed, PDE_KINDS.index(spec.pde_kind), 1])
    kind = spec.pde_kind
    res = spec.solver_resolution
    if kind in GS_CONFIGS:
        frac = 0.2 if kind == "gs-kappa" else 0.6
        c_a, c_b = ic_gaussian_blobs(res, 4, frac, rng)
        return np.stack([c_a, c_b]), "gaussian_blobs"
    ncomp = len(FIELDS[kind])
    comps, names = [], []
    for _ in range(ncomp):
        u, name = random_scalar_ic(res, rng)
        comps.append(u)
        names.append(name)
    u0 = np.stack(comps)
    if kind == "fisher":
        u0 = np.clip(u0, 0.0, 1.0)
    return u0, "+".join(names)


def simulate(spec: SolverSpec, initial=None) -> Trajectory:
    """Run ``spec`` and keep ``num_steps`` snapshots spaced ``dt_store`` after warmup."""
    spec.validate()
    op = build_operator(spec)
    grid = op.grid
    if initial is None:
        u0, ic_name = initial_condition(spec)
    else:
        u0, ic_name = np.asarray(initial, dtype=np.float64), "given"
    nf = len(FIELDS[spec.pde_kind])
    if u0.shape != (nf,) + spec.solver_resolution:
        raise ValueError(f"initial state shape {u0.shape} != {(nf,) + spec.solver_resolution}")
    fx = spec.solver_resolution[0] // spec.resolution[0]
    fy = spec.solver_resolution[1] // spec.resolution[1]

    def store(u):
        if fx == fy == 1:
            return u
        return u.reshape(nf, spec.resolution[0], fx, spec.resolution[1], fy).mean(axis=(2, 4))

    stepper = ETDRK(op.linear, spec.dt, spec.order)
    u_hat = grid.fft(u0)

    def advance(u_hat, n):
        for _ in range(n):
            u_hat = stepper.step(u_hat, op.nonlinear)
        return u_hat

    def check(u, k):
        if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > BLOWUP_LIMIT:
            raise SimulationBlowUp(
                f"{spec.pde_kind}: state blew up at stored step {k} (dt={spec.dt:g}, "
                f"max|u|={np.max(np.abs(u)):.3g})")

    for k in range(spec.warmup_steps):
        u_hat = advance(u_hat, spec.substeps)
        check(grid.ifft(u_hat), -spec.warmup_steps + k)
    frames = [store(grid.ifft(u_hat))]
    for k in range(1, spec.num_steps):
        u_hat = advance(u_hat, spec.substeps)
        u = grid.ifft(u_hat)
        check(u, k)
        frames.append(store(u))
    meta = {
        "pde": spec.pde_kind,
        "params": dict(spec.params),
        "domain_extent": list(spec.domain_extent),
        "periodic": [True, True],
        "seed": spec.seed,
        "initial_condition": ic_name,
        "dt_sim": spec.dt,
        "substeps": spec.substeps,
        "order": spec.order,
        "sim_resolution": list(spec.solver_resolution),
    }
    return Trajectory(np.stack(frames), list(FIELDS[spec.pde_kind]), spec.dt_store,
                      spec.warmup_steps * spec.dt_store, meta)


def generate_dataset(kind, num_trajectories, num_steps=30, resolution=64, seed=0, substeps=None, workers=1):
    """Independent simulations with seeds ``seed*100003 + i``."""
    specs = [sample_spec(kind, seed * 100003 + i, resolution, num_steps, substeps) for i in range(num_trajectories)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(simulate, specs))
    return [simulate(s) for s in specs]
