"""Deterministic synthetic PDE solvers on periodic grids.

Each ``simulate_*`` function is a pure function of its :class:`SimulatorConfig`
(seed included) and returns a float64 :class:`FieldSequence` whose first frame
is the initial condition.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from stpad.errors import ConfigurationError, SimulationError
from stpad.field import (
    CHANNELS,
    FieldSequence,
    GridSpec,
    PDEKind,
    PhysicalParams,
    advect,
    laplacian,
    ns_forcing,
    vorticity_to_velocity,
    wavenumbers,
)

INIT_KINDS = ("gaussian_blobs", "random_fourier", "dam_break")
DEFAULT_GRAVITY = 9.81


@dataclass
class SimulatorConfig:
    grid: GridSpec
    params: PhysicalParams
    n_substeps: int = 10
    seed: int = 0
    init_kind: str = "random_fourier"

    def __post_init__(self):
        if int(self.n_substeps) != self.n_substeps or self.n_substeps < 1:
            raise ConfigurationError(f"n_substeps must be an integer >= 1, got {self.n_substeps}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        if self.init_kind not in INIT_KINDS:
            raise ConfigurationError(f"unknown init_kind {self.init_kind!r}")

    @property
    def dt_sub(self):
        return self.grid.dt / self.n_substeps

    def with_params(self, params, seed=None):
        return replace(self, params=params, seed=self.seed if seed is None else seed)

    def to_dict(self):
        return {
            "grid": self.grid.to_dict(),
            "params": self.params.to_dict(),
            "n_substeps": self.n_substeps,
            "seed": int(self.seed),
            "init_kind": self.init_kind,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            grid=GridSpec.from_dict(d["grid"]),
            params=PhysicalParams.from_dict(d["params"]),
            n_substeps=d.get("n_substeps", 10),
            seed=d.get("seed", 0),
            init_kind=d.get("init_kind", "random_fourier"),
        )


# -- initial conditions -------------------------------------------------------

def gaussian_blob(grid, center, width, amplitude=1.0):
    """Periodic Gaussian bump centred at ``center`` (x, y) in domain units."""
    x, y = grid.coords()
    ddx = (x - center[0] + grid.lx / 2) % grid.lx - grid.lx / 2
    ddy = (y - center[1] + grid.ly / 2) % grid.ly - grid.ly / 2
    return amplitude * np.exp(-(ddx**2 + ddy**2) / (2.0 * width**2))


def gaussian_blobs(grid, rng, n=None):
    n = int(rng.integers(1, 4)) if n is None else n
    out = np.zeros((grid.ny, grid.nx))
    for _ in range(n):
        center = rng.uniform(0, 1, size=2) * (grid.lx, grid.ly)
        width = rng.uniform(0.05, 0.12) * min(grid.lx, grid.ly)
        out += gaussian_blob(grid, center, width, rng.uniform(0.5, 1.5) * rng.choice([-1, 1]))
    return out


def random_fourier(grid, rng, k_max=4):
    """Smooth random field from low wavenumbers, zero mean and unit std."""
    ny, nx = grid.ny, grid.nx
    coeffs = np.zeros((ny, nx // 2 + 1), dtype=complex)
    ky = np.fft.fftfreq(ny, d=1.0 / ny)
    kx = np.fft.rfftfreq(nx, d=1.0 / nx)
    KY, KX = np.meshgrid(ky, kx, indexing="ij")
    kk = np.sqrt(KX**2 + KY**2)
    mask = (kk > 0) & (kk <= k_max)
    n = int(mask.sum())
    coeffs[mask] = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / kk[mask]
    f = np.fft.irfft2(coeffs, s=(ny, nx))
    return f / f.std()


def dam_break(grid, rng, base=1.0, jump=0.5):
    x, y = grid.coords()
    cx, cy = rng.uniform(0.3, 0.7, size=2) * (grid.lx, grid.ly)
    r = rng.uniform(0.1, 0.2) * min(grid.lx, grid.ly)
    inside = (x - cx) ** 2 + (y - cy) ** 2 <= r**2
    return base + jump * inside


def _rng(cfg):
    return np.random.default_rng(int(cfg.seed))


def _scalar_init(cfg, rng):
    if cfg.init_kind == "gaussian_blobs":
        return gaussian_blobs(cfg.grid, rng)
    if cfg.init_kind == "random_fourier":
        return random_fourier(cfg.grid, rng)
    raise ConfigurationError(f"init_kind {cfg.init_kind!r} not supported for {cfg.params.pde_kind.value}")


def _check_kind(cfg, kind):
    if cfg.params.pde_kind is not kind:
        raise ConfigurationError(
            f"config is for {cfg.params.pde_kind.value}, expected {kind.value}")


def _frames(state0, cfg, step, name):
    """Advance ``state0`` with ``step`` and collect ``grid.nt`` frames."""
    frames = [state0.copy()]
    state = state0
    for k in range(1, cfg.grid.nt):
        for _ in range(cfg.n_substeps):
            state = step(state)
        if not np.all(np.isfinite(state)):
            raise SimulationError(f"{name}: non-finite state at frame {k}")
        frames.append(state.copy())
    return np.stack(frames)


def _sequence(values, cfg):
    kind = cfg.params.pde_kind
    if values.ndim == 3:
        values = values[:, None]
    return FieldSequence(values=values, grid=cfg.grid, channel_names=list(CHANNELS[kind]))


# -- solvers -------------------------------------------------------------------

def simulate_diffusion2d(cfg, initial=None):
    """Heat equation by forward-time centred-space stepping."""
    _check_kind(cfg, PDEKind.DIFFUSION2D)
    g, a, dt = cfg.grid, cfg.params.viscosity, cfg.dt_sub
    number = a * dt * (1.0 / g.dx**2 + 1.0 / g.dy**2)
    if number > 0.5:
        raise ConfigurationError(
            f"FTCS stability bound violated: alpha*dt_sub*(1/dx^2+1/dy^2) = {number:.4g} > 0.5 "
            f"(alpha*dt_sub/dx^2 must be <= 0.25 on square cells)")
    u0 = _scalar_init(cfg, _rng(cfg)) if initial is None else np.asarray(initial, float)

    def step(u):
        return u + dt * a * laplacian(u, g.dx, g.dy, check=False)

    return _sequence(_frames(u0, cfg, step, "diffusion2d"), cfg)


def simulate_burgers2d(cfg, initial=None):
    """Viscous 2-D Burgers, central differences and Heun (RK2) stepping."""
    _check_kind(cfg, PDEKind.BURGERS2D)
    g, a, dt = cfg.grid, cfg.params.viscosity, cfg.dt_sub
    if initial is None:
        rng = _rng(cfg)
        uv0 = np.stack([_scalar_init(cfg, rng), _scalar_init(cfg, rng)]) * 0.5
    else:
        uv0 = np.asarray(initial, float)
    diff = a * dt * (1.0 / g.dx**2 + 1.0 / g.dy**2)
    cfl = dt * (np.abs(uv0[0]).max() / g.dx + np.abs(uv0[1]).max() / g.dy)
    if diff > 0.5:
        raise ConfigurationError(f"diffusive stability bound violated: {diff:.4g} > 0.5")
    if cfl > 0.5:
        raise ConfigurationError(f"advective CFL bound violated: {cfl:.4g} > 0.5")

    def rhs(uv):
        return -advect(uv, g.dx, g.dy, check=False) + a * laplacian(uv, g.dx, g.dy, check=False)

    def step(uv):
        k1 = rhs(uv)
        k2 = rhs(uv + dt * k1)
        return uv + 0.5 * dt * (k1 + k2)

    return _sequence(_frames(uv0, cfg, step, "burgers2d"), cfg)


def _sw_fluxes(U, g):
    h, hu, hv = U
    u, v = hu / h, hv / h
    p = 0.5 * g * h * h
    F = np.stack([hu, hu * u + p, hu * v])
    G = np.stack([hv, hv * u, hv * v + p])
    return F, G, np.abs(u) + np.sqrt(g * h), np.abs(v) + np.sqrt(g * h)


def simulate_shallow_water(cfg, initial=None):
    """Shallow water in conservative form with a local Lax-Friedrichs flux."""
    _check_kind(cfg, PDEKind.SHALLOW_WATER)
    grav = float(cfg.params.extra.get("gravity", DEFAULT_GRAVITY))
    g, dt = cfg.grid, cfg.dt_sub
    if initial is None:
        rng = _rng(cfg)
        if cfg.init_kind == "dam_break":
            h0 = dam_break(g, rng)
        elif cfg.init_kind == "gaussian_blobs":
            h0 = 1.0 + 0.3 * np.abs(gaussian_blobs(g, rng))
        else:
            raise ConfigurationError("shallow_water supports dam_break or gaussian_blobs init")
        U0 = np.stack([h0, np.zeros_like(h0), np.zeros_like(h0)])
    else:
        U0 = np.asarray(initial, float)
    if np.any(U0[0] <= 0):
        raise ConfigurationError("initial water height must be positive")
    _, _, sx, sy = _sw_fluxes(U0, grav)
    cfl = dt * (sx.max() / g.dx + sy.max() / g.dy)
    if cfl > 0.5:
        raise ConfigurationError(f"shallow-water CFL bound violated: {cfl:.4g} > 0.5")

    def step(U):
        F, G, sx, sy = _sw_fluxes(U, grav)
        # interface i+1/2 between cell i and i+1 along x (last axis)
        Ur, Fr, sxr = np.roll(U, -1, -1), np.roll(F, -1, -1), np.roll(sx, -1, -1)
        ax = np.maximum(sx, sxr)
        fx = 0.5 * (F + Fr) - 0.5 * ax * (Ur - U)
        Uu, Gu, syu = np.roll(U, -1, -2), np.roll(G, -1, -2), np.roll(sy, -1, -2)
        ay = np.maximum(sy, syu)
        fy = 0.5 * (G + Gu) - 0.5 * ay * (Uu - U)
        return (U - dt / g.dx * (fx - np.roll(fx, 1, -1))
                - dt / g.dy * (fy - np.roll(fy, 1, -2)))

    frames = [U0.copy()]
    U = U0
    for k in range(1, g.nt):
        for _ in range(cfg.n_substeps):
            U = step(U)
            if not np.all(np.isfinite(U)) or np.any(U[0] <= 0):
                raise SimulationError(f"shallow_water: non-positive water height at frame {k}")
        frames.append(U.copy())
    return _sequence(np.stack(frames), cfg)


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


def simulate_ns_vorticity(cfg, initial=None):
    """2-D incompressible Navier-Stokes in vorticity form, pseudo-spectral.

    2/3-rule dealiasing, exact integrating factor for viscosity and Heun
    (RK2) for the advection and forcing terms.
    """
    _check_kind(cfg, PDEKind.NS_VORTICITY)
    g, nu, dt = cfg.grid, cfg.params.viscosity, cfg.dt_sub
    if not (_is_pow2(g.nx) and _is_pow2(g.ny)):
        raise ConfigurationError(f"grid {g.ny}x{g.nx} must be powers of two for the spectral solver")
    if nu <= 0:
        raise ConfigurationError("ns_vorticity requires viscosity > 0")
    if initial is None:
        w0 = _scalar_init(cfg, _rng(cfg))
    else:
        w0 = np.asarray(initial, float)
    w0 = w0 - w0.mean()

    ky, kx = wavenumbers(g.ny, g.nx, g.dy, g.dx)
    k2 = kx**2 + ky**2
    iy = np.abs(np.fft.fftfreq(g.ny, d=1.0 / g.ny))[:, None]
    ix = np.fft.rfftfreq(g.nx, d=1.0 / g.nx)[None, :]
    dealias = (iy <= g.ny / 3) & (ix <= g.nx / 3)
    decay = np.exp(-nu * k2 * dt)
    f_hat = np.fft.rfft2(ns_forcing(g, cfg.params.forcing_amplitude))

    uv0 = vorticity_to_velocity(w0, g.dx, g.dy)
    cfl = dt * (np.abs(uv0[0]).max() / g.dx + np.abs(uv0[1]).max() / g.dy)
    if cfl > 0.5:
        raise ConfigurationError(f"advective CFL bound violated: {cfl:.4g} > 0.5")

    def nonlinear(w_hat):
        w_hat = w_hat * dealias
        w = np.fft.irfft2(w_hat, s=(g.ny, g.nx))
        uv = vorticity_to_velocity(w, g.dx, g.dy)
        wx = np.fft.irfft2(1j * kx * w_hat, s=(g.ny, g.nx))
        wy = np.fft.irfft2(1j * ky * w_hat, s=(g.ny, g.nx))
        n_hat = -np.fft.rfft2(uv[0] * wx + uv[1] * wy) * dealias + f_hat
        n_hat[0, 0] = 0.0
        return n_hat

    def step(w_hat):
        n1 = nonlinear(w_hat)
        w1 = decay * (w_hat + dt * n1)
        return decay * w_hat + 0.5 * dt * (decay * n1 + nonlinear(w1))

    w_hat = np.fft.rfft2(w0)
    frames = [np.fft.irfft2(w_hat, s=(g.ny, g.nx))]
    for k in range(1, g.nt):
        for _ in range(cfg.n_substeps):
            w_hat = step(w_hat)
        w = np.fft.irfft2(w_hat, s=(g.ny, g.nx))
        if not np.all(np.isfinite(w)):
            raise SimulationError(f"ns_vorticity: non-finite state at frame {k}")
        frames.append(w)
    return _sequence(np.stack(frames), cfg)


SIMULATORS = {
    PDEKind.DIFFUSION2D: simulate_diffusion2d,
    PDEKind.BURGERS2D: simulate_burgers2d,
    PDEKind.SHALLOW_WATER: simulate_shallow_water,
    PDEKind.NS_VORTICITY: simulate_ns_vorticity,
}


def simulate(cfg):
    return SIMULATORS[cfg.params.pde_kind](cfg)
