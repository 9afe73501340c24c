"""Grid and field data model plus periodic finite-difference operators.

The operators accept either NumPy arrays or torch tensors and act on the last
two axes, ``(..., h, w)``; ``x`` runs along the last axis (columns) and ``y``
along the second to last (rows). Boundaries are always periodic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

from stpad.errors import ConfigurationError, PreconditionError, ValidationError


class PDEKind(str, Enum):
    DIFFUSION2D = "diffusion2d"
    BURGERS2D = "burgers2d"
    SHALLOW_WATER = "shallow_water"
    NS_VORTICITY = "ns_vorticity"


CHANNELS = {
    PDEKind.DIFFUSION2D: ["scalar"],
    PDEKind.BURGERS2D: ["u", "v"],
    PDEKind.SHALLOW_WATER: ["h", "hu", "hv"],
    PDEKind.NS_VORTICITY: ["vorticity"],
}


@dataclass(frozen=True)
class GridSpec:
    nx: int = 64
    ny: int = 64
    dx: float = 1.0 / 64
    dy: float = 1.0 / 64
    dt: float = 0.01
    nt: int = 24
    boundary: str = "periodic"

    def __post_init__(self):
        for name in ("nx", "ny"):
            v = getattr(self, name)
            if int(v) != v or v < 4:
                raise ValidationError(f"{name} must be an integer >= 4, got {v}")
        if int(self.nt) != self.nt or self.nt < 2:
            raise ValidationError(f"nt must be an integer >= 2, got {self.nt}")
        for name in ("dx", "dy", "dt"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be finite and > 0, got {v}")
        if self.boundary != "periodic":
            raise ValidationError(f"unsupported boundary policy {self.boundary!r}")

    @property
    def lx(self):
        return self.nx * self.dx

    @property
    def ly(self):
        return self.ny * self.dy

    def coords(self):
        """Cell-corner coordinates as ``(X, Y)`` arrays of shape (ny, nx)."""
        x = np.arange(self.nx) * self.dx
        y = np.arange(self.ny) * self.dy
        return np.meshgrid(x, y, indexing="xy")

    def to_dict(self):
        return {
            "nx": self.nx, "ny": self.ny, "dx": self.dx, "dy": self.dy,
            "dt": self.dt, "nt": self.nt, "boundary": self.boundary,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PhysicalParams:
    pde_kind: PDEKind = PDEKind.DIFFUSION2D
    viscosity: float = 0.0
    forcing_amplitude: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pde_kind = PDEKind(self.pde_kind)
        if not math.isfinite(self.viscosity) or self.viscosity < 0:
            raise ValidationError(f"viscosity must be finite and >= 0, got {self.viscosity}")
        if not math.isfinite(self.forcing_amplitude) or self.forcing_amplitude < 0:
            raise ValidationError(
                f"forcing_amplitude must be finite and >= 0, got {self.forcing_amplitude}")
        for k, v in self.extra.items():
            if not math.isfinite(v):
                raise ValidationError(f"extra parameter {k!r} is not finite")

    def get(self, name):
        if name in ("viscosity", "forcing_amplitude"):
            return getattr(self, name)
        return self.extra[name]

    def replace(self, **changes):
        d = self.to_dict()
        for k, v in changes.items():
            if k in ("pde_kind", "viscosity", "forcing_amplitude"):
                d[k] = v
            else:
                d["extra"][k] = v
        return PhysicalParams.from_dict(d)

    def vector(self, names):
        return np.array([self.get(n) for n in names], dtype=np.float64)

    def to_dict(self):
        return {
            "pde_kind": self.pde_kind.value,
            "viscosity": float(self.viscosity),
            "forcing_amplitude": float(self.forcing_amplitude),
            "extra": {k: float(v) for k, v in sorted(self.extra.items())},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            pde_kind=d["pde_kind"],
            viscosity=float(d["viscosity"]),
            forcing_amplitude=float(d.get("forcing_amplitude", 0.0)),
            extra=dict(d.get("extra", {})),
        )


@dataclass
class FieldSequence:
    """A (t, c, h, w) block of field values on ``grid``."""

    values: np.ndarray
    grid: GridSpec
    channel_names: list

    def __post_init__(self):
        v = self.values
        if v.ndim != 4:
            raise ValidationError(f"values must be (t, c, h, w), got shape {v.shape}")
        t, c, h, w = v.shape
        if (h, w) != (self.grid.ny, self.grid.nx):
            raise ValidationError(
                f"spatial shape {(h, w)} does not match grid {(self.grid.ny, self.grid.nx)}")
        if t > self.grid.nt:
            raise ValidationError(f"{t} frames exceeds grid.nt={self.grid.nt}")
        if len(self.channel_names) != c:
            raise ValidationError(
                f"{len(self.channel_names)} channel names for {c} channels")
        check_finite(v)

    def __len__(self):
        return self.values.shape[0]


def _is_torch(f):
    return isinstance(f, torch.Tensor)


def check_finite(f, name="field"):
    """Raise ``ValidationError`` naming the first non-finite index of ``f``."""
    if _is_torch(f):
        bad = ~torch.isfinite(f.detach())
        if bool(bad.any()):
            idx = tuple(int(i) for i in torch.nonzero(bad)[0])
            raise ValidationError(f"{name} has a non-finite value at index {idx}")
    else:
        bad = ~np.isfinite(f)
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValidationError(f"{name} has a non-finite value at index {idx}")


def _roll(f, shift, axis):
    if _is_torch(f):
        return torch.roll(f, shifts=shift, dims=axis)
    return np.roll(f, shift, axis=axis)


def _check_spacing(*spacings):
    for s in spacings:
        if not (s > 0 and math.isfinite(s)):
            raise ValidationError(f"grid spacing must be finite and > 0, got {s}")


def ddx(f, dx, check=True):
    """Central difference along x (last axis) with periodic wraparound."""
    _check_spacing(dx)
    if check:
        check_finite(f)
    return (_roll(f, -1, -1) - _roll(f, 1, -1)) / (2.0 * dx)


def ddy(f, dy, check=True):
    """Central difference along y (second to last axis), periodic."""
    _check_spacing(dy)
    if check:
        check_finite(f)
    return (_roll(f, -1, -2) - _roll(f, 1, -2)) / (2.0 * dy)


def laplacian(f, dx, dy, check=True):
    """Five-point Laplacian with periodic wraparound."""
    _check_spacing(dx, dy)
    if check:
        check_finite(f)
    fxx = (_roll(f, -1, -1) - 2.0 * f + _roll(f, 1, -1)) / (dx * dx)
    fyy = (_roll(f, -1, -2) - 2.0 * f + _roll(f, 1, -2)) / (dy * dy)
    return fxx + fyy


def divergence(fx, fy, dx, dy, check=True):
    return ddx(fx, dx, check) + ddy(fy, dy, check)


def advect(uv, dx, dy, check=True):
    """Convective term ``(u.grad) u`` for a velocity frame ``(..., 2, h, w)``."""
    if uv.shape[-3] != 2:
        raise ConfigurationError(
            f"advect needs exactly 2 velocity channels, got {uv.shape[-3]}")
    u = uv[..., 0, :, :]
    v = uv[..., 1, :, :]
    out_u = u * ddx(u, dx, check) + v * ddy(u, dy, check)
    out_v = u * ddx(v, dx, check) + v * ddy(v, dy, check)
    stack = torch.stack if _is_torch(uv) else np.stack
    return stack([out_u, out_v], -3)


def wavenumbers(ny, nx, dy, dx, rfft=True):
    """Angular wavenumber grids ``(KY, KX)`` matching ``rfft2`` output layout."""
    ky = 2.0 * np.pi * np.fft.fftfreq(ny, d=dy)
    kx = 2.0 * np.pi * (np.fft.rfftfreq(nx, d=dx) if rfft else np.fft.fftfreq(nx, d=dx))
    return np.meshgrid(ky, kx, indexing="ij")


def vorticity_to_velocity(omega, dx, dy):
    """Velocity ``(u, v)`` from vorticity via the streamfunction, ``lap(psi) = -omega``.

    ``u = dpsi/dy``, ``v = -dpsi/dx``. Returns an array of shape (..., 2, h, w).
    """
    ny, nx = omega.shape[-2:]
    ky, kx = wavenumbers(ny, nx, dy, dx)
    k2 = kx**2 + ky**2
    k2[0, 0] = 1.0
    if _is_torch(omega):
        fft = torch.fft
        ky_t = torch.as_tensor(ky, dtype=omega.dtype)
        kx_t = torch.as_tensor(kx, dtype=omega.dtype)
        k2_t = torch.as_tensor(k2, dtype=omega.dtype)
        psi_h = fft.rfft2(omega) / k2_t
        u = fft.irfft2(1j * ky_t * psi_h, s=(ny, nx))
        v = fft.irfft2(-1j * kx_t * psi_h, s=(ny, nx))
        return torch.stack([u, v], -3)
    psi_h = np.fft.rfft2(omega) / k2
    u = np.fft.irfft2(1j * ky * psi_h, s=(ny, nx))
    v = np.fft.irfft2(-1j * kx * psi_h, s=(ny, nx))
    return np.stack([u, v], -3)


def ns_forcing(grid, amplitude):
    """Fixed zero-mean sinusoidal forcing used by the vorticity solver."""
    x, y = grid.coords()
    phase = 2.0 * np.pi * (x / grid.lx + y / grid.ly)
    return amplitude * (np.sin(phase) + np.cos(phase))


def time_derivative(values, dt):
    """d/dt along axis -4: central in the interior, one-sided at both ends."""
    t = values.shape[-4]
    if t < 2:
        raise PreconditionError("time derivative needs at least 2 frames")
    first = (values[..., 1:2, :, :, :] - values[..., 0:1, :, :, :]) / dt
    last = (values[..., -1:, :, :, :] - values[..., -2:-1, :, :, :]) / dt
    if t == 2:
        parts = [first, last]
    else:
        mid = (values[..., 2:, :, :, :] - values[..., :-2, :, :, :]) / (2.0 * dt)
        parts = [first, mid, last]
    if _is_torch(values):
        return torch.cat(parts, dim=-4)
    return np.concatenate(parts, axis=-4)


def _expand_param(p, values):
    """Broadcast a scalar or per-sample parameter against (..., t, c, h, w)."""
    if _is_torch(values):
        p = torch.as_tensor(p, dtype=values.dtype)
    else:
        p = np.asarray(p, dtype=values.dtype)
    while p.ndim < values.ndim:
        p = p[..., None]
    return p


def residual_field(values, pde_kind, viscosity, dt, dx, dy, forcing_amplitude=0.0,
                   grid=None, time_scheme="central"):
    """Pointwise physics defect for a ``(..., t, c, h, w)`` block.

    ``viscosity`` may be a scalar or have the leading batch shape. With
    ``time_scheme="central"`` the time derivative is :func:`time_derivative`
    and spatial terms use each frame. With ``"midpoint"`` the defect lives on
    the ``t - 1`` intervals: forward differences in time and spatial terms on
    the average of neighbouring frames (second order at the half step, and far
    less biased when frames are coarse relative to the decay rates). The
    active terms depend on ``pde_kind``:

    * diffusion2d: ``u_t - a lap(u)`` (no convection for a scalar field)
    * burgers2d: ``u_t + (u.grad)u - a lap(u)``
    * shallow_water: mass conservation ``h_t + div(hu, hv)``
    * ns_vorticity: ``w_t + (u.grad)w - a lap(w) - f``
    """
    kind = PDEKind(pde_kind)
    if values.shape[-4] < 2:
        raise PreconditionError("physics residual needs a sequence with >= 2 frames")
    if time_scheme == "central":
        ut = time_derivative(values, dt)
    elif time_scheme == "midpoint":
        ut = (values[..., 1:, :, :, :] - values[..., :-1, :, :, :]) / dt
        values = 0.5 * (values[..., 1:, :, :, :] + values[..., :-1, :, :, :])
    else:
        raise PreconditionError(f"unknown time_scheme {time_scheme!r}")
    nu = _expand_param(viscosity, values)
    if kind is PDEKind.DIFFUSION2D:
        return ut - nu * laplacian(values, dx, dy, check=False)
    if kind is PDEKind.BURGERS2D:
        return ut + advect(values, dx, dy, check=False) - nu * laplacian(values, dx, dy, check=False)
    if kind is PDEKind.SHALLOW_WATER:
        flux = divergence(values[..., 1, :, :], values[..., 2, :, :], dx, dy, check=False)
        return ut[..., 0:1, :, :] + flux[..., None, :, :]
    # ns_vorticity
    omega = values[..., 0, :, :]
    uv = vorticity_to_velocity(omega, dx, dy)
    conv = uv[..., 0, :, :] * ddx(omega, dx, False) + uv[..., 1, :, :] * ddy(omega, dy, False)
    res = ut - nu * laplacian(values, dx, dy, check=False) + conv[..., None, :, :]
    amp = _expand_param(forcing_amplitude, values)
    if np.any(np.asarray(forcing_amplitude) != 0):
        if grid is None:
            ny, nx = values.shape[-2:]
            grid = GridSpec(nx=nx, ny=ny, dx=dx, dy=dy, dt=dt, nt=max(2, values.shape[-4]))
        f = ns_forcing(grid, 1.0)
        f = torch.as_tensor(f, dtype=values.dtype) if _is_torch(values) else f
        res = res - amp * f
    return res


def physics_residual(seq, params, grid=None, time_scheme="central"):
    """Mean squared physics defect of a field sequence.

    ``seq`` is a :class:`FieldSequence`, or a raw ``(..., t, c, h, w)`` array
    together with ``grid``. ``params`` is a :class:`PhysicalParams`, or for
    batched input a mapping with ``pde_kind``, ``viscosity`` (per sample) and
    optionally ``forcing_amplitude``.
    """
    if isinstance(seq, FieldSequence):
        values, grid = seq.values, seq.grid
    else:
        values = seq
        if grid is None:
            raise PreconditionError("raw arrays need an explicit grid")
    if values.shape[-4] < 2:
        raise PreconditionError("physics residual needs a sequence with >= 2 frames")
    if isinstance(params, PhysicalParams):
        kind, nu, amp = params.pde_kind, params.viscosity, params.forcing_amplitude
    else:
        kind, nu = params["pde_kind"], params["viscosity"]
        amp = params.get("forcing_amplitude", 0.0)
    r = residual_field(values, kind, nu, grid.dt, grid.dx, grid.dy, amp, grid=grid,
                       time_scheme=time_scheme)
    return (r**2).mean()
