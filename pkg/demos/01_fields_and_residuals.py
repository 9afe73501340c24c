# # Field operators and the physics residual
#
# Periodic finite differences on a regular grid, checked against an analytic
# heat solution. The residual should drop about four-fold when the grid is
# refined, which is what second-order stencils promise.

import math

import numpy as np

from stpad.field import FieldSequence, GridSpec, PhysicalParams, laplacian, physics_residual

# A sine mode is an eigenfunction of the discrete Laplacian, so the stencil
# error is visible directly.

n = 64
g = GridSpec(nx=n, ny=n, dx=1 / n, dy=1 / n)
x, y = g.coords()
u = np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
exact = -8 * np.pi**2 * u
print("max Laplacian error at 64x64:", np.abs(laplacian(u, g.dx, g.dy) - exact).max())

# Now the heat equation u_t = alpha * lap(u) with its closed-form decay.


def heat(n, alpha=0.01, frames=16, dt=1e-5):
    g = GridSpec(nx=n, ny=n, dx=1 / n, dy=1 / n, dt=dt, nt=frames)
    x, y = g.coords()
    t = np.arange(frames)[:, None, None, None] * dt
    u = np.exp(-8 * np.pi**2 * alpha * t) * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
    return FieldSequence(u, g, ["scalar"]), PhysicalParams("diffusion2d", alpha)


rms = {n: math.sqrt(physics_residual(*heat(n))) for n in (32, 64, 128)}
for n, r in rms.items():
    print(f"{n:>4}x{n:<4} residual RMS {r:.3e}")
print("refinement ratio 64 -> 128:", rms[64] / rms[128])
