"""Noise schedule, forward marginal, time embedding and the reverse step."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from stpad.errors import ConfigurationError, PreconditionError

REVERSE_NOISE = ("posterior", "sqrt_alpha")


@dataclass
class NoiseSchedule:
    """Per-step betas for steps ``t = 1..T`` (stored 0-based).

    ``alphas_cum[t-1]`` is the running product of ``1 - beta_s`` for
    ``s <= t``, so the first step has ``alpha_bar = 1 - beta_1``.

    ``reverse_noise`` picks the std of the noise added by each reverse step:
    ``"sqrt_alpha"`` uses ``sqrt(1 - beta_t)``, ``"posterior"`` the DDPM posterior
    std ``sqrt(beta_t (1 - abar_{t-1}) / (1 - abar_t))``.
    """

    betas: np.ndarray
    reverse_noise: str = "posterior"

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or len(self.betas) < 1:
            raise ConfigurationError("betas must be a non-empty 1-D sequence")
        if not np.all((self.betas > 0) & (self.betas < 1)):
            raise ConfigurationError("every beta must lie strictly inside (0, 1)")
        if self.reverse_noise not in REVERSE_NOISE:
            raise ConfigurationError(f"reverse_noise must be one of {REVERSE_NOISE}")

    @classmethod
    def linear(cls, n_steps, beta_start, beta_end, reverse_noise="posterior"):
        return cls(np.linspace(beta_start, beta_end, n_steps), reverse_noise)

    @classmethod
    def scaled_linear(cls, n_steps=50, beta_start=1e-4, beta_end=0.02, reverse_noise="posterior"):
        """Linear betas with endpoints rescaled by ``1000 / n_steps``.

        Keeps the total injected noise of a 1000-step ``beta_start..beta_end``
        chain so short chains still end close to a standard normal.
        """
        s = 1000.0 / n_steps
        return cls.linear(n_steps, beta_start * s, min(beta_end * s, 0.999), reverse_noise)

    @property
    def n_steps(self):
        return len(self.betas)

    @property
    def alphas_cum(self):
        return np.cumprod(1.0 - self.betas)

    def _check(self, t):
        if not 1 <= t <= self.n_steps:
            raise PreconditionError(f"step {t} outside 1..{self.n_steps}")

    def beta(self, t):
        self._check(t)
        return float(self.betas[t - 1])

    def alpha_bar(self, t):
        self._check(t)
        return float(self.alphas_cum[t - 1])

    def sigma(self, t):
        """Std of the noise added by the reverse step out of step ``t``."""
        self._check(t)
        beta = self.betas[t - 1]
        if self.reverse_noise == "sqrt_alpha":
            return float(math.sqrt(1.0 - beta))
        abar = self.alphas_cum[t - 1]
        abar_prev = self.alphas_cum[t - 2] if t > 1 else 1.0
        return float(math.sqrt(beta * (1.0 - abar_prev) / (1.0 - abar)))

    def to_dict(self):
        return {"betas": [float(b) for b in self.betas], "reverse_noise": self.reverse_noise}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["betas"]), d.get("reverse_noise", "posterior"))


def _abar(schedule, t, like):
    """alpha_bar for a scalar step or a per-sample step tensor, broadcast to ``like``."""
    if isinstance(t, torch.Tensor):
        if torch.any(t < 1) or torch.any(t > schedule.n_steps):
            raise PreconditionError(f"steps must lie in 1..{schedule.n_steps}")
        ac = torch.as_tensor(schedule.alphas_cum, dtype=like.dtype)[t - 1]
        return ac.reshape(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(schedule.alpha_bar(int(t)), dtype=like.dtype)


def q_sample(z0, t, noise, schedule):
    """Closed-form forward marginal ``sqrt(abar_t) z0 + sqrt(1 - abar_t) noise``."""
    if noise.shape != z0.shape:
        raise PreconditionError(f"noise shape {tuple(noise.shape)} != z0 shape {tuple(z0.shape)}")
    ab = _abar(schedule, t, z0)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * noise


def sinusoid(tau, d):
    """Unchecked sinusoidal features; ``tau`` may be a scalar or a 1-D tensor."""
    tau = torch.as_tensor(tau, dtype=torch.float64)
    i = torch.arange(0, d, 2, dtype=torch.float64)
    freq = 10000.0 ** (-i / d)
    arg = tau[..., None] * freq
    out = torch.zeros(*tau.shape, d, dtype=torch.float64)
    out[..., 0::2] = torch.sin(arg)
    out[..., 1::2] = torch.cos(arg)[..., : d // 2]
    return out


def time_embed(tau, d_time, n_steps=None):
    """Sinusoidal embedding: component ``2i`` is ``sin(tau / 10000**(2i/d))``, ``2i+1`` the cosine."""
    t = torch.as_tensor(tau)
    lo = int(t.min()) if t.ndim else int(t)
    hi = int(t.max()) if t.ndim else int(t)
    if lo < 1 or (n_steps is not None and hi > n_steps):
        raise PreconditionError(f"time step {tau} outside 1..{n_steps}")
    return sinusoid(t, d_time)


def denoise_step(z, t, env, temb, mean_fn, schedule, noise=None):
    """One reverse step out of step ``t``: ``mean_fn(z, env, temb) + sigma_t * noise``.

    The noise term is omitted at ``t == 1`` so the final step is deterministic.
    """
    schedule._check(t)
    mean = mean_fn(z, env, temb)
    if t == 1:
        return mean
    if noise is None:
        noise = torch.randn_like(z)
    return mean + schedule.sigma(t) * noise
