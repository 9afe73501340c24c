"""Parameter-conditioned latent diffusion forecaster.

The forecaster reuses the Stage-1 encoder and decoder. Diffusion runs on the
(standardized) encoder latents of the target window; the denoiser predicts the
injected noise and is conditioned on

* an environment embedding of the observation window plus the explicit PDE
  parameter vector,
* a sinusoidal embedding of the diffusion step,
* the encoder latents of the observation window as spatial context.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from stpad.errors import ConfigurationError, SamplingError
from stpad.field import GridSpec, PDEKind, PhysicalParams, ddx, ddy
from stpad.recon.model import window_stats
from stpad.diffusion.schedule import NoiseSchedule, denoise_step, q_sample, sinusoid


PARAM_TRANSFORMS = ("log", "identity")
LOG_FLOOR = 1e-6


@dataclass
class Stage2Config:
    input_len: int = 4
    output_len: int = 4
    channels: int = 1
    height: int = 32
    width: int = 32
    latent_channels: int = 8
    latent_height: int = 8
    latent_width: int = 8
    grid: GridSpec = field(default_factory=lambda: GridSpec(nx=32, ny=32, dx=1 / 32, dy=1 / 32))
    pde_kind: PDEKind = PDEKind.DIFFUSION2D
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule.scaled_linear)
    d_env: int = 32
    env_width: int = 32
    d_time: int = 32
    hidden: int = 64
    n_res_blocks: int = 2
    param_names: list = field(default_factory=lambda: ["viscosity"])
    use_params: bool = True
    param_transform: str = "log"
    residual: bool = True
    phys_reg_weight: float = 0.1
    recon_weight: float = 1.0

    def __post_init__(self):
        self.pde_kind = PDEKind(self.pde_kind)
        if self.phys_reg_weight < 0 or self.recon_weight < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if self.param_transform not in PARAM_TRANSFORMS:
            raise ConfigurationError(f"param_transform must be one of {PARAM_TRANSFORMS}")
        if self.hidden % 8 or self.env_width % 8:
            raise ConfigurationError("hidden and env widths must be multiples of 8")

    @property
    def n_params(self):
        return len(self.param_names) if self.use_params else 0

    def to_dict(self):
        return {
            "input_len": self.input_len, "output_len": self.output_len,
            "channels": self.channels, "height": self.height, "width": self.width,
            "latent_channels": self.latent_channels, "latent_height": self.latent_height,
            "latent_width": self.latent_width, "grid": self.grid.to_dict(),
            "pde_kind": self.pde_kind.value, "schedule": self.schedule.to_dict(),
            "d_env": self.d_env, "env_width": self.env_width, "d_time": self.d_time,
            "hidden": self.hidden,
            "n_res_blocks": self.n_res_blocks, "param_names": list(self.param_names),
            "use_params": self.use_params, "param_transform": self.param_transform,
            "residual": self.residual,
            "phys_reg_weight": self.phys_reg_weight,
            "recon_weight": self.recon_weight,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["grid"] = GridSpec.from_dict(d["grid"])
        d["schedule"] = NoiseSchedule.from_dict(d["schedule"])
        return cls(**d)


class EnvEncoder(nn.Module):
    """Conv summary of the observation window, parameters appended before the projection."""

    def __init__(self, in_channels, n_params, d_env, width=32):
        super().__init__()
        self.n_params = n_params
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            nn.GroupNorm(8, width), nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.GroupNorm(8, width), nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.proj = nn.Linear(width + n_params, d_env)

    def forward(self, obs, pvec):
        b = obs.shape[0]
        h = self.features(obs.reshape(b, -1, *obs.shape[-2:]))
        if self.n_params:
            if pvec is None or pvec.shape[-1] != self.n_params:
                got = None if pvec is None else pvec.shape[-1]
                raise ConfigurationError(f"expected {self.n_params} parameters, got {got}")
            h = torch.cat([h, pvec.to(h.dtype)], dim=-1)
        return self.proj(h)


class FiLMBlock(nn.Module):
    def __init__(self, width, cond_dim):
        super().__init__()
        self.norm = nn.GroupNorm(8, width)
        self.film = nn.Linear(cond_dim, 2 * width)
        self.conv = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x, cond):
        scale, shift = self.film(cond)[..., None, None].chunk(2, dim=1)
        return x + self.conv(F.silu(self.norm(x) * (1 + scale) + shift))


class Denoiser(nn.Module):
    """Noise predictor on (B, O*c_hat, h_hat, w_hat) latents."""

    def __init__(self, latent_ch, ctx_ch, cond_dim, hidden, n_blocks):
        super().__init__()
        self.inp = nn.Conv2d(latent_ch + ctx_ch, hidden, 3, padding=1)
        self.cond = nn.Sequential(nn.Linear(cond_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.blocks = nn.ModuleList(FiLMBlock(hidden, hidden) for _ in range(n_blocks))
        self.out = nn.Sequential(nn.GroupNorm(8, hidden), nn.SiLU(),
                                 nn.Conv2d(hidden, latent_ch, 3, padding=1))

    def forward(self, z, ctx, cond):
        c = self.cond(cond)
        h = self.inp(torch.cat([z, ctx], dim=1))
        for blk in self.blocks:
            h = blk(h, c)
        return self.out(h)


class DDSDLoss(NamedTuple):
    total: torch.Tensor
    denoise: torch.Tensor
    phys: torch.Tensor
    recon: torch.Tensor


class Stage2Model(nn.Module):
    def __init__(self, config, stage1, stage1_hash=None):
        super().__init__()
        self.config = config
        self.stage1_hash = stage1_hash
        self.stage1_config = stage1.config
        self.encoder = copy.deepcopy(stage1.encoder)
        self.decoder = copy.deepcopy(stage1.decoder)
        c = config
        self.env_encoder = EnvEncoder(c.input_len * c.channels, c.n_params, c.d_env,
                                      c.env_width)
        self.denoiser = Denoiser(c.output_len * c.latent_channels,
                                 c.input_len * c.latent_channels,
                                 c.d_env + c.d_time, c.hidden, c.n_res_blocks)
        self.register_buffer("latent_mean", torch.zeros(c.latent_channels))
        self.register_buffer("latent_std", torch.ones(c.latent_channels))
        self.register_buffer("target_mean", torch.zeros(c.latent_channels))
        self.register_buffer("target_std", torch.ones(c.latent_channels))
        self.register_buffer("param_mean", torch.zeros(max(c.n_params, 1)))
        self.register_buffer("param_std", torch.ones(max(c.n_params, 1)))

    @property
    def schedule(self):
        return self.config.schedule

    @property
    def input_len(self):
        return self.config.input_len

    @property
    def output_len(self):
        return self.config.output_len

    # -- statistics ------------------------------------------------------------

    @torch.no_grad()
    def fit_statistics(self, obs, target, params):
        """Set latent, residual and parameter standardization from training windows."""
        stats = self.frame_stats(obs)
        z_obs, z_tgt = self._raw(obs, stats), self._raw(target, stats)
        self.latent_mean.copy_(z_obs.mean(dim=(0, 1, 3, 4)))
        self.latent_std.copy_(z_obs.std(dim=(0, 1, 3, 4)).clamp_min(1e-6))
        r = z_tgt - self._base(z_obs, z_tgt.shape[1])
        self.target_mean.copy_(r.mean(dim=(0, 1, 3, 4)))
        self.target_std.copy_(r.std(dim=(0, 1, 3, 4)).clamp_min(1e-6))
        if self.config.n_params:
            p = self._param_features(params, torch.float64)
            self.param_mean.copy_(p.mean(0))
            std = p.std(0) if len(p) > 1 else torch.ones_like(p[0])
            self.param_std.copy_(torch.where(std > 0, std, torch.ones_like(std)))

    def _param_features(self, params, dtype):
        """Raw parameter values (list of PhysicalParams or a tensor) -> feature tensor."""
        if isinstance(params, PhysicalParams):
            params = [params]
        if isinstance(params, torch.Tensor):
            p = params.to(dtype)
        else:
            p = torch.as_tensor(np.stack([pp.vector(self.config.param_names) for pp in params]),
                                dtype=dtype)
        if p.shape[-1] != self.config.n_params:
            raise ConfigurationError(
                f"parameter vector has {p.shape[-1]} entries, model expects {self.config.n_params}")
        if self.config.param_transform == "log":
            # viscosity-like parameters act multiplicatively, and the log keeps
            # out-of-range values closer to the training support
            p = torch.log(p.clamp_min(0) + LOG_FLOOR)
        return p

    def param_vector(self, params, dtype=torch.float32):
        """Standardized parameter features fed to the environment encoder."""
        if not self.config.n_params:
            return None
        p = self._param_features(params, dtype)
        return (p - self.param_mean.to(dtype)) / self.param_std.to(dtype)

    # -- latent plumbing -----------------------------------------------------
    #
    # Frames are scaled with the observation window's statistics (when the
    # Stage-1 model normalizes), encoded frame by frame, and standardized per
    # latent channel. The diffusion target is the future latent minus the
    # last observed latent when ``residual`` is set.

    def frame_stats(self, obs):
        if not self.stage1_config.normalize:
            return None
        return window_stats(obs)

    def _raw(self, frames, stats):
        if stats is not None:
            mean, std = stats
            frames = (frames - mean) / std
        return self.encoder(frames)

    def _base(self, z_obs, n):
        if not self.config.residual:
            return torch.zeros_like(z_obs[:, :1]).expand(-1, n, -1, -1, -1)
        return z_obs[:, -1:].expand(-1, n, -1, -1, -1)

    @staticmethod
    def _bcast(v, z):
        return v.to(z.dtype)[None, None, :, None, None]

    @staticmethod
    def _flat(z):
        return z.reshape(z.shape[0], -1, *z.shape[-2:])

    def encode_context(self, z_obs):
        """Raw observation latents -> standardized (B, I*c_hat, h_hat, w_hat) context."""
        z = (z_obs - self._bcast(self.latent_mean, z_obs)) / self._bcast(self.latent_std, z_obs)
        return self._flat(z)

    def encode_target(self, z_tgt, z_obs):
        """Raw target latents -> standardized diffusion target (B, O*c_hat, h_hat, w_hat)."""
        r = z_tgt - self._base(z_obs, z_tgt.shape[1])
        r = (r - self._bcast(self.target_mean, r)) / self._bcast(self.target_std, r)
        return self._flat(r)

    def decode_target(self, z, z_obs, stats):
        """Inverse of :meth:`encode_target` followed by the decoder and de-normalization."""
        b = z.shape[0]
        r = z.reshape(b, -1, self.config.latent_channels, *z.shape[-2:])
        r = r * self._bcast(self.target_std, r) + self._bcast(self.target_mean, r)
        frames = self.decoder(r + self._base(z_obs, r.shape[1]))
        if stats is not None:
            mean, std = stats
            frames = frames * std + mean
        return frames

    def latents(self, obs, target=None):
        """Observation stats, raw observation latents, context and (optionally) target."""
        stats = self.frame_stats(obs)
        z_obs = self._raw(obs, stats)
        ctx = self.encode_context(z_obs)
        z0 = None if target is None else self.encode_target(self._raw(target, stats), z_obs)
        return stats, z_obs, ctx, z0

    def env_encode(self, obs, params):
        if obs.shape[1:] != (self.config.input_len, self.config.channels,
                             self.config.height, self.config.width):
            raise ConfigurationError(f"observation shape {tuple(obs.shape[1:])} does not match "
                                     f"the configured input window")
        pvec = self.param_vector(params, obs.dtype) if self.config.n_params else None
        return self.env_encoder(obs, pvec)

    def predict_noise(self, z_t, t, env, ctx):
        temb = sinusoid(t, self.config.d_time).to(z_t.dtype)
        if temb.ndim == 1:
            temb = temb.expand(z_t.shape[0], -1)
        return self.denoiser(z_t, ctx, torch.cat([env, temb], dim=-1))

    def posterior_mean(self, z_t, t, eps):
        s = self.schedule
        beta, abar = s.beta(t), s.alpha_bar(t)
        return (z_t - beta / np.sqrt(1.0 - abar) * eps) / np.sqrt(1.0 - beta)

    # -- sampling --------------------------------------------------------------

    @torch.no_grad()
    def sample(self, obs, params, seeds):
        """Draw one forecast per observation; ``seeds`` gives each chain its own stream."""
        obs = torch.as_tensor(obs, dtype=next(self.parameters()).dtype)
        b = obs.shape[0]
        if isinstance(params, PhysicalParams):
            params = [params] * b
        gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
        env = self.env_encode(obs, params)
        stats, z_obs, ctx, _ = self.latents(obs)
        shape = (self.config.output_len * self.config.latent_channels,
                 self.config.latent_height, self.config.latent_width)

        def draw():
            return torch.stack([torch.randn(shape, generator=g, dtype=obs.dtype) for g in gens])

        z = draw()
        for t in range(self.schedule.n_steps, 0, -1):
            def mean_fn(z_, env_, temb_, t=t):
                return self.posterior_mean(z_, t, self.predict_noise(z_, t, env_, ctx))
            z = denoise_step(z, t, env, None, mean_fn, self.schedule,
                             noise=draw() if t > 1 else None)
            if not torch.all(torch.isfinite(z)):
                raise SamplingError(f"non-finite latent at reverse step {t}")
        return self.decode_target(z, z_obs, stats)

    def predict(self, window, params, seeds):
        """Forecaster protocol used by rollouts: numpy in, numpy out."""
        out = self.sample(torch.as_tensor(np.asarray(window)), params, seeds)
        return out.detach().cpu().numpy()

    def n_trainable(self):
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


def field_and_pressure(v, pde_kind):
    """Split decoded fields into (velocity-like Z, pressure-like P)."""
    if PDEKind(pde_kind) is PDEKind.SHALLOW_WATER:
        return v[..., 1:3, :, :], v[..., 0:1, :, :]
    return v, torch.ones_like(v[..., :1, :, :])


def flux_divergence(z, p, dx, dy):
    """Divergence of ``z * p``; a scalar ``z`` is read as the flux ``(zp, zp)``."""
    zp = z * p
    if zp.shape[-3] == 2:
        return ddx(zp[..., 0, :, :], dx, False) + ddy(zp[..., 1, :, :], dy, False)
    return (ddx(zp, dx, False) + ddy(zp, dy, False)).sum(-3)


def phys_regularizer(z, p, z_pred, p_pred, dx, dy, reduce=True):
    """Squared mismatch of ``div(z * p)`` between truth and prediction."""
    d = flux_divergence(z, p, dx, dy) - flux_divergence(z_pred, p_pred, dx, dy)
    sq = d**2
    if reduce:
        return sq.mean()
    return sq.reshape(sq.shape[0], -1).mean(1)


def ddsd_loss(batch, model, generator=None):
    """Noise-prediction loss plus decoder likelihood and physics regularizer.

    ``batch`` is ``(obs, target, params)``. The physics term compares the
    decoded clean-latent estimate with the target, weighted per sample by
    ``alpha_bar_t``.
    """
    obs, target, params = batch
    cfg, s = model.config, model.schedule
    env = model.env_encode(obs, params)
    stats, z_obs, ctx, z0 = model.latents(obs, target)
    b = z0.shape[0]
    t = torch.randint(1, s.n_steps + 1, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = q_sample(z0, t, eps, s)
    eps_hat = model.predict_noise(z_t, t, env, ctx)
    denoise = ((eps - eps_hat) ** 2).mean()

    recon = torch.zeros((), dtype=z0.dtype)
    if cfg.recon_weight > 0:
        recon = ((model.decode_target(z0, z_obs, stats) - target) ** 2).mean()

    phys = torch.zeros((), dtype=z0.dtype)
    if cfg.phys_reg_weight > 0:
        ab = torch.as_tensor(s.alphas_cum, dtype=z0.dtype)[t - 1].reshape(-1, 1, 1, 1)
        z0_hat = (z_t - (1 - ab).sqrt() * eps_hat) / ab.sqrt()
        pred = model.decode_target(z0_hat, z_obs, stats)
        zt, pt = field_and_pressure(target, cfg.pde_kind)
        zp, pp = field_and_pressure(pred, cfg.pde_kind)
        per = phys_regularizer(zt, pt, zp, pp, cfg.grid.dx, cfg.grid.dy, reduce=False)
        phys = (ab.reshape(-1) * per).mean()

    total = denoise + cfg.recon_weight * recon + cfg.phys_reg_weight * phys
    return DDSDLoss(total, denoise, phys, recon)
