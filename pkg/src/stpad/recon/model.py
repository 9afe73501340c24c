"""Stage-1 reconstructor: encoder, VQ bottleneck, evolution block, decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch
from torch import nn

from stpad.errors import ConfigurationError
from stpad.field import GridSpec, PDEKind, PhysicalParams, physics_residual
from stpad.recon.layers import Decoder, DecoderSpec, Encoder, EncoderSpec, EvolutionBlock, EvolutionSpec
from stpad.recon.quantize import Codebook


@dataclass
class Stage1Config:
    input_shape: tuple = (24, 1, 32, 32)
    grid: GridSpec = field(default_factory=lambda: GridSpec(nx=32, ny=32, dx=1 / 32, dy=1 / 32))
    pde_kind: PDEKind = PDEKind.DIFFUSION2D
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    codebook_size: int = 128
    evolution: EvolutionSpec = field(default_factory=EvolutionSpec)
    use_evolution: bool = True
    phys_weight: float = 0.05
    commitment_weight: float = 0.25
    normalize: bool = True
    residual_scheme: str = "midpoint"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.pde_kind = PDEKind(self.pde_kind)
        t, c, h, w = self.input_shape
        s = self.encoder.total_stride
        if h % s or w % s:
            raise ConfigurationError(
                f"input {h}x{w} is not divisible by the total encoder stride {s}")
        if self.phys_weight < 0 or self.commitment_weight < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if self.residual_scheme not in ("central", "midpoint"):
            raise ConfigurationError(f"unknown residual_scheme {self.residual_scheme!r}")

    @property
    def latent_shape(self):
        t, _, h, w = self.input_shape
        s = self.encoder.total_stride
        return (t, self.encoder.channels[-1], h // s, w // s)

    @property
    def token_dim(self):
        t, c_hat, _, _ = self.latent_shape
        return t * c_hat

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "grid": self.grid.to_dict(),
            "pde_kind": self.pde_kind.value,
            "encoder": self.encoder.to_dict(),
            "codebook_size": self.codebook_size,
            "evolution": self.evolution.to_dict(),
            "use_evolution": self.use_evolution,
            "phys_weight": self.phys_weight,
            "commitment_weight": self.commitment_weight,
            "normalize": self.normalize,
            "residual_scheme": self.residual_scheme,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["grid"] = GridSpec.from_dict(d["grid"])
        d["encoder"] = EncoderSpec(**d["encoder"])
        d["evolution"] = EvolutionSpec(**d["evolution"])
        return cls(**d)


class Stage1Out(NamedTuple):
    reconstruction: torch.Tensor
    latent: torch.Tensor
    quantized: torch.Tensor
    indices: torch.Tensor
    codebook_loss: torch.Tensor
    commitment_loss: torch.Tensor


class Stage1Loss(NamedTuple):
    total: torch.Tensor
    recon_mse: torch.Tensor
    phys: torch.Tensor
    codebook_loss: torch.Tensor
    commitment_loss: torch.Tensor


def window_stats(x, floor=1e-6):
    """Per-sample, per-channel mean and std over (t, h, w) of a (B, t, c, h, w) window."""
    mean = x.mean(dim=(1, 3, 4), keepdim=True)
    std = x.std(dim=(1, 3, 4), keepdim=True, unbiased=False).clamp_min(floor)
    return mean, std


def to_tokens(z):
    """(B, t, c, h, w) -> (B, h*w, t*c)."""
    b, t, c, h, w = z.shape
    return z.reshape(b, t * c, h * w).transpose(1, 2)


def from_tokens(tokens, shape):
    b, t, c, h, w = shape
    return tokens.transpose(1, 2).reshape(b, t, c, h, w)


class Stage1Model(nn.Module):
    def __init__(self, config, evolution_identity_stages=False):
        super().__init__()
        self.config = config
        t, c, h, w = config.input_shape
        _, c_hat, h_hat, w_hat = config.latent_shape
        self.encoder = Encoder(c, config.encoder)
        self.codebook = Codebook(config.codebook_size, config.token_dim)
        if config.use_evolution:
            self.evolution = EvolutionBlock(t * c_hat, h_hat, w_hat, config.evolution,
                                            identity_stages=evolution_identity_stages)
        else:
            self.evolution = nn.Identity()
        self.decoder = Decoder(c_hat, c, DecoderSpec.mirror(config.encoder))

    def normalize(self, x):
        """Scale a window to zero mean and unit std per channel; returns ``(x_n, stats)``.

        The encoder's GroupNorm discards most of a frame's amplitude, so the
        amplitude is carried outside the network and restored after decoding.
        """
        if not self.config.normalize:
            return x, None
        mean, std = window_stats(x)
        return (x - mean) / std, (mean, std)

    @staticmethod
    def denormalize(y, stats):
        if stats is None:
            return y
        mean, std = stats
        return y * std + mean

    def encode(self, x):
        return self.encoder(x)

    def tokens(self, x):
        """Codebook tokens of a raw window (normalization included)."""
        return to_tokens(self.encode(self.normalize(x)[0]))

    def evolve(self, z):
        b, t, c, h, w = z.shape
        return self.evolution(z.reshape(b, t * c, h, w)).reshape(b, t, c, h, w)

    def decode(self, z):
        return self.decoder(z)

    def forward(self, x):
        xn, stats = self.normalize(x)
        z = self.encode(xn)
        q = self.codebook(to_tokens(z))
        zq = from_tokens(q.quantized, z.shape)
        recon = self.denormalize(self.decode(self.evolve(zq)), stats)
        return Stage1Out(recon, z, zq, q.indices, q.codebook_loss, q.commitment_loss)

    def n_trainable(self):
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


def viscosity_tensor(params, batch, dtype):
    if isinstance(params, PhysicalParams):
        return torch.full((batch,), params.viscosity, dtype=dtype)
    if isinstance(params, torch.Tensor):
        return params.to(dtype)
    return torch.tensor([p.viscosity for p in params], dtype=dtype)


def stage1_loss(x, model, params, out=None):
    """Reconstruction + weighted physics residual + VQ auxiliary terms.

    ``params`` is one :class:`PhysicalParams` for the whole batch or one per
    sample. Returns a :class:`Stage1Loss`; every component is a scalar tensor.
    """
    cfg = model.config
    if out is None:
        out = model(x)
    recon_mse = ((out.reconstruction - x) ** 2).mean()
    if cfg.phys_weight > 0:
        nu = viscosity_tensor(params, x.shape[0], x.dtype)
        amp = 0.0
        if isinstance(params, PhysicalParams):
            amp = params.forcing_amplitude
        elif not isinstance(params, torch.Tensor):
            amp = torch.tensor([p.forcing_amplitude for p in params], dtype=x.dtype)
        phys = physics_residual(out.reconstruction,
                                {"pde_kind": cfg.pde_kind, "viscosity": nu,
                                 "forcing_amplitude": amp},
                                grid=cfg.grid, time_scheme=cfg.residual_scheme)
    else:
        phys = torch.zeros((), dtype=x.dtype)
    total = (recon_mse + cfg.phys_weight * phys + out.codebook_loss
             + cfg.commitment_weight * out.commitment_loss)
    return Stage1Loss(total, recon_mse, phys, out.codebook_loss, out.commitment_loss)
