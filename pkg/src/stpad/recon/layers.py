"""Convolutional encoder/decoder and the Fourier-domain evolution block."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from stpad.errors import ConfigurationError


@dataclass
class EncoderSpec:
    n_blocks: int = 2
    channels: list = field(default_factory=lambda: [16, 16])
    downsample_factors: list = field(default_factory=lambda: [2, 2])
    activation: str = "relu"
    norm_groups: int = 4

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ConfigurationError("encoder needs at least one block")
        if len(self.channels) != self.n_blocks or len(self.downsample_factors) != self.n_blocks:
            raise ConfigurationError("channels and downsample_factors need one entry per block")
        if self.activation != "relu":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")
        for c in self.channels:
            if c % self.norm_groups:
                raise ConfigurationError(f"{c} channels not divisible by {self.norm_groups} groups")
        for s in self.downsample_factors:
            if s < 1:
                raise ConfigurationError("downsample factors must be >= 1")

    @property
    def total_stride(self):
        out = 1
        for s in self.downsample_factors:
            out *= s
        return out

    def to_dict(self):
        return asdict(self)


@dataclass
class DecoderSpec:
    """Mirror of an :class:`EncoderSpec`; derived, never configured directly."""

    n_blocks: int
    channels: list
    upsample_factors: list
    norm_groups: int

    @classmethod
    def mirror(cls, enc):
        chans = list(reversed(enc.channels))
        outs = chans[1:] + [enc.channels[0]]
        return cls(enc.n_blocks, outs, list(reversed(enc.downsample_factors)), enc.norm_groups)


@dataclass
class EvolutionSpec:
    n_levels: int = 2
    fourier_modes: int = 8
    spectral_channels: int = 32
    fusion_lambda: float = 0.5
    learnable_lambda: bool = True

    def __post_init__(self):
        if self.n_levels < 1 or self.fourier_modes < 1 or self.spectral_channels < 1:
            raise ConfigurationError("evolution levels, modes and channels must be >= 1")
        if not 0.0 <= self.fusion_lambda <= 1.0:
            raise ConfigurationError("fusion_lambda must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


class ConvNormReLU(nn.Sequential):
    """Conv -> GroupNorm -> ReLU."""

    def __init__(self, cin, cout, stride, groups):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
            nn.GroupNorm(groups, cout),
            nn.ReLU(),
        )


def _up_conv(cin, cout, stride):
    if stride == 1:
        return nn.Conv2d(cin, cout, 3, padding=1)
    if stride % 2 == 0:
        return nn.ConvTranspose2d(cin, cout, 2 * stride, stride=stride, padding=stride // 2)
    return nn.ConvTranspose2d(cin, cout, stride, stride=stride)


class UnConvNormReLU(nn.Sequential):
    """Transposed conv -> GroupNorm -> ReLU."""

    def __init__(self, cin, cout, stride, groups):
        super().__init__(_up_conv(cin, cout, stride), nn.GroupNorm(groups, cout), nn.ReLU())


def _fold_time(x):
    b, t = x.shape[:2]
    return x.reshape(b * t, *x.shape[2:]), b, t


class Encoder(nn.Module):
    """Frame-wise encoder mapping (B, t, c, h, w) to (B, t, c_hat, h_hat, w_hat)."""

    def __init__(self, in_channels, spec):
        super().__init__()
        self.spec = spec
        blocks, cin = [], in_channels
        for cout, s in zip(spec.channels, spec.downsample_factors):
            blocks.append(ConvNormReLU(cin, cout, s, spec.norm_groups))
            cin = cout
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x):
        y, b, t = _fold_time(x)
        y = self.blocks(y)
        return y.reshape(b, t, *y.shape[1:])


class Decoder(nn.Module):
    """Frame-wise mirror of :class:`Encoder` followed by a linear 1x1 readout."""

    def __init__(self, latent_channels, out_channels, spec):
        super().__init__()
        self.spec = spec
        blocks, cin = [], latent_channels
        for cout, s in zip(spec.channels, spec.upsample_factors):
            blocks.append(UnConvNormReLU(cin, cout, s, spec.norm_groups))
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.readout = nn.Conv2d(cin, out_channels, 1)

    def forward(self, z):
        y, b, t = _fold_time(z)
        y = self.readout(self.blocks(y))
        return y.reshape(b, t, *y.shape[1:])


def fuse(a, b, lam):
    """Convex skip fusion ``lam * a + (1 - lam) * b``."""
    if isinstance(lam, (int, float)):
        if lam == 1:
            return a
        if lam == 0:
            return b
    return lam * a + (1 - lam) * b


def retained_rows(h, modes):
    """Row indices of an FFT axis of length ``h`` with ``|k| <= modes``."""
    rows = set(range(0, min(modes, h - 1) + 1)) | set(range(max(h - modes, 1), h))
    return sorted(rows)


class SpectralCore(nn.Module):
    """rFFT2 -> keep ``|k_y|, k_x <= modes`` -> per-mode complex channel mixing -> irFFT2."""

    def __init__(self, channels, modes, h, w):
        super().__init__()
        if modes > min(h, w) // 2:
            raise ConfigurationError(
                f"fourier_modes={modes} exceeds the Nyquist limit {min(h, w) // 2} "
                f"of the {h}x{w} coarsest level")
        self.channels, self.modes, self.h, self.w = channels, modes, h, w
        self.register_buffer("rows", torch.tensor(retained_rows(h, modes)), persistent=False)
        self.n_cols = modes + 1
        scale = 1.0 / channels
        self.weight = nn.Parameter(
            scale * torch.randn(channels, channels, len(self.rows), self.n_cols, 2))

    def set_identity(self):
        with torch.no_grad():
            self.weight.zero_()
            for i in range(self.channels):
                self.weight[i, i, :, :, 0] = 1.0

    def forward(self, x):
        xf = torch.fft.rfft2(x)
        sel = xf[:, :, self.rows, : self.n_cols]
        w = torch.view_as_complex(self.weight.contiguous())
        mixed = torch.einsum("bikl,iokl->bokl", sel, w)
        out = torch.zeros(x.shape[0], self.channels, x.shape[-2], x.shape[-1] // 2 + 1,
                          dtype=xf.dtype, device=x.device)
        out[:, :, self.rows, : self.n_cols] = mixed
        return torch.fft.irfft2(out, s=x.shape[-2:])


class EvolutionBlock(nn.Module):
    """U-shaped latent evolution: strided-conv down path, spectral core, fused up path.

    Operates on (B, C, H, W) where C is time x latent channels. With
    ``identity_stages`` the down/up convolutions are bypassed (requires
    ``spectral_channels == C``).
    """

    def __init__(self, channels, h, w, spec, identity_stages=False):
        super().__init__()
        self.spec = spec
        self.identity_stages = identity_stages
        s = spec.spectral_channels
        if identity_stages and s != channels:
            raise ConfigurationError("identity stages need spectral_channels == latent channels")
        ch, cw = h, w
        self.down = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in range(spec.n_levels):
            if not identity_stages:
                if ch % 2 or cw % 2:
                    raise ConfigurationError(f"evolution level {i} cannot halve a {ch}x{cw} map")
                ch, cw = ch // 2, cw // 2
            cin = channels if i == 0 else s
            groups = _groups(s)
            self.down.append(nn.Identity() if identity_stages else nn.Sequential(
                nn.Conv2d(cin, s, 3, stride=2, padding=1), nn.GroupNorm(groups, s), nn.ReLU()))
        for i in reversed(range(spec.n_levels)):
            cout = channels if i == 0 else s
            if identity_stages:
                self.up.append(nn.Identity())
            elif i == 0:
                self.up.append(nn.ConvTranspose2d(s, cout, 4, stride=2, padding=1))
            else:
                self.up.append(nn.Sequential(
                    nn.ConvTranspose2d(s, cout, 4, stride=2, padding=1),
                    nn.GroupNorm(_groups(cout), cout), nn.ReLU()))
        self.core = SpectralCore(s, spec.fourier_modes, ch, cw)
        logit = torch.logit(torch.tensor(spec.fusion_lambda).clamp(1e-4, 1 - 1e-4))
        if spec.learnable_lambda:
            self.lam_logit = nn.Parameter(logit)
        else:
            self.register_buffer("lam_logit", logit)
        self._fixed = None if spec.learnable_lambda else spec.fusion_lambda

    @property
    def lam(self):
        if self._fixed is not None:
            return self._fixed
        return torch.sigmoid(self.lam_logit)

    def set_identity(self):
        self.core.set_identity()

    def forward(self, z):
        lam = self.lam
        skips, y = [], z
        for d in self.down:
            y = d(y)
            skips.append(y)
        y = self.core(y)
        for u, skip in zip(self.up, reversed(skips)):
            y = u(fuse(y, skip, lam))
        return fuse(y, z, lam)


def _groups(c):
    for g in (8, 4, 2, 1):
        if c % g == 0:
            return g
    return 1
