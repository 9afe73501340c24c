"""Nearest-neighbour vector quantization with straight-through gradients."""

from __future__ import annotations

import contextlib
import math
from typing import NamedTuple

import torch
from torch import nn

from stpad.errors import ConfigurationError


class QuantizeOut(NamedTuple):
    quantized: torch.Tensor
    indices: torch.Tensor
    codebook_loss: torch.Tensor
    commitment_loss: torch.Tensor


def nearest(tokens, entries):
    """Index of the closest codebook entry for every row of ``tokens``.

    Squared distances are compared as ``|m|^2 - 2 z.m``; ``argmin`` returns
    the lowest index among ties.
    """
    scores = (entries * entries).sum(1)[None, :] - 2.0 * tokens @ entries.T
    return torch.argmin(scores, dim=1)


def quantize(tokens, codebook):
    """Quantize an (L, D) token matrix against ``codebook`` (a tensor or :class:`Codebook`)."""
    entries = codebook.entries if isinstance(codebook, Codebook) else codebook
    if tokens.shape[-1] != entries.shape[-1]:
        raise ConfigurationError(
            f"token dimension {tokens.shape[-1]} != codebook dimension {entries.shape[-1]}")
    flat = tokens.reshape(-1, tokens.shape[-1])
    with torch.no_grad():
        idx = nearest(flat.detach(), entries.detach())
    q = entries[idx].reshape(tokens.shape)
    return _finish(tokens, q, idx.reshape(tokens.shape[:-1]))


def _finish(tokens, q, idx):
    codebook_loss = ((tokens.detach() - q) ** 2).mean()
    commitment_loss = ((tokens - q.detach()) ** 2).mean()
    st = tokens + (q - tokens).detach()
    return QuantizeOut(st, idx, codebook_loss, commitment_loss)


class Codebook(nn.Module):
    """K x D memory bank of embeddings."""

    def __init__(self, k, d, generator=None):
        super().__init__()
        if k < 2:
            raise ConfigurationError("codebook needs at least 2 entries")
        init = torch.randn(k, d, generator=generator) / math.sqrt(d)
        self.entries = nn.Parameter(_dedupe(init, generator))
        self._pinned = None
        self.register_buffer("usage", torch.zeros(k), persistent=False)

    @property
    def k(self):
        return self.entries.shape[0]

    @property
    def d(self):
        return self.entries.shape[1]

    def forward(self, tokens):
        if self._pinned is not None:
            idx, offset, tok0, q0 = self._pinned
            q = self.entries[idx.reshape(-1)].reshape(tokens.shape)
            return QuantizeOut(tokens + offset, idx, ((tok0 - q) ** 2).mean(),
                               ((tokens - q0) ** 2).mean())
        out = quantize(tokens, self)
        if self.training:
            self.usage += torch.bincount(out.indices.reshape(-1), minlength=self.k).to(self.usage)
        return out

    @contextlib.contextmanager
    def pinned(self, tokens):
        """Freeze the quantizer at the base point ``tokens``.

        Inside the context the assignment, the straight-through offset and
        the stop-gradient operands of both auxiliary losses are constants
        taken at ``tokens``. The forward value is then a smooth function of
        the weights whose derivative at the base point equals the gradient the
        unpinned quantizer backpropagates, so finite differences can check it.
        """
        with torch.no_grad():
            tok0 = tokens.detach().clone()
            out = quantize(tok0, self)
            q0 = self.entries[out.indices.reshape(-1)].reshape(tok0.shape).detach().clone()
            self._pinned = (out.indices, q0 - tok0, tok0, q0)
        try:
            yield self
        finally:
            self._pinned = None

    @torch.no_grad()
    def reseed_dead(self, tokens, generator=None):
        """Replace entries unused since the last call by random tokens; returns the count."""
        dead = torch.nonzero(self.usage == 0).reshape(-1)
        flat = tokens.reshape(-1, self.d)
        if len(dead) and len(flat):
            pick = torch.randint(len(flat), (len(dead),), generator=generator)
            self.entries[dead] = flat[pick].to(self.entries)
            self.entries.copy_(_dedupe(self.entries.detach(), generator))
        self.usage.zero_()
        return len(dead)


def _dedupe(entries, generator=None):
    entries = entries.clone()
    for _ in range(10):
        uniq, inverse = torch.unique(entries, dim=0, return_inverse=True)
        if len(uniq) == len(entries):
            return entries
        seen = set()
        for i, u in enumerate(inverse.tolist()):
            if u in seen:
                entries[i] += 1e-3 * torch.randn(entries.shape[1], generator=generator,
                                                 dtype=entries.dtype)
            seen.add(u)
    return entries
