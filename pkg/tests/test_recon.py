import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stpad.errors import ConfigurationError
from stpad.field import GridSpec, PhysicalParams
from stpad.recon.layers import (
    Decoder,
    DecoderSpec,
    Encoder,
    EncoderSpec,
    EvolutionBlock,
    EvolutionSpec,
    SpectralCore,
    fuse,
)
from stpad.recon.model import (
    Stage1Config,
    Stage1Model,
    from_tokens,
    stage1_loss,
    to_tokens,
)
from stpad.recon.quantize import Codebook, quantize
from stpad.recon.train import Stage1TrainConfig, lr_at_epoch, load_stage1, save_stage1

from helpers import fd_check


def brute_force_nearest(tokens, entries):
    out = []
    for z in tokens:
        d = [float(((z - m) ** 2).sum()) for m in entries]
        out.append(int(np.argmin(d)))
    return np.array(out)


class TestQuantize:
    def test_matches_brute_force(self):
        g = torch.Generator().manual_seed(0)
        tokens = torch.randn(1000, 16, generator=g, dtype=torch.float64)
        entries = torch.randn(64, 16, generator=g, dtype=torch.float64)
        idx = quantize(tokens, entries).indices.numpy()
        assert np.array_equal(idx, brute_force_nearest(tokens.numpy(), entries.numpy()))

    def test_exact_entry(self):
        cb = Codebook(8, 4, torch.Generator().manual_seed(1))
        tok = cb.entries.detach()[3:4].clone()
        out = quantize(tok, cb)
        assert int(out.indices[0]) == 3
        assert out.codebook_loss.item() == 0 and out.commitment_loss.item() == 0

    def test_tie_lowest_index(self):
        entries = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 5.0]])
        assert int(quantize(torch.zeros(1, 2), entries).indices[0]) == 0

    def test_dim_mismatch(self):
        with pytest.raises(ConfigurationError):
            quantize(torch.zeros(3, 5), torch.zeros(4, 4))

    def test_duplicates_repaired(self):
        cb = Codebook(4, 3)
        with torch.no_grad():
            cb.entries[1] = cb.entries[0]
        from stpad.recon.quantize import _dedupe

        fixed = _dedupe(cb.entries.detach())
        assert len(torch.unique(fixed, dim=0)) == 4

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 16), st.integers(1, 6))
    def test_idempotent_and_nearest(self, seed, k, d):
        g = torch.Generator().manual_seed(seed)
        entries = torch.randn(k, d, generator=g, dtype=torch.float64)
        tokens = torch.randn(20, d, generator=g, dtype=torch.float64)
        out = quantize(tokens, entries)
        dist = torch.cdist(tokens, entries)
        chosen = dist.gather(1, out.indices[:, None])
        assert torch.all(chosen <= dist + 1e-12)
        again = quantize(out.quantized.detach(), entries)
        assert torch.equal(again.indices, out.indices)
        # the straight-through value differs from the entry by rounding only
        assert again.commitment_loss.item() < 1e-28

    def test_straight_through_gradient(self):
        g = torch.Generator().manual_seed(2)
        z = torch.randn(10, 4, generator=g, dtype=torch.float64, requires_grad=True)
        entries = torch.randn(6, 4, generator=g, dtype=torch.float64)
        target = torch.randn(10, 4, generator=g, dtype=torch.float64)
        q = quantize(z, entries).quantized
        (grad_q,) = torch.autograd.grad(((q - target) ** 2).mean(), z)
        qv = q.detach()
        # identity replacement evaluated at the same forward value
        z2 = z.detach().clone().requires_grad_(True)
        ident = z2 + (qv - z2).detach()
        (grad_i,) = torch.autograd.grad(((ident - target) ** 2).mean(), z2)
        assert torch.equal(grad_q, grad_i)

    def test_reseed_dead(self):
        cb = Codebook(16, 4, torch.Generator().manual_seed(0))
        cb.train()
        tokens = torch.randn(1, 50, 4)
        with torch.no_grad():
            cb(tokens)
        n = cb.reseed_dead(tokens, torch.Generator().manual_seed(1))
        assert 0 <= n < 16 and torch.all(cb.usage == 0)
        assert len(torch.unique(cb.entries.detach(), dim=0)) == 16


class TestEvolution:
    def test_fuse_endpoints(self):
        a, b = torch.randn(3, 4), torch.randn(3, 4)
        assert fuse(a, b, 1) is a and fuse(a, b, 0) is b
        assert torch.equal(fuse(a, b, 1.0), a) and torch.equal(fuse(a, b, 0.0), b)

    def test_identity_round_trip(self):
        start = time.perf_counter()
        spec = EvolutionSpec(n_levels=1, fourier_modes=16, spectral_channels=8)
        blk = EvolutionBlock(8, 32, 32, spec, identity_stages=True)
        blk.set_identity()
        z = torch.randn(4, 8, 32, 32)
        with torch.no_grad():
            err = (blk(z) - z).abs().max().item()
        assert err < 1e-5
        assert time.perf_counter() - start < 1.0

    def test_harmonic_above_cutoff_filtered(self):
        core = SpectralCore(2, 3, 32, 32)
        core.set_identity()
        x = torch.arange(32.0)
        f = torch.sin(2 * np.pi * 6 * x / 32)[None, :].expand(32, 32)
        inp = f.expand(1, 2, 32, 32).contiguous()
        with torch.no_grad():
            out = core(inp)
        assert out.norm() < 1e-5 * inp.norm()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 1000), st.floats(-3, 3), st.floats(-3, 3))
    def test_core_linear(self, seed, a, b):
        torch.manual_seed(seed)
        core = SpectralCore(3, 2, 8, 8)
        x, y = torch.randn(2, 3, 8, 8), torch.randn(2, 3, 8, 8)
        with torch.no_grad():
            lhs = core(a * x + b * y)
            rhs = a * core(x) + b * core(y)
        assert torch.allclose(lhs, rhs, atol=1e-5)

    def test_modes_above_nyquist(self):
        with pytest.raises(ConfigurationError, match="Nyquist"):
            EvolutionBlock(8, 8, 8, EvolutionSpec(n_levels=1, fourier_modes=3))

    def test_fixed_lambda(self):
        blk = EvolutionBlock(8, 8, 8, EvolutionSpec(n_levels=1, fourier_modes=2,
                                                    learnable_lambda=False, fusion_lambda=0.3))
        assert blk.lam == 0.3
        assert not any("lam" in n for n, _ in blk.named_parameters())


class TestEncoderDecoder:
    def test_shapes(self):
        enc = Encoder(1, EncoderSpec())
        z = enc(torch.randn(2, 10, 1, 64, 64))
        assert z.shape == (2, 10, 16, 16, 16)
        dec = Decoder(16, 1, DecoderSpec.mirror(EncoderSpec()))
        assert dec(z).shape == (2, 10, 1, 64, 64)

    def test_batch_independent_and_deterministic(self):
        torch.manual_seed(0)
        enc = Encoder(1, EncoderSpec(channels=[8, 8]))
        dec = Decoder(8, 1, DecoderSpec.mirror(EncoderSpec(channels=[8, 8])))
        x = torch.randn(2, 3, 1, 16, 16)
        with torch.no_grad():
            z = enc(torch.cat([x, x]))
            assert torch.equal(z[:2], z[2:])
            assert torch.equal(enc(x), enc(x))
            y = dec(torch.cat([z[:2], z[:2]]))
            assert torch.equal(y[:2], y[2:])
            zero = torch.zeros_like(z[:1])
            assert torch.equal(dec(zero), dec(zero))

    def test_indivisible_shape_at_build(self):
        with pytest.raises(ConfigurationError):
            Stage1Config(input_shape=(4, 1, 30, 30))


shape_cfg = st.tuples(
    st.integers(1, 3),                   # t
    st.integers(1, 2),                   # c
    st.sampled_from([[1], [2], [2, 1], [1, 2], [2, 2]]),
    st.sampled_from([16, 32]),
    st.booleans(),
)


@settings(max_examples=15, deadline=None)
@given(shape_cfg)
def test_shape_preserved(case):
    t, c, factors, n, evo = case
    enc = EncoderSpec(n_blocks=len(factors), channels=[4] * len(factors),
                      downsample_factors=factors, norm_groups=2)
    h = n // enc.total_stride
    cfg = Stage1Config(input_shape=(t, c, n, n), encoder=enc, codebook_size=8,
                       evolution=EvolutionSpec(n_levels=1, fourier_modes=min(2, h // 4) or 1,
                                               spectral_channels=8),
                       use_evolution=evo and h >= 4)
    model = Stage1Model(cfg)
    x = torch.randn(2, t, c, n, n)
    with torch.no_grad():
        out = model(x)
    assert out.reconstruction.shape == x.shape


def tiny_model(seed=0, phys=0.05):
    torch.manual_seed(seed)
    g = GridSpec(nx=8, ny=8, dx=1 / 8, dy=1 / 8, dt=0.05, nt=4)
    cfg = Stage1Config(input_shape=(2, 1, 8, 8), grid=g,
                       encoder=EncoderSpec(n_blocks=2, channels=[4, 4], downsample_factors=[2, 1],
                                           norm_groups=2),
                       codebook_size=8,
                       evolution=EvolutionSpec(n_levels=1, fourier_modes=1, spectral_channels=4),
                       phys_weight=phys)
    return Stage1Model(cfg).double()


class TestWindowNormalization:
    @settings(max_examples=10, deadline=None)
    @given(st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
    def test_affine_equivariant(self, a, b):
        model = tiny_model(seed=1)
        x = torch.randn(2, 2, 1, 8, 8, generator=torch.Generator().manual_seed(0),
                        dtype=torch.float64)
        with torch.no_grad():
            base = model(x).reconstruction
            moved = model(a * x + b).reconstruction
            tok_base, tok_moved = model.tokens(x), model.tokens(a * x + b)
        assert torch.allclose(tok_moved, tok_base, atol=1e-8)
        assert torch.allclose(moved, a * base + b, atol=1e-8 * (1 + abs(b)))

    def test_disabled_passes_raw_frames(self):
        model = tiny_model(seed=1)
        model.config.normalize = False
        x = torch.randn(1, 2, 1, 8, 8, dtype=torch.float64)
        xn, stats = model.normalize(x)
        assert stats is None and xn is x


class TestStage1Loss:
    def test_term_isolation(self):
        model = tiny_model(phys=0.0)
        model.config.commitment_weight = 0.0
        x = torch.randn(2, 2, 1, 8, 8, dtype=torch.float64)
        out = model(x)
        fake = out._replace(reconstruction=x)
        loss = stage1_loss(x, model, PhysicalParams("diffusion2d", 0.02), out=fake)
        assert loss.total.item() == loss.codebook_loss.item()

    def test_constant_target(self):
        model = tiny_model()
        x = torch.full((2, 2, 1, 8, 8), 0.7, dtype=torch.float64)
        fake = model(x)._replace(reconstruction=x)
        loss = stage1_loss(x, model, PhysicalParams("diffusion2d", 0.02), out=fake)
        assert loss.recon_mse.item() == 0 and loss.phys.item() == 0
        expected = loss.codebook_loss + model.config.commitment_weight * loss.commitment_loss
        assert loss.total.item() == pytest.approx(expected.item(), rel=1e-15)

    def test_gradient_matches_finite_differences(self):
        model = tiny_model(seed=3)
        assert model.n_trainable() <= 5000
        g = torch.Generator().manual_seed(4)
        x = torch.randn(2, 2, 1, 8, 8, generator=g, dtype=torch.float64)
        params = [PhysicalParams("diffusion2d", 0.02), PhysicalParams("diffusion2d", 0.04)]
        with torch.no_grad():
            tok = model.tokens(x)
        with model.codebook.pinned(tok):
            frac = fd_check(lambda: stage1_loss(x, model, params).total, model, n_coords=150)
        assert frac >= 0.99

    def test_phys_share_grows_with_weight(self):
        x = torch.randn(2, 2, 1, 8, 8, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(5))
        p = PhysicalParams("diffusion2d", 0.03)
        shares = []
        for w in (0.01, 0.1, 1.0):
            model = tiny_model(seed=6, phys=w)
            loss = stage1_loss(x, model, p)
            gp = torch.autograd.grad(w * loss.phys, list(model.parameters()), allow_unused=True,
                                     retain_graph=True)
            gt = torch.autograd.grad(loss.total, list(model.parameters()), allow_unused=True)
            norm = lambda gs: torch.sqrt(sum((g**2).sum() for g in gs if g is not None))
            shares.append(float(norm(gp) / norm(gt)))
        assert shares[0] <= shares[1] <= shares[2]


def test_tokens_roundtrip():
    z = torch.randn(2, 3, 4, 5, 6)
    tok = to_tokens(z)
    assert tok.shape == (2, 30, 12)
    assert torch.equal(from_tokens(tok, z.shape), z)


def test_lr_schedule():
    cfg = Stage1TrainConfig()
    assert lr_at_epoch(0, cfg) == 0.001
    assert lr_at_epoch(99, cfg) == 0.001
    assert lr_at_epoch(100, cfg) == 0.0005


def test_checkpoint_roundtrip(tmp_path):
    model = tiny_model().float()
    digest = save_stage1(tmp_path / "s1.ckpt", model, seed=3)
    back, header, d2 = load_stage1(tmp_path / "s1.ckpt", digest)
    assert d2 == digest and header["seed"] == 3
    for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k


def test_pinned_gradient_equals_unpinned():
    model = tiny_model(seed=8)
    x = torch.randn(2, 2, 1, 8, 8, dtype=torch.float64,
                    generator=torch.Generator().manual_seed(9))
    p = PhysicalParams("diffusion2d", 0.03)
    free = torch.autograd.grad(stage1_loss(x, model, p).total, list(model.parameters()))
    with torch.no_grad():
        tok = model.tokens(x)
    with model.codebook.pinned(tok):
        loss = stage1_loss(x, model, p).total
        pinned = torch.autograd.grad(loss, list(model.parameters()))
    assert loss.item() == pytest.approx(stage1_loss(x, model, p).total.item(), rel=1e-12)
    for a, b in zip(free, pinned):
        assert torch.allclose(a, b, rtol=1e-10, atol=1e-14)
