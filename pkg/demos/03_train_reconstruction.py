# # Stage 1: encoder, codebook, evolution, decoder
#
# The reconstruction model compresses an 8-frame window into a grid of
# codebook tokens, evolves them in Fourier space and decodes the window back.
# Training mixes reconstruction error with a physics residual on the output.

import tempfile
from pathlib import Path

import torch

from stpad.dataset import DatasetSplitSpec, build_dataset
from stpad.field import GridSpec, PhysicalParams
from stpad.recon.layers import EncoderSpec, EvolutionSpec
from stpad.recon.quantize import quantize
from stpad.recon.train import Stage1TrainConfig, load_stage1, stage1_config_for, train_stage1
from stpad.simulate import SimulatorConfig

# Quantization is a nearest-neighbour lookup with a straight-through gradient.

g = torch.Generator().manual_seed(0)
tokens, book = torch.randn(5, 3, generator=g), torch.randn(4, 3, generator=g)
print("nearest codes:", quantize(tokens, book).indices.tolist())

grid = GridSpec(nx=32, ny=32, dx=1 / 32, dy=1 / 32, dt=0.05, nt=8)
base = SimulatorConfig(grid, PhysicalParams("diffusion2d", 0.03), n_substeps=50, seed=0)
ds = build_dataset(DatasetSplitSpec(40, 8, 4, 4, input_len=4, output_len=4), base)

cfg = stage1_config_for(ds, encoder=EncoderSpec(channels=[8, 8]),
                        evolution=EvolutionSpec(n_levels=1, fourier_modes=2),
                        codebook_size=64, phys_weight=0.05)
print("latent shape (t, c, h, w):", cfg.latent_shape)

ckpt = Path(tempfile.mkdtemp()) / "stage1.ckpt"
model, history, digest = train_stage1(ds, cfg, Stage1TrainConfig(epochs=10), seed=0,
                                      ckpt_path=ckpt)
for row in history[::3]:
    print(f"epoch {row['epoch']:>2}  train {row['train_total']:.4f}  "
          f"val recon {row['val_recon']:.4f}")

# The checkpoint is content-addressed: loading with the wrong hash fails.

again, _, _ = load_stage1(ckpt, expected_hash=digest)
print("checkpoint sha256:", digest[:16], "...")
