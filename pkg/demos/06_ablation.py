# # Ablation table
#
# Each variant drops one ingredient: the physics terms, the evolution block,
# or the parameter conditioning. All variants share seeds and budgets, and
# the ones that keep the Stage-1 model unchanged share its checkpoint.
# Budgets here are tiny so the script finishes in a few minutes; the
# acceptance suite runs the full-size comparison.

import tempfile
from pathlib import Path

from stpad.dataset import DatasetSplitSpec, build_dataset
from stpad.diffusion.train import Stage2TrainConfig
from stpad.evaluation import ablation_suite
from stpad.field import GridSpec, PhysicalParams
from stpad.recon.layers import EncoderSpec, EvolutionSpec
from stpad.recon.train import Stage1TrainConfig, stage1_config_for
from stpad.simulate import SimulatorConfig

grid = GridSpec(nx=32, ny=32, dx=1 / 32, dy=1 / 32, dt=0.05, nt=8)
base = SimulatorConfig(grid, PhysicalParams("diffusion2d", 0.03), n_substeps=50, seed=0)
ds = build_dataset(DatasetSplitSpec(40, 8, 8, 8, input_len=4, output_len=4), base)

cfg1 = stage1_config_for(ds, encoder=EncoderSpec(channels=[8, 8]),
                         evolution=EvolutionSpec(n_levels=1, fourier_modes=2))
work = Path(tempfile.mkdtemp())
res = ablation_suite(ds, cfg1, Stage1TrainConfig(epochs=5), {}, Stage2TrainConfig(epochs=5),
                     seeds=[0], work_dir=work)
print(f"{'variant':>14} {'ID mse':>9} {'OOD mse':>9}")
for row in res.rows:
    print(f"{row['variant']:>14} {row['test_id_mse']:9.4f} {row['test_ood_mse']:9.4f}")
print("csv:", res.write_csv(work / "ablation.csv"))
