# # Rollouts and metrics
#
# Forecasts can be produced in one parallel call or block by block, feeding
# each prediction back as input. This walk-through uses a persistence model
# (repeat the last frame) so the numbers are easy to reason about.

import numpy as np

from stpad import metrics
from stpad.dataset import DatasetSplitSpec, build_dataset
from stpad.evaluation import evaluate_split, rollout
from stpad.field import GridSpec, PhysicalParams
from stpad.simulate import SimulatorConfig


class Persistence:
    input_len = output_len = 4

    def predict(self, window, params, seeds):
        return np.repeat(np.asarray(window)[:, -1:], self.output_len, axis=1)


# PSNR is referenced to a peak value, SSIM compares local structure.

x = np.random.default_rng(0).random((32, 32))
print("psnr at mse 0.01, peak 1:", metrics.psnr_from_mse(0.01, 1.0))
print("ssim(x, x):", metrics.ssim(x, x), " ssim(x + 0.2, x):", round(metrics.ssim(x + 0.2, x), 4))

grid = GridSpec(nx=32, ny=32, dx=1 / 32, dy=1 / 32, dt=0.05, nt=8)
base = SimulatorConfig(grid, PhysicalParams("diffusion2d", 0.03), n_substeps=50, seed=0)
ds = build_dataset(DatasetSplitSpec(4, 1, 4, 4, input_len=4, output_len=4), base)

win = np.random.default_rng(1).normal(size=(1, 4, 1, 32, 32))
ar = rollout(Persistence(), win, [None], 4, "autoregressive", [0], block=1)
par = rollout(Persistence(), win, [None], 4, "parallel", [0])
print("modes agree for persistence:", np.array_equal(ar, par))

# Higher viscosity means faster decay. Out of distribution the fields are
# nearly flat by the forecast window, so MSE is small in absolute terms while
# PSNR and SSIM, which are relative to the signal, drop sharply.

for split in ("test_id", "test_ood"):
    rep = evaluate_split(Persistence(), ds, split, "autoregressive", block=1)
    m = rep.metrics
    print(f"{split:>8}: mse {m['mse']:.5f}  psnr {m['psnr']:.2f}  ssim {m['ssim']:.4f}  "
          f"ms-ssim {m['ms_ssim']:.4f}")
