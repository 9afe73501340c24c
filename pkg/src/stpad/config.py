"""Versioned experiment configuration.

Defaults describe the desk-scale 2-D diffusion benchmark: 32x32 grid, 400
trajectories, 4-frame input and output windows, viscosity in [0.01, 0.05] for
training and [0.1, 0.2] for the out-of-distribution test split.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from stpad.dataset import DatasetSplitSpec
from stpad.diffusion.schedule import NoiseSchedule
from stpad.diffusion.train import Stage2TrainConfig
from stpad.field import GridSpec, PhysicalParams
from stpad.recon.layers import EncoderSpec, EvolutionSpec
from stpad.recon.model import Stage1Config
from stpad.recon.train import Stage1TrainConfig
from stpad.seeding import derive_seed
from stpad.simulate import SimulatorConfig

CONFIG_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridSection(_Strict):
    nx: int = 32
    ny: int = 32
    dx: float = 1 / 32
    dy: float = 1 / 32
    dt: float = 0.05
    nt: int = 8


class SimulatorSection(_Strict):
    pde_kind: Literal["diffusion2d", "burgers2d", "shallow_water", "ns_vorticity"] = "diffusion2d"
    grid: GridSection = GridSection()
    viscosity: float = 0.03
    forcing_amplitude: float = 0.0
    extra: dict[str, float] = {}
    n_substeps: int = 50
    init_kind: Literal["gaussian_blobs", "random_fourier", "dam_break"] = "random_fourier"


class SplitSection(_Strict):
    n_train: int = 300
    n_val: int = 50
    n_test_id: int = 25
    n_test_ood: int = 25
    id_param_range: dict[str, tuple[float, float]] = {"viscosity": (0.01, 0.05)}
    ood_param_range: dict[str, tuple[float, float]] = {"viscosity": (0.1, 0.2)}
    input_len: int = 4
    output_len: int = 4


class DatasetSection(_Strict):
    simulator: SimulatorSection = SimulatorSection()
    split: SplitSection = SplitSection()


class OptimizerSection(_Strict):
    lr: float = Field(1e-3, gt=0)
    lr_decay: float = Field(0.5, gt=0)
    lr_step: int = Field(100, ge=1)
    batch_size: int = Field(10, ge=1)
    epochs: int = Field(50, ge=1)


class EncoderSection(_Strict):
    channels: list[int] = [8, 8]
    downsample_factors: list[int] = [2, 2]
    norm_groups: int = 4


class EvolutionSection(_Strict):
    n_levels: int = 1
    fourier_modes: int = 2
    spectral_channels: int = 32
    fusion_lambda: float = 0.5
    learnable_lambda: bool = True


class Stage1Section(_Strict):
    encoder: EncoderSection = EncoderSection()
    codebook_size: int = Field(128, ge=1)
    evolution: EvolutionSection = EvolutionSection()
    use_evolution: bool = True
    phys_weight: float = Field(0.05, ge=0)
    commitment_weight: float = Field(0.25, ge=0)
    normalize: bool = True
    residual_scheme: Literal["central", "midpoint"] = "midpoint"
    reseed_dead_codes: bool = True
    optimizer: OptimizerSection = OptimizerSection()


class ScheduleSection(_Strict):
    kind: Literal["scaled_linear", "linear"] = "scaled_linear"
    n_steps: int = Field(50, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    reverse_noise: Literal["posterior", "sqrt_alpha"] = "posterior"


class Stage2Section(_Strict):
    schedule: ScheduleSection = ScheduleSection()
    freeze: Literal["encoder", "all"] = "encoder"
    decoder_lr_scale: float = Field(0.1, ge=0)
    phys_reg_weight: float = Field(0.01, ge=0)
    recon_weight: float = Field(1.0, ge=0)
    use_params: bool = True
    param_transform: Literal["log", "identity"] = "log"
    residual: bool = True
    param_names: list[str] = ["viscosity"]
    d_env: int = 32
    env_width: int = 32
    d_time: int = 32
    hidden: int = 64
    n_res_blocks: int = 2
    optimizer: OptimizerSection = OptimizerSection()


class EvalSection(_Strict):
    modes: list[Literal["autoregressive", "parallel"]] = ["autoregressive", "parallel"]
    seeds: list[int] = [0, 1, 2, 3, 4]
    ar_block: int = Field(1, ge=1)
    ablation_mode: Literal["autoregressive", "parallel"] = "parallel"


class ExperimentConfig(_Strict):
    version: Literal[1] = CONFIG_VERSION
    seed: int = Field(0, ge=0)
    out_dir: str | None = None
    dataset: DatasetSection = DatasetSection()
    stage1: Stage1Section = Stage1Section()
    stage2: Stage2Section = Stage2Section()
    eval: EvalSection = EvalSection()

    @model_validator(mode="after")
    def _build_checks(self):
        # constructing the runtime objects runs their own validation up front
        self.split_spec()
        self.simulator_config()
        self.schedule()
        return self

    # -- conversions to runtime objects ----------------------------------------

    def stream(self, name):
        """Seed of the named substream (dataset, stage1, stage2, eval)."""
        return derive_seed(self.seed, name)

    def grid(self):
        return GridSpec(**self.dataset.simulator.grid.model_dump())

    def simulator_config(self):
        s = self.dataset.simulator
        params = PhysicalParams(s.pde_kind, s.viscosity, s.forcing_amplitude, dict(s.extra))
        return SimulatorConfig(grid=self.grid(), params=params, n_substeps=s.n_substeps,
                               seed=self.stream("dataset"), init_kind=s.init_kind)

    def split_spec(self):
        return DatasetSplitSpec(**self.dataset.split.model_dump())

    def stage1_config(self, dataset):
        from stpad.recon.train import stage1_config_for

        s = self.stage1
        enc = s.encoder
        return stage1_config_for(
            dataset,
            encoder=EncoderSpec(n_blocks=len(enc.channels), channels=list(enc.channels),
                                downsample_factors=list(enc.downsample_factors),
                                norm_groups=enc.norm_groups),
            evolution=EvolutionSpec(**s.evolution.model_dump()),
            codebook_size=s.codebook_size, use_evolution=s.use_evolution,
            phys_weight=s.phys_weight, commitment_weight=s.commitment_weight,
            normalize=s.normalize, residual_scheme=s.residual_scheme)

    def stage1_train(self):
        return Stage1TrainConfig(reseed_dead_codes=self.stage1.reseed_dead_codes,
                                 **self.stage1.optimizer.model_dump())

    def schedule(self):
        s = self.stage2.schedule
        factory = NoiseSchedule.scaled_linear if s.kind == "scaled_linear" else NoiseSchedule.linear
        return factory(s.n_steps, s.beta_start, s.beta_end, s.reverse_noise)

    def stage2_overrides(self):
        s = self.stage2
        return dict(schedule=self.schedule(), phys_reg_weight=s.phys_reg_weight,
                    recon_weight=s.recon_weight, use_params=s.use_params,
                    param_transform=s.param_transform, residual=s.residual,
                    param_names=list(s.param_names), d_env=s.d_env, env_width=s.env_width,
                    d_time=s.d_time, hidden=s.hidden, n_res_blocks=s.n_res_blocks)

    def stage2_train(self):
        return Stage2TrainConfig(freeze=self.stage2.freeze,
                                 decoder_lr_scale=self.stage2.decoder_lr_scale,
                                 **self.stage2.optimizer.model_dump())

    def resolved_json(self):
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2)


def load_config(path=None):
    """Read and validate a JSON config; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.model_validate_json(Path(path).read_text())
