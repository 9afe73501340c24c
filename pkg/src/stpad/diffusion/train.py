"""Stage-2 training: env encoder + denoiser on top of reused Stage-1 weights."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from stpad.checkpoint import load_checkpoint, load_state, save_checkpoint, state_arrays
from stpad.diffusion.model import Stage2Config, Stage2Model, ddsd_loss
from stpad.diffusion.schedule import NoiseSchedule
from stpad.errors import CheckpointError, ConfigurationError, NumericalError, ValidationError
from stpad.recon.model import Stage1Config, Stage1Model
from stpad.recon.train import load_stage1, lr_at_epoch
from stpad.seeding import derive_seed, generator

log = logging.getLogger(__name__)

FREEZE = ("encoder", "all")


@dataclass
class Stage2TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_step: int = 100
    batch_size: int = 10
    epochs: int = 50
    freeze: str = "encoder"
    decoder_lr_scale: float = 0.1

    def __post_init__(self):
        if self.freeze not in FREEZE:
            raise ConfigurationError(f"freeze must be one of {FREEZE}")

    def to_dict(self):
        return asdict(self)


def stage2_config_for(stage1, schedule=None, **overrides):
    """Stage-2 config whose shapes follow a trained Stage-1 model."""
    c1 = stage1.config
    t, c, h, w = c1.input_shape
    _, lc, lh, lw = c1.latent_shape
    input_len = overrides.pop("input_len", t // 2)
    kwargs = dict(input_len=input_len, output_len=t - input_len, channels=c, height=h,
                  width=w, latent_channels=lc, latent_height=lh, latent_width=lw,
                  grid=c1.grid, pde_kind=c1.pde_kind)
    if schedule is not None:
        kwargs["schedule"] = schedule
    kwargs.update(overrides)
    return Stage2Config(**kwargs)


def _tensors(dataset, split):
    x, y, params = dataset.windows(split)
    if x is None or len(x) == 0:
        return None
    return torch.from_numpy(x), torch.from_numpy(y), params


def _epoch_pass(model, data, cfg, gen, opt=None, order=None):
    x, y, params = data
    idx = order if order is not None else torch.arange(len(x))
    totals, n = np.zeros(4), 0
    for b, start in enumerate(range(0, len(x), cfg.batch_size)):
        sel = idx[start:start + cfg.batch_size]
        loss = ddsd_loss((x[sel], y[sel], [params[i] for i in sel.tolist()]), model, gen)
        if not torch.isfinite(loss.total):
            raise NumericalError(
                f"non-finite stage-2 loss at batch {b}: denoise={loss.denoise.item():g} "
                f"phys={loss.phys.item():g} recon={loss.recon.item():g}")
        if opt is not None:
            opt.zero_grad()
            loss.total.backward()
            opt.step()
        k = len(sel)
        totals += k * np.array([t.item() for t in loss])
        n += k
    return totals / max(n, 1)


def _optimizer(model, cfg):
    for p in model.encoder.parameters():
        p.requires_grad_(False)
    groups = [{"params": list(model.env_encoder.parameters()) + list(model.denoiser.parameters()),
               "scale": 1.0}]
    if cfg.freeze == "all":
        for p in model.decoder.parameters():
            p.requires_grad_(False)
    else:
        groups.append({"params": list(model.decoder.parameters()), "scale": cfg.decoder_lr_scale})
    return torch.optim.Adam(groups, lr=cfg.lr)


def train_stage2(dataset, stage1_ckpt, model_config=None, train_config=None, seed=0,
                 ckpt_path=None, stage1_hash=None, **config_overrides):
    """Train a :class:`Stage2Model` from a Stage-1 checkpoint.

    Returns ``(model, history, checkpoint_hash)``. The model keeps the weights
    of the epoch with the lowest validation denoise term. Validation noise is
    drawn from a fixed stream so epochs are compared on equal footing.
    """
    train_config = train_config or Stage2TrainConfig()
    if stage1_ckpt is None:
        raise ConfigurationError("stage-2 training needs a stage-1 checkpoint",
                                 code="missing_stage1")
    try:
        stage1, _, s1_hash = load_stage1(stage1_ckpt, stage1_hash)
    except CheckpointError as exc:
        if exc.code == "missing_checkpoint":
            raise ConfigurationError(str(exc), code="missing_stage1") from exc
        raise
    model_config = model_config or stage2_config_for(stage1, **config_overrides)
    train = _tensors(dataset, "train")
    if train is None:
        raise ValidationError("training split is empty", code="empty_dataset")
    val = _tensors(dataset, "val") or train

    torch.manual_seed(derive_seed(seed, "stage2", "init"))
    model = Stage2Model(model_config, stage1, s1_hash)
    model.fit_statistics(train[0], train[1], train[2])
    opt = _optimizer(model, train_config)
    shuffle = generator(seed, "stage2", "shuffle")
    noise = generator(seed, "stage2", "noise")
    history, best, best_val = [], None, float("inf")
    for epoch in range(train_config.epochs):
        lr = lr_at_epoch(epoch, train_config)
        for g in opt.param_groups:
            g["lr"] = lr * g["scale"]
        model.train()
        order = torch.randperm(len(train[0]), generator=shuffle)
        tr = _epoch_pass(model, train, train_config, noise, opt, order)
        model.eval()
        with torch.no_grad():
            va = _epoch_pass(model, val, train_config, generator(seed, "stage2", "val"))
        row = {"epoch": epoch + 1, "train_total": tr[0], "train_recon": tr[1],
               "train_phys": tr[2], "val_total": va[0], "val_denoise": va[1], "lr": lr}
        history.append(row)
        log.info("stage2 epoch %d %s", epoch + 1, row)
        if va[1] < best_val:
            best_val, best = va[1], (epoch + 1, copy.deepcopy(model.state_dict()))
    model.load_state_dict(best[1])
    model.eval()
    digest = None
    if ckpt_path is not None:
        digest = save_stage2(ckpt_path, model, seed=seed, epoch=best[0], history=history,
                             train_config=train_config)
    return model, history, digest


def save_stage2(path, model, seed=0, epoch=0, history=(), train_config=None):
    header = {
        "kind": "stage2",
        "config": model.config.to_dict(),
        "stage1_config": model.stage1_config.to_dict(),
        "stage1_hash": model.stage1_hash,
        "schedule": model.schedule.to_dict(),
        "seed": int(seed),
        "epoch": int(epoch),
        "history": list(history),
        "train_config": train_config.to_dict() if train_config else None,
    }
    return save_checkpoint(path, header, state_arrays(model))


def load_stage2(path, expected_hash=None):
    """Returns ``(model, header, sha256)``."""
    header, arrays, digest = load_checkpoint(path, expected_hash)
    if header.get("kind") != "stage2":
        raise CheckpointError(f"{path} is not a stage-2 checkpoint")
    cfg = Stage2Config.from_dict(header["config"])
    cfg.schedule = NoiseSchedule.from_dict(header["schedule"])
    model = Stage2Model(cfg, Stage1Model(Stage1Config.from_dict(header["stage1_config"])),
                        header.get("stage1_hash"))
    load_state(model, arrays)
    model.eval()
    return model, header, digest
