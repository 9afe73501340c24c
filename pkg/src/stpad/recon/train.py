"""Self-supervised Stage-1 training on concatenated input+target windows."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from stpad.checkpoint import load_checkpoint, load_state, save_checkpoint, state_arrays
from stpad.errors import CheckpointError, NumericalError, ValidationError
from stpad.recon.layers import EncoderSpec, EvolutionSpec
from stpad.recon.model import Stage1Config, Stage1Model, stage1_loss
from stpad.seeding import generator

log = logging.getLogger(__name__)


@dataclass
class Stage1TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_step: int = 100
    batch_size: int = 10
    epochs: int = 50
    reseed_dead_codes: bool = True

    def to_dict(self):
        return asdict(self)


def lr_at_epoch(epoch, cfg):
    """Learning rate used during 0-indexed ``epoch`` (step decay)."""
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_step)


def reconstruction_windows(dataset, split):
    """(n, input_len + output_len, c, h, w) float32 tensor and per-window params."""
    x, y, params = dataset.windows(split)
    if x is None:
        return None, []
    return torch.from_numpy(np.concatenate([x, y], axis=1)), params


def stage1_config_for(dataset, **overrides):
    """Stage-1 model config matching the window shape of ``dataset``."""
    e = dataset.entries()[0]
    t = e["input_len"] + e["output_len"]
    shape = (t, *e["shape"][1:])
    kwargs = dict(input_shape=shape, grid=dataset.grid,
                  pde_kind=e["params"]["pde_kind"])
    for key in ("encoder", "evolution"):
        if isinstance(overrides.get(key), dict):
            overrides[key] = (EncoderSpec if key == "encoder" else EvolutionSpec)(**overrides[key])
    kwargs.update(overrides)
    return Stage1Config(**kwargs)


def _epoch_pass(model, data, params, cfg, opt=None, order=None):
    totals = np.zeros(3)
    n = 0
    idx = order if order is not None else torch.arange(len(data))
    for b, start in enumerate(range(0, len(data), cfg.batch_size)):
        sel = idx[start:start + cfg.batch_size]
        x = data[sel]
        loss = stage1_loss(x, model, [params[i] for i in sel.tolist()])
        if not torch.isfinite(loss.total):
            lr = opt.param_groups[0]["lr"] if opt else float("nan")
            raise NumericalError(
                f"non-finite stage-1 loss at batch {b} (lr={lr:g})")
        if opt is not None:
            opt.zero_grad()
            loss.total.backward()
            opt.step()
        k = len(sel)
        totals += k * np.array([loss.total.item(), loss.recon_mse.item(), loss.phys.item()])
        n += k
    return totals / max(n, 1)


def train_stage1(dataset, model_config=None, train_config=None, seed=0, ckpt_path=None):
    """Train a :class:`Stage1Model`; returns ``(model, history, checkpoint_hash)``.

    The returned model carries the best-validation weights. ``history`` has one
    dict per epoch with train_total, train_recon, train_phys, val_total,
    val_recon and lr.
    """
    train_config = train_config or Stage1TrainConfig()
    model_config = model_config or stage1_config_for(dataset)
    data, params = reconstruction_windows(dataset, "train")
    if data is None or len(data) == 0:
        raise ValidationError("training split is empty", code="empty_dataset")
    vdata, vparams = reconstruction_windows(dataset, "val")
    if vdata is None:
        vdata, vparams = data, params

    torch.manual_seed(seed)
    model = Stage1Model(model_config)
    opt = torch.optim.Adam(model.parameters(), lr=train_config.lr)
    shuffle = generator(seed, "shuffle")
    reseed = generator(seed, "reseed")
    history, best, best_val = [], None, float("inf")
    for epoch in range(train_config.epochs):
        lr = lr_at_epoch(epoch, train_config)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        order = torch.randperm(len(data), generator=shuffle)
        tr = _epoch_pass(model, data, params, train_config, opt, order)
        if train_config.reseed_dead_codes:
            with torch.no_grad():
                sample = data[order[: 4 * train_config.batch_size]]
                model.codebook.reseed_dead(model.tokens(sample), reseed)
        model.eval()
        with torch.no_grad():
            va = _epoch_pass(model, vdata, vparams, train_config)
        row = {"epoch": epoch + 1, "train_total": tr[0], "train_recon": tr[1],
               "train_phys": tr[2], "val_total": va[0], "val_recon": va[1], "lr": lr}
        history.append(row)
        log.info("stage1 epoch %d %s", epoch + 1, row)
        if va[0] < best_val:
            best_val, best = va[0], (epoch + 1, copy.deepcopy(model.state_dict()))
    model.load_state_dict(best[1])
    model.eval()
    digest = None
    if ckpt_path is not None:
        digest = save_stage1(ckpt_path, model, seed=seed, epoch=best[0], history=history,
                             train_config=train_config)
    return model, history, digest


def save_stage1(path, model, seed=0, epoch=0, history=(), train_config=None):
    header = {
        "kind": "stage1",
        "config": model.config.to_dict(),
        "seed": int(seed),
        "epoch": int(epoch),
        "history": list(history),
        "train_config": train_config.to_dict() if train_config else None,
    }
    return save_checkpoint(path, header, state_arrays(model))


def load_stage1(path, expected_hash=None):
    """Returns ``(model, header, sha256)``."""
    header, arrays, digest = load_checkpoint(path, expected_hash)
    if header.get("kind") != "stage1":
        raise CheckpointError(f"{path} is not a stage-1 checkpoint", code="missing_stage1")
    model = Stage1Model(Stage1Config.from_dict(header["config"]))
    load_state(model, arrays)
    model.eval()
    return model, header, digest
