"""Rollout protocols, split evaluation and the four-variant ablation suite."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stpad import metrics
from stpad.errors import StpadError, ValidationError
from stpad.seeding import derive_seed

log = logging.getLogger(__name__)

MODES = ("autoregressive", "parallel")
VARIANTS = ("full", "w/o Physical", "w/o Evolution", "w/o Parameter")
METRIC_NAMES = ("mse", "mae", "psnr", "ssim", "ms_ssim")


def rollout(model, window, params, horizon, mode, seeds, block=None):
    """Forecast ``horizon`` frames after ``window`` (B, I, c, h, w).

    ``model`` needs ``input_len``, ``output_len`` and
    ``predict(window, params, seeds) -> (B, output_len, c, h, w)``.

    ``parallel`` makes one call and keeps the first ``horizon`` frames.
    ``autoregressive`` keeps the first ``block`` frames of each call (default:
    the whole output block), appends them to the conditioning window and drops
    the oldest frames. Call ``k`` of chain ``b`` draws from the seed
    ``derive_seed(seeds[b], "call", k)``, so a single-call autoregressive
    rollout and a parallel rollout coincide.
    """
    if mode not in MODES:
        raise ValidationError(f"rollout mode must be one of {MODES}, got {mode!r}")
    if horizon < 1:
        raise ValidationError(f"horizon must be >= 1, got {horizon}")
    window = np.asarray(window)
    if window.shape[1] != model.input_len:
        raise ValidationError(f"window has {window.shape[1]} frames, model expects "
                              f"{model.input_len}")
    o = model.output_len

    def call(win, k):
        return np.asarray(model.predict(win, params, [derive_seed(s, "call", k) for s in seeds]))

    if mode == "parallel":
        if horizon > o:
            raise ValidationError(f"parallel horizon {horizon} exceeds the output block {o}")
        return call(window, 0)[:, :horizon]
    block = o if block is None else block
    if not 1 <= block <= o:
        raise ValidationError(f"autoregressive block must lie in 1..{o}, got {block}")
    if horizon % block:
        raise ValidationError(f"horizon {horizon} is not a multiple of the block {block}")
    preds, win = [], window
    for k in range(horizon // block):
        out = call(win, k)[:, :block]
        preds.append(out)
        win = np.concatenate([win, out], axis=1)[:, -model.input_len:]
    return np.concatenate(preds, axis=1)


@dataclass
class MetricReport:
    split: str
    rollout_mode: str
    seed: int
    checkpoint_hash: str | None
    metrics: dict
    per_frame: dict
    max_value: float
    ids: list
    params: list
    n_windows: int
    horizon: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "split": self.split, "rollout_mode": self.rollout_mode, "seed": self.seed,
            "checkpoint_hash": self.checkpoint_hash, "metrics": self.metrics,
            "per_frame": self.per_frame, "max_value": self.max_value, "ids": self.ids,
            "params": self.params, "n_windows": self.n_windows, "horizon": self.horizon,
            "extra": self.extra,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def file_name(self):
        h = (self.checkpoint_hash or "nohash")[:12]
        return f"report_{self.rollout_mode}_{self.split}_seed{self.seed}_{h}.json"

    def write(self, out_dir):
        path = Path(out_dir) / self.file_name()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


def _frame_metrics(pred, truth, max_value):
    """Metric dict over arrays shaped (n, t, c, h, w)."""
    m = {"mse": metrics.mse(pred, truth), "mae": metrics.mae(pred, truth)}
    m["psnr"] = metrics.psnr_from_mse(m["mse"], max_value)
    m["ssim"] = metrics.ssim(pred, truth, data_range=max_value)
    m["ms_ssim"] = (metrics.ms_ssim(pred, truth, data_range=max_value)
                    if min(truth.shape[-2:]) >= 32 else None)
    return m


def evaluate_split(model, dataset, split, rollout_mode, seed=0, horizon=None, block=None,
                   checkpoint_hash=None):
    """Roll out every window of ``split`` and aggregate metrics.

    Trajectories are visited in id order and each draws from a seed derived
    from ``(seed, id)``, so the report does not depend on manifest order. PSNR
    uses the global value range of the split's ground truth as MAX.
    """
    entries = sorted(dataset.entries(split), key=lambda e: e["id"])
    if not entries:
        raise ValidationError(f"split {split!r} is empty", code="empty_split")
    horizon = horizon or model.output_len
    wins, truths, params, seeds = [], [], [], []
    for e in entries:
        arr = dataset.arrays[e["id"]]
        i_len = model.input_len
        step = i_len + horizon
        for k, s in enumerate(range(0, arr.shape[0] - step + 1, step)):
            wins.append(arr[s:s + i_len])
            truths.append(arr[s + i_len:s + step])
            params.append(dataset.params(e))
            seeds.append(derive_seed(seed, "eval", e["id"], k))
    if not wins:
        raise ValidationError(f"trajectories in {split!r} are shorter than one window")
    truth = np.stack(truths).astype(np.float64)
    pred = rollout(model, np.stack(wins), params, horizon, rollout_mode, seeds,
                   block).astype(np.float64)
    max_value = metrics.data_range_of(truth)
    agg = _frame_metrics(pred, truth, max_value)
    if agg["mae"] > math.sqrt(agg["mse"]) * (1 + 1e-12):
        raise StpadError("mae exceeds sqrt(mse)", code="metric_inconsistency")
    per_frame = {"mse": [], "mae": [], "ssim": []}
    for t in range(horizon):
        per_frame["mse"].append(metrics.mse(pred[:, t], truth[:, t]))
        per_frame["mae"].append(metrics.mae(pred[:, t], truth[:, t]))
        per_frame["ssim"].append(metrics.ssim(pred[:, t], truth[:, t], data_range=max_value))
    return MetricReport(
        split=split, rollout_mode=rollout_mode, seed=int(seed),
        checkpoint_hash=checkpoint_hash, metrics=agg, per_frame=per_frame,
        max_value=max_value, ids=[e["id"] for e in entries],
        params=[e["params"] for e in entries], n_windows=len(wins), horizon=horizon,
        extra={"block": block if rollout_mode == "autoregressive" else None},
    )


def mean_metrics(reports):
    """Average each metric over reports; psnr is recomputed from the mean mse."""
    out = {}
    for name in ("mse", "mae", "ssim", "ms_ssim"):
        vals = [r.metrics[name] for r in reports if r.metrics.get(name) is not None]
        out[name] = float(np.mean(vals)) if vals else None
    mv = float(np.mean([r.max_value for r in reports]))
    out["psnr"] = metrics.psnr_from_mse(out["mse"], mv) if out["mse"] is not None else None
    return out


# -- ablation -----------------------------------------------------------------


@dataclass
class VariantSpec:
    name: str
    stage1_overrides: dict
    stage2_overrides: dict
    stage1_key: str


def variant_specs():
    """The four ablation variants in table order.

    ``stage1_key`` names the Stage-1 model a variant trains on; variants with
    the same key share one Stage-1 run.
    """
    return [
        VariantSpec("full", {}, {}, "full"),
        VariantSpec("w/o Physical", {"phys_weight": 0.0}, {"phys_reg_weight": 0.0}, "nophys"),
        VariantSpec("w/o Evolution", {"use_evolution": False}, {}, "noevo"),
        VariantSpec("w/o Parameter", {}, {"use_params": False}, "full"),
    ]


@dataclass
class AblationResult:
    rows: list
    per_seed: dict
    errors: dict
    n_trainable: dict

    def table(self):
        return self.rows

    def write_csv(self, path):
        cols = ["variant", "test_id_mse", "test_id_ssim", "test_ood_mse", "test_ood_ssim"]
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.rows:
                w.writerow([row["variant"]] + [_fmt(row[c]) for c in cols[1:]])
        return path

    def to_json(self):
        return json.dumps({"rows": self.rows, "per_seed": self.per_seed, "errors": self.errors,
                           "n_trainable": self.n_trainable}, sort_keys=True, indent=2)


def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def ablation_suite(dataset, stage1_config, stage1_train, stage2_overrides, stage2_train, seeds,
                   work_dir, variants=VARIANTS, rollout_mode="parallel", block=None):
    """Train and evaluate each variant under identical seeds and budgets.

    A variant that fails to train is recorded in ``errors`` and gets NaN
    entries; the remaining variants still run.
    """
    from stpad.diffusion.train import train_stage2
    from stpad.recon.train import train_stage1

    work_dir = Path(work_dir)
    specs = [v for v in variant_specs() if v.name in variants]
    per_seed = {v.name: {"test_id": [], "test_ood": []} for v in specs}
    errors, n_trainable = {}, {}
    for seed in seeds:
        stage1_cache = {}
        for v in specs:
            try:
                if v.stage1_key not in stage1_cache:
                    cfg1 = stage1_config.__class__.from_dict(
                        {**stage1_config.to_dict(), **v.stage1_overrides})
                    path1 = work_dir / f"seed{seed}" / f"stage1_{v.stage1_key}.ckpt"
                    m1, _, h1 = train_stage1(dataset, cfg1, stage1_train,
                                             seed=derive_seed(seed, "stage1"), ckpt_path=path1)
                    stage1_cache[v.stage1_key] = (path1, h1, m1.n_trainable())
                path1, h1, n1 = stage1_cache[v.stage1_key]
                slug = v.name.replace("/", "").replace(" ", "_")
                path2 = work_dir / f"seed{seed}" / f"stage2_{slug}.ckpt"
                m2, _, h2 = train_stage2(
                    dataset, path1, train_config=stage2_train, seed=derive_seed(seed, "stage2"),
                    ckpt_path=path2, stage1_hash=h1, **{**stage2_overrides, **v.stage2_overrides})
                n_trainable[v.name] = {"stage1": n1, "stage2": m2.n_trainable()}
                for split in ("test_id", "test_ood"):
                    rep = evaluate_split(m2, dataset, split, rollout_mode,
                                         seed=derive_seed(seed, "eval"), block=block,
                                         checkpoint_hash=h2)
                    per_seed[v.name][split].append(rep.metrics)
            except StpadError as exc:
                log.error("variant %s seed %s failed: %s", v.name, seed, exc)
                errors.setdefault(v.name, []).append({"seed": seed, "error": str(exc)})
                for split in ("test_id", "test_ood"):
                    per_seed[v.name][split].append(None)
    rows = []
    for v in specs:
        row = {"variant": v.name}
        for split in ("test_id", "test_ood"):
            ok = [m for m in per_seed[v.name][split] if m is not None]
            for name in ("mse", "ssim"):
                row[f"{split}_{name}"] = float(np.mean([m[name] for m in ok])) if ok else float("nan")
        rows.append(row)
    return AblationResult(rows=rows, per_seed=per_seed, errors=errors, n_trainable=n_trainable)
