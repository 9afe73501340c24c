"""Consolidate metric report JSONs into one table and per-frame error plots."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from stpad.errors import ValidationError

COLUMNS = ["file", "split", "rollout_mode", "seed", "checkpoint_hash",
           "mse", "mae", "psnr", "ssim", "ms_ssim"]


def find_reports(root):
    return sorted(p for p in Path(root).rglob("report_*.json") if p.is_file())


def consolidate(root, plots=True):
    """Write ``summary.csv``/``summary.json`` (and PNG curves) under ``root/report``."""
    root = Path(root)
    paths = find_reports(root)
    if not paths:
        raise ValidationError(f"no metric reports under {root}", code="nothing_to_report")
    rows, curves = [], {}
    for p in paths:
        d = json.loads(p.read_text())
        m = d["metrics"]
        rows.append({"file": str(p.relative_to(root)), "split": d["split"],
                     "rollout_mode": d["rollout_mode"], "seed": d["seed"],
                     "checkpoint_hash": d["checkpoint_hash"],
                     **{k: m.get(k) for k in ("mse", "mae", "psnr", "ssim", "ms_ssim")}})
        curves.setdefault((d["split"], d["rollout_mode"]), []).append(d["per_frame"]["mse"])
    out = root / "report"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        w.writerows(rows)
    (out / "summary.json").write_text(json.dumps(rows, sort_keys=True, indent=2))
    images = _plot(curves, out) if plots else []
    return {"summary": str(out / "summary.csv"), "n_reports": len(rows), "plots": images}


def _plot(curves, out):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    images = []
    for split in sorted({s for s, _ in curves}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for (s, mode), runs in sorted(curves.items()):
            if s != split:
                continue
            arr = np.asarray(runs, dtype=float)
            lead = np.arange(1, arr.shape[1] + 1)
            ax.plot(lead, arr.mean(0), marker="o", label=mode)
        ax.set_xlabel("lead frame")
        ax.set_ylabel("MSE")
        ax.set_title(split)
        ax.legend()
        fig.tight_layout()
        path = out / f"error_curve_{split}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        images.append(str(path))
    return images
