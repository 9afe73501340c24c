"""``stpad`` command line entry point.

Exit codes: 0 success, 2 validation or missing input, 3 numerical failure.
Errors are reported on stderr as one JSON object ``{"error": code, "message": ...}``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import pydantic

from stpad.errors import StpadError, ValidationError

log = logging.getLogger("stpad")

LOSS_COLUMNS = ["epoch", "train_total", "train_recon", "train_phys", "val_total"]


def _out_root(args, cfg):
    return Path(args.out or os.environ.get("STPAD_OUT") or cfg.out_dir or "stpad_out")


def _load(args):
    from stpad.config import load_config
    from stpad.seeding import set_deterministic

    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        raise ValidationError(f"config file {args.config} not found", code="missing_input") from exc
    except pydantic.ValidationError as exc:
        for err in exc.errors():
            inner = (err.get("ctx") or {}).get("error")
            if isinstance(inner, StpadError):
                raise inner from exc
        raise ValidationError(str(exc), code="invalid_config") from exc
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
        cfg = type(cfg).model_validate(cfg.model_dump())
    if args.deterministic:
        set_deterministic(True)
        args.jobs = 1
    out = _out_root(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(cfg.resolved_json())
    return cfg, out


def _write_loss_csv(path, history):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in LOSS_COLUMNS[1:]])


def _dataset(out):
    from stpad.dataset import read_container

    path = out / "data"
    if not (path / "manifest.json").exists():
        raise ValidationError(f"no dataset at {path}; run `stpad generate` first",
                              code="missing_input")
    return read_container(path)


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def cmd_generate(args):
    from stpad.dataset import build_dataset

    cfg, out = _load(args)
    build_dataset(cfg.split_spec(), cfg.simulator_config(), out / "data", jobs=args.jobs)
    _emit({"manifest": str(out / "data" / "manifest.json")})


def cmd_train_recon(args):
    from stpad.recon.train import train_stage1

    cfg, out = _load(args)
    ds = _dataset(out)
    path = out / "stage1" / "stage1.ckpt"
    _, history, digest = train_stage1(ds, cfg.stage1_config(ds), cfg.stage1_train(),
                                      seed=cfg.stream("stage1"), ckpt_path=path)
    _write_loss_csv(out / "stage1" / "loss.csv", history)
    best = min(history, key=lambda r: r["val_total"])
    _emit({"checkpoint": str(path), "sha256": digest, "best_epoch": best["epoch"],
           "val_total": best["val_total"], "val_recon": best["val_recon"]})


def cmd_train_diffusion(args):
    from stpad.diffusion.train import train_stage2

    cfg, out = _load(args)
    s1 = Path(args.stage1) if args.stage1 else out / "stage1" / "stage1.ckpt"
    if not s1.exists():
        raise ValidationError(f"stage-1 checkpoint {s1} not found", code="missing_stage1")
    ds = _dataset(out)
    path = out / "stage2" / "stage2.ckpt"
    _, history, digest = train_stage2(ds, s1, train_config=cfg.stage2_train(),
                                      seed=cfg.stream("stage2"), ckpt_path=path,
                                      **cfg.stage2_overrides())
    _write_loss_csv(out / "stage2" / "loss.csv", history)
    best = min(history, key=lambda r: r["val_denoise"])
    _emit({"checkpoint": str(path), "sha256": digest, "best_epoch": best["epoch"],
           "val_total": best["val_total"], "val_denoise": best["val_denoise"]})


def cmd_evaluate(args):
    from stpad.diffusion.train import load_stage2
    from stpad.evaluation import evaluate_split
    from stpad.seeding import derive_seed

    cfg, out = _load(args)
    ckpt = Path(args.ckpt) if args.ckpt else out / "stage2" / "stage2.ckpt"
    if not ckpt.exists():
        raise ValidationError(f"checkpoint {ckpt} not found", code="missing_checkpoint")
    ds = _dataset(out)
    model, _, digest = load_stage2(ckpt)
    written = []
    for mode in cfg.eval.modes:
        for split in ("test_id", "test_ood"):
            for seed in cfg.eval.seeds:
                rep = evaluate_split(model, ds, split, mode,
                                     seed=derive_seed(cfg.stream("eval"), seed),
                                     block=cfg.eval.ar_block if mode == "autoregressive" else None,
                                     checkpoint_hash=digest)
                rep.seed = seed
                written.append(str(rep.write(out / "eval")))
    _emit({"reports": written})


def cmd_ablate(args):
    from stpad.evaluation import ablation_suite

    cfg, out = _load(args)
    ds = _dataset(out)
    res = ablation_suite(ds, cfg.stage1_config(ds), cfg.stage1_train(), cfg.stage2_overrides(),
                         cfg.stage2_train(), cfg.eval.seeds, out / "ablation" / "work",
                         rollout_mode=cfg.eval.ablation_mode,
                         block=cfg.eval.ar_block if cfg.eval.ablation_mode == "autoregressive"
                         else None)
    path = res.write_csv(out / "ablation" / "ablation.csv")
    (out / "ablation" / "ablation.json").write_text(res.to_json())
    _emit({"table": str(path), "rows": res.rows, "errors": res.errors})


def cmd_report(args):
    from stpad.report import consolidate

    out = Path(args.out or os.environ.get("STPAD_OUT") or "stpad_out")
    result = consolidate(out, plots=not args.no_plots)
    _emit(result)


COMMANDS = {
    "generate": cmd_generate,
    "train-recon": cmd_train_recon,
    "train-diffusion": cmd_train_diffusion,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON); defaults if omitted")
    common.add_argument("--out", help="output directory (default: $STPAD_OUT or ./stpad_out)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers for data generation")
    common.add_argument("--deterministic", action="store_true",
                        help="deterministic kernels, one thread, jobs=1")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stpad", description="latent diffusion PDE forecaster")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train-diffusion":
            p.add_argument("--stage1", help="stage-1 checkpoint (default: OUT/stage1/stage1.ckpt)")
        if name == "evaluate":
            p.add_argument("--ckpt", help="stage-2 checkpoint (default: OUT/stage2/stage2.ckpt)")
        if name == "report":
            p.add_argument("--no-plots", action="store_true", help="skip the PNG error curves")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except StpadError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
