import copy
import csv
import json
import math

import numpy as np
import pytest

from stpad.dataset import DatasetSplitSpec, TrajectoryContainer, build_dataset
from stpad.diffusion.train import Stage2TrainConfig
from stpad.errors import StpadError, ValidationError
from stpad.evaluation import (
    VARIANTS,
    MetricReport,
    ablation_suite,
    evaluate_split,
    mean_metrics,
    rollout,
    variant_specs,
)
from stpad.field import GridSpec, PhysicalParams
from stpad.recon.layers import EncoderSpec, EvolutionSpec
from stpad.recon.model import Stage1Model
from stpad.recon.train import Stage1TrainConfig, stage1_config_for
from stpad.seeding import derive_seed
from stpad.simulate import SimulatorConfig, simulate_shallow_water


class Stub:
    """Forecaster returning ``last frame + step`` plus seed-dependent noise."""

    def __init__(self, input_len=4, output_len=4, step=0.0, noise=0.0):
        self.input_len, self.output_len = input_len, output_len
        self.step, self.noise = step, noise
        self.calls = 0

    def predict(self, window, params, seeds):
        self.calls += 1
        window = np.asarray(window, dtype=np.float64)
        last = window[:, -1:]
        ramp = self.step * np.arange(1, self.output_len + 1).reshape(1, -1, 1, 1, 1)
        out = np.repeat(last, self.output_len, axis=1) + ramp
        for b, s in enumerate(seeds):
            out[b] += self.noise * np.random.default_rng(s).normal(size=out[b].shape)
        return out


def window(b=2, t=4, seed=0):
    return np.random.default_rng(seed).normal(size=(b, t, 1, 4, 4))


@pytest.mark.parametrize("horizon,block,calls", [(4, 1, 4), (4, 2, 2), (4, 4, 1), (8, 4, 2)])
def test_autoregressive_call_count(horizon, block, calls):
    m = Stub()
    out = rollout(m, window(), [None] * 2, horizon, "autoregressive", [0, 1], block)
    assert m.calls == calls and out.shape == (2, horizon, 1, 4, 4)


def test_parallel_single_call():
    m = Stub()
    out = rollout(m, window(), [None] * 2, 3, "parallel", [0, 1])
    assert m.calls == 1 and out.shape[1] == 3


def test_persistence_oracle():
    w = window()
    out = rollout(Stub(), w, [None] * 2, 4, "autoregressive", [0, 1], block=1)
    assert np.array_equal(out, np.repeat(w[:, -1:], 4, axis=1))


def test_autoregressive_feeds_predictions_back():
    w = window()
    out = rollout(Stub(step=1.0), w, [None] * 2, 4, "autoregressive", [0, 1], block=1)
    expect = w[:, -1:] + np.arange(1, 5).reshape(1, -1, 1, 1, 1)
    assert np.allclose(out, expect, atol=1e-12)


def test_modes_agree_when_block_is_full_output():
    w = window()
    a = rollout(Stub(noise=0.1), w, [None] * 2, 4, "autoregressive", [3, 4], block=4)
    b = rollout(Stub(noise=0.1), w, [None] * 2, 4, "parallel", [3, 4])
    assert np.array_equal(a, b)


def test_per_call_seeds_differ():
    w = window()
    out = rollout(Stub(noise=1.0), w, [None] * 2, 2, "autoregressive", [3, 4], block=1)
    first = Stub(noise=1.0).predict(w, None, [derive_seed(3, "call", 0)])[0, 0]
    assert np.array_equal(out[0, 0], first)
    assert not np.allclose(out[0, 1] - out[0, 0], 0)


@pytest.mark.parametrize("kwargs", [
    dict(horizon=5, mode="parallel"),
    dict(horizon=3, mode="autoregressive", block=2),
    dict(horizon=4, mode="autoregressive", block=5),
    dict(horizon=0, mode="parallel"),
    dict(horizon=4, mode="beam"),
])
def test_rollout_rejects(kwargs):
    with pytest.raises(ValidationError):
        rollout(Stub(), window(), [None] * 2, seeds=[0, 1], **kwargs)


def test_window_length_checked():
    with pytest.raises(ValidationError):
        rollout(Stub(), window(t=3), [None] * 2, 4, "parallel", [0, 1])


def _container(arrays, params, splits, grid):
    entries = []
    for i, (a, p, s) in enumerate(zip(arrays, params, splits)):
        entries.append({"id": f"{i:05d}", "split": s, "params": p.to_dict(),
                        "shape": list(a.shape), "blob": f"traj_{i:05d}.f32",
                        "input_len": 4, "output_len": 4})
    return TrajectoryContainer({"grid": grid.to_dict(), "channels": ["h", "hu", "hv"],
                                "trajectories": entries},
                               {e["id"]: a for e, a in zip(entries, arrays)})


def test_stationary_shallow_water_report():
    g = GridSpec(nx=32, ny=32, dx=1 / 32, dy=1 / 32, dt=0.01, nt=8)
    p = PhysicalParams("shallow_water")
    U0 = np.stack([np.full((32, 32), 1.5), np.zeros((32, 32)), np.zeros((32, 32))])
    seq = simulate_shallow_water(SimulatorConfig(g, p, n_substeps=5), initial=U0)
    assert np.array_equal(seq.values, np.repeat(seq.values[:1], 8, axis=0))
    ds = _container([seq.values.astype(np.float32)], [p], ["test_id"], g)
    rep = evaluate_split(Stub(), ds, "test_id", "autoregressive", block=1)
    assert rep.metrics["mse"] == 0 and rep.metrics["mae"] == 0
    assert rep.metrics["ssim"] == 1.0 and rep.metrics["ms_ssim"] == 1.0
    assert rep.metrics["psnr"] == "inf"
    json.loads(rep.to_json())


@pytest.fixture(scope="module")
def tiny_ds():
    g = GridSpec(nx=16, ny=16, dx=1 / 16, dy=1 / 16, dt=0.01, nt=8)
    cfg = SimulatorConfig(g, PhysicalParams("diffusion2d", 0.03), n_substeps=10, seed=3)
    return build_dataset(DatasetSplitSpec(6, 2, 3, 3, input_len=4, output_len=4), cfg)


def test_report_independent_of_manifest_order(tiny_ds):
    shuffled = copy.deepcopy(tiny_ds)
    shuffled.manifest["trajectories"].reverse()
    a = evaluate_split(Stub(noise=0.1), tiny_ds, "test_ood", "parallel", seed=5)
    b = evaluate_split(Stub(noise=0.1), shuffled, "test_ood", "parallel", seed=5)
    assert a.to_json() == b.to_json()


def test_ood_bookkeeping(tiny_ds):
    rep = evaluate_split(Stub(), tiny_ds, "test_ood", "parallel")
    assert len(rep.params) == 3 and rep.n_windows == 3
    assert all(0.1 <= p["viscosity"] <= 0.2 for p in rep.params)
    rep = evaluate_split(Stub(), tiny_ds, "test_id", "parallel")
    assert all(0.01 <= p["viscosity"] <= 0.05 for p in rep.params)


def test_metric_consistency_and_psnr_range(tiny_ds):
    rep = evaluate_split(Stub(noise=0.05), tiny_ds, "test_id", "autoregressive", block=2)
    m = rep.metrics
    assert m["mae"] <= math.sqrt(m["mse"])
    assert m["psnr"] == pytest.approx(10 * math.log10(rep.max_value**2 / m["mse"]))
    assert m["ms_ssim"] is None  # 16x16 frames are below the multi-scale minimum
    assert len(rep.per_frame["mse"]) == 4
    assert np.mean(rep.per_frame["mse"]) == pytest.approx(m["mse"])


def test_empty_split(tiny_ds):
    ds = copy.deepcopy(tiny_ds)
    ds.manifest["trajectories"] = [e for e in ds.entries() if e["split"] != "test_ood"]
    with pytest.raises(ValidationError) as exc:
        evaluate_split(Stub(), ds, "test_ood", "parallel")
    assert exc.value.code == "empty_split"


def test_report_roundtrip_and_name(tiny_ds, tmp_path):
    rep = evaluate_split(Stub(), tiny_ds, "test_id", "parallel", seed=2,
                         checkpoint_hash="abcdef0123456789")
    path = rep.write(tmp_path)
    assert path.name == "report_parallel_test_id_seed2_abcdef012345.json"
    back = MetricReport.from_dict(json.loads(path.read_text()))
    assert back.to_json() == rep.to_json()


def test_mean_metrics(tiny_ds):
    reps = [evaluate_split(Stub(noise=0.1), tiny_ds, "test_id", "parallel", seed=s)
            for s in (0, 1)]
    m = mean_metrics(reps)
    assert m["mse"] == pytest.approx((reps[0].metrics["mse"] + reps[1].metrics["mse"]) / 2)


def test_variant_table_order():
    specs = variant_specs()
    assert tuple(v.name for v in specs) == VARIANTS
    assert len(specs) == 4
    by = {v.name: v for v in specs}
    assert by["w/o Parameter"].stage1_key == by["full"].stage1_key
    assert by["w/o Physical"].stage1_overrides["phys_weight"] == 0
    assert by["w/o Physical"].stage2_overrides["phys_reg_weight"] == 0


def test_without_evolution_has_fewer_parameters(tiny_ds):
    enc = EncoderSpec(n_blocks=1, channels=[4], downsample_factors=[2], norm_groups=2)
    evo = EvolutionSpec(n_levels=1, fourier_modes=1, spectral_channels=4)
    full = Stage1Model(stage1_config_for(tiny_ds, encoder=enc, evolution=evo, codebook_size=8))
    noevo = Stage1Model(stage1_config_for(tiny_ds, encoder=enc, evolution=evo, codebook_size=8,
                                          use_evolution=False))
    assert noevo.n_trainable() < full.n_trainable()


def _tiny_ablation(ds, tmp_path, **kw):
    cfg1 = stage1_config_for(
        ds, encoder=EncoderSpec(n_blocks=1, channels=[4], downsample_factors=[2], norm_groups=2),
        evolution=EvolutionSpec(n_levels=1, fourier_modes=1, spectral_channels=4),
        codebook_size=8)
    over = dict(d_env=8, env_width=8, d_time=8, hidden=8, n_res_blocks=1)
    return ablation_suite(ds, cfg1, Stage1TrainConfig(epochs=1, batch_size=4), over,
                          Stage2TrainConfig(epochs=1, batch_size=4), [0], tmp_path, **kw)


def test_ablation_table(tiny_ds, tmp_path):
    res = _tiny_ablation(tiny_ds, tmp_path)
    assert [r["variant"] for r in res.rows] == list(VARIANTS)
    assert not res.errors
    path = res.write_csv(tmp_path / "ablation.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["variant", "test_id_mse", "test_id_ssim", "test_ood_mse", "test_ood_ssim"]
    assert len(rows) == 5
    assert res.n_trainable["w/o Evolution"]["stage1"] < res.n_trainable["full"]["stage1"]
    # the parameter-free variant reuses the full Stage-1 checkpoint
    assert sorted(p.name for p in (tmp_path / "seed0").glob("stage1_*")) == [
        "stage1_full.ckpt", "stage1_noevo.ckpt", "stage1_nophys.ckpt"]


def test_ablation_records_failed_variant(tiny_ds, tmp_path, monkeypatch):
    import stpad.diffusion.train as t2

    real = t2.train_stage2

    def flaky(*args, **kw):
        if kw.get("use_params") is False:
            raise StpadError("boom", code="injected")
        return real(*args, **kw)

    monkeypatch.setattr(t2, "train_stage2", flaky)
    res = _tiny_ablation(tiny_ds, tmp_path, variants=("full", "w/o Parameter"))
    assert list(res.errors) == ["w/o Parameter"]
    row = res.rows[1]
    assert math.isnan(row["test_id_mse"]) and not math.isnan(res.rows[0]["test_id_mse"])
    assert "nan" in (res.write_csv(tmp_path / "a.csv")).read_text()
