"""Trajectory datasets: ID/OOD parameter sweeps and the on-disk container.

Layout of a container directory::

    <dir>/manifest.json      # format_version, grid, channels, trajectories[]
    <dir>/traj_<id>.f32      # raw little-endian float32, (t, c, h, w) row-major
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from stpad.errors import (
    ContainerError,
    SchemaError,
    ShapeMismatchError,
    SimulationError,
    TruncatedBlobError,
    ValidationError,
)
from stpad.field import CHANNELS, GridSpec, PhysicalParams
from stpad.simulate import SimulatorConfig, simulate

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test_id", "test_ood")
MAX_RESAMPLES = 3

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format_version", "grid", "channels", "trajectories"],
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "grid": {
            "type": "object",
            "required": ["nx", "ny", "dx", "dy", "dt", "nt"],
        },
        "channels": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "trajectories": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "split", "params", "shape", "blob", "input_len", "output_len"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "split": {"enum": list(SPLITS)},
                    "params": {
                        "type": "object",
                        "required": ["pde_kind", "viscosity"],
                    },
                    "shape": {
                        "type": "array",
                        "items": {"type": "integer", "minimum": 1},
                        "minItems": 4,
                        "maxItems": 4,
                    },
                    "blob": {"type": "string", "pattern": r"^traj_.+\.f32$"},
                    "input_len": {"type": "integer", "minimum": 1},
                    "output_len": {"type": "integer", "minimum": 1},
                },
            },
        },
    },
}


@dataclass
class DatasetSplitSpec:
    n_train: int = 4
    n_val: int = 1
    n_test_id: int = 1
    n_test_ood: int = 1
    id_param_range: dict = field(default_factory=lambda: {"viscosity": (0.01, 0.05)})
    ood_param_range: dict = field(default_factory=lambda: {"viscosity": (0.1, 0.2)})
    input_len: int = 12
    output_len: int = 12

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test_id", "n_test_ood"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.input_len < 1 or self.output_len < 1:
            raise ValidationError("input_len and output_len must be >= 1")
        self.id_param_range = {k: tuple(map(float, v)) for k, v in self.id_param_range.items()}
        self.ood_param_range = {k: tuple(map(float, v)) for k, v in self.ood_param_range.items()}
        for ranges in (self.id_param_range, self.ood_param_range):
            for k, (lo, hi) in ranges.items():
                if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                    raise ValidationError(f"invalid range for {k!r}: ({lo}, {hi})")
        if set(self.id_param_range) != set(self.ood_param_range):
            raise ValidationError("id and ood ranges must name the same parameters")
        if not any(_disjoint(self.id_param_range[k], self.ood_param_range[k])
                   for k in self.id_param_range):
            raise ValidationError("OOD parameter range overlaps the ID range for every parameter",
                                  code="ood_overlap")

    def count(self, split):
        return getattr(self, f"n_{split}")

    def to_dict(self):
        return {
            "n_train": self.n_train, "n_val": self.n_val,
            "n_test_id": self.n_test_id, "n_test_ood": self.n_test_ood,
            "id_param_range": {k: list(v) for k, v in self.id_param_range.items()},
            "ood_param_range": {k: list(v) for k, v in self.ood_param_range.items()},
            "input_len": self.input_len, "output_len": self.output_len,
        }


def _disjoint(a, b):
    return a[1] < b[0] or b[1] < a[0]


@dataclass
class TrajectoryContainer:
    manifest: dict
    arrays: dict

    @property
    def grid(self):
        return GridSpec.from_dict(self.manifest["grid"])

    @property
    def channels(self):
        return list(self.manifest["channels"])

    def entries(self, split=None):
        return [e for e in self.manifest["trajectories"] if split is None or e["split"] == split]

    def params(self, entry):
        return PhysicalParams.from_dict(entry["params"])

    def windows(self, split, stride=None):
        """Cut every trajectory of ``split`` into (input, target) windows.

        Returns ``(inputs, targets, params)`` with ``inputs`` of shape
        (n, input_len, c, h, w), ``targets`` (n, output_len, c, h, w) and one
        :class:`PhysicalParams` per window. ``stride`` defaults to the window
        length, so windows do not overlap.
        """
        xs, ys, ps = [], [], []
        for e in self.entries(split):
            arr = self.arrays[e["id"]]
            i_len, o_len = e["input_len"], e["output_len"]
            step = stride or (i_len + o_len)
            p = self.params(e)
            for s in range(0, arr.shape[0] - i_len - o_len + 1, step):
                xs.append(arr[s:s + i_len])
                ys.append(arr[s + i_len:s + i_len + o_len])
                ps.append(p)
        if not xs:
            return None, None, []
        return np.stack(xs), np.stack(ys), ps


def validate_manifest(manifest):
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"manifest schema violation: {exc.message}") from None
    ids = [e["id"] for e in manifest["trajectories"]]
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate trajectory ids in manifest")


def write_container(container, path):
    path = Path(path)
    validate_manifest(container.manifest)
    path.mkdir(parents=True, exist_ok=True)
    for e in container.manifest["trajectories"]:
        arr = np.ascontiguousarray(container.arrays[e["id"]], dtype="<f4")
        if list(arr.shape) != list(e["shape"]):
            raise ShapeMismatchError(
                f"trajectory {e['id']}: array shape {arr.shape} != manifest shape {e['shape']}")
        _atomic_write(path / e["blob"], arr.tobytes())
    text = json.dumps(container.manifest, indent=2, sort_keys=True) + "\n"
    _atomic_write(path / "manifest.json", text.encode())


def _atomic_write(target, data):
    tmp = target.with_name(target.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, target)


def read_container(path):
    """Load and cross-check a container written by :func:`write_container`."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise ContainerError(f"no manifest.json under {path}", code="missing_input")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {exc}") from None
    validate_manifest(manifest)
    arrays = {}
    for e in manifest["trajectories"]:
        bpath = path / e["blob"]
        if not bpath.exists():
            raise TruncatedBlobError(f"trajectory {e['id']}: blob {e['blob']} is missing")
        raw = bpath.read_bytes()
        expected = int(np.prod(e["shape"])) * 4
        if len(raw) % 4:
            raise TruncatedBlobError(
                f"truncated blob for trajectory {e['id']}: {len(raw)} bytes is not a "
                f"whole number of float32 values")
        if len(raw) != expected:
            raise ShapeMismatchError(
                f"shape mismatch for trajectory {e['id']}: manifest shape {e['shape']} needs "
                f"{expected} bytes, blob has {len(raw)}")
        arrays[e["id"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
    return TrajectoryContainer(manifest=manifest, arrays=arrays)


def _sample_params(rng, base, ranges):
    updates = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in sorted(ranges.items())}
    return base.replace(**updates)


def _simulate_one(job):
    """Worker: simulate one trajectory, resampling parameters on failure."""
    index, split, base_cfg, ranges, seed = job
    rng = np.random.default_rng([seed, index])
    failures = []
    for attempt in range(MAX_RESAMPLES + 1):
        params = _sample_params(rng, base_cfg.params, ranges)
        sim_seed = int(rng.integers(0, 2**63))
        try:
            seq = simulate(base_cfg.with_params(params, seed=sim_seed))
        except SimulationError as exc:
            failures.append({"index": index, "attempt": attempt, "error": str(exc)})
            continue
        return index, split, params, seq.values, failures
    raise SimulationError(
        f"trajectory {index} ({split}) failed after {MAX_RESAMPLES} resamples: "
        f"{failures[-1]['error']}")


def build_dataset(split, base_cfg, out_path=None, jobs=1):
    """Simulate every trajectory of ``split`` and (optionally) write the container."""
    g = base_cfg.grid
    if split.input_len + split.output_len > g.nt:
        raise ValidationError(
            f"input_len + output_len = {split.input_len + split.output_len} exceeds nt = {g.nt}")
    jobs_list = []
    index = 0
    for name in SPLITS:
        ranges = split.ood_param_range if name == "test_ood" else split.id_param_range
        for _ in range(split.count(name)):
            jobs_list.append((index, name, base_cfg, ranges, int(base_cfg.seed)))
            index += 1
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_simulate_one, jobs_list))
    else:
        results = [_simulate_one(j) for j in jobs_list]

    entries, arrays, failures = [], {}, []
    for idx, name, params, values, fails in results:
        if not np.all(np.isfinite(values)):
            raise SimulationError(f"trajectory {idx} contains non-finite values")
        tid = f"{idx:05d}"
        arr = values.astype("<f4")
        arrays[tid] = arr
        failures.extend(fails)
        entries.append({
            "id": tid,
            "split": name,
            "params": params.to_dict(),
            "shape": list(arr.shape),
            "blob": f"traj_{tid}.f32",
            "input_len": split.input_len,
            "output_len": split.output_len,
        })
    for f in failures:
        log.warning("simulation failure (resampled): %s", f)
    manifest = {
        "format_version": FORMAT_VERSION,
        "grid": g.to_dict(),
        "channels": list(CHANNELS[base_cfg.params.pde_kind]),
        "trajectories": entries,
        "generator": {
            "config": base_cfg.to_dict(),
            "split": split.to_dict(),
            "failures": failures,
        },
    }
    container = TrajectoryContainer(manifest=manifest, arrays=arrays)
    if out_path is not None:
        write_container(container, out_path)
    return container
