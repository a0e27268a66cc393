"""Simulated trajectory datasets and their on-disk container.

A dataset directory holds three files:

``manifest.txt``
    ``key = value`` lines: grid, physics, wells, split and file names.
``trajectories.bin``
    magic ``ADRD``, format version (u32 LE), then for every sample and step
    the record ``p`` (psi), ``S_w``, ``u_t``, ``y_{t+1}``, all f32 LE,
    fields row-major over ``(nx, ny)``.
``permeability.bin``
    the static permeability field (mD), f64 LE row-major.
"""
from __future__ import annotations

import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, SimulationError
from .sectors import GridDims
from .sim import RelPerm, ReservoirConfig, WellSpec, initial_state, step

log = logging.getLogger(__name__)

MAGIC = b"ADRD"
VERSION = 1
MANIFEST = "manifest.txt"
DATA_FILE = "trajectories.bin"
PERM_FILE = "permeability.bin"
CONTROL_RANGE = (0.2, 1.0)


@dataclass
class Dataset:
    config: ReservoirConfig
    T: int
    dt_days: float
    p: np.ndarray  # (samples, T, nx, ny) psi
    sw: np.ndarray
    u: np.ndarray  # (samples, T, d_u)
    y: np.ndarray  # (samples, T, d_y): rates over step t -> t+1
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    seed: int = 0
    control_interval: int = 1

    @property
    def n_samples(self):
        return self.p.shape[0]

    @property
    def dims(self):
        return self.config.dims

    @property
    def d_u(self):
        return self.u.shape[-1]

    @property
    def d_y(self):
        return self.y.shape[-1]

    def state(self, sample, t):
        """``(2, nx, ny)`` stack of pressure and saturation."""
        return np.stack([self.p[sample, t], self.sw[sample, t]])

    def subset(self, samples):
        """Copy holding only ``samples``; all are marked as test samples."""
        idx = list(samples)
        return Dataset(self.config, self.T, self.dt_days, self.p[idx], self.sw[idx], self.u[idx], self.y[idx],
                       [], list(range(len(idx))), self.seed, self.control_interval)

    # ---------------------------------------------------------------- io
    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / MANIFEST).write_text(_manifest_text(self))
        self.config.perm.astype("<f8").tofile(d / PERM_FILE)
        with open(d / DATA_FILE, "wb") as fh:
            fh.write(MAGIC + struct.pack("<I", VERSION))
            for s in range(self.n_samples):
                for t in range(self.T):
                    fh.write(self.p[s, t].astype("<f4").tobytes())
                    fh.write(self.sw[s, t].astype("<f4").tobytes())
                    fh.write(self.u[s, t].astype("<f4").tobytes())
                    fh.write(self.y[s, t].astype("<f4").tobytes())
        return d

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        if not (d / MANIFEST).is_file():
            raise ConfigError(f"no dataset manifest in {d}")
        kv = read_manifest(d / MANIFEST)
        config = config_from_manifest(kv, d / kv.get("permeability_file", PERM_FILE))
        T, n = int(kv["T"]), int(kv["n_samples"])
        d_u, d_y = int(kv["d_u"]), int(kv["d_y"])
        nx, ny = config.dims.shape
        raw = (d / kv.get("data_file", DATA_FILE)).read_bytes()
        if raw[:4] != MAGIC:
            raise ConfigError(f"{d / DATA_FILE}: bad magic {raw[:4]!r}")
        (version,) = struct.unpack("<I", raw[4:8])
        if version != VERSION:
            raise ConfigError(f"unsupported dataset version {version}")
        rec = 2 * nx * ny + d_u + d_y
        body = np.frombuffer(raw, dtype="<f4", offset=8)
        if body.size != n * T * rec:
            raise ConfigError(f"dataset body has {body.size} values, manifest implies {n * T * rec}")
        body = body.reshape(n, T, rec)
        cut = np.cumsum([nx * ny, nx * ny, d_u])
        p = body[..., :cut[0]].reshape(n, T, nx, ny).astype(np.float32)
        sw = body[..., cut[0]:cut[1]].reshape(n, T, nx, ny).astype(np.float32)
        u = body[..., cut[1]:cut[2]].astype(np.float32)
        y = body[..., cut[2]:].astype(np.float32)
        return cls(config, T, float(kv["dt_days"]), p, sw, u, y,
                   _int_list(kv.get("split.train", "")), _int_list(kv.get("split.test", "")),
                   int(kv.get("seed", 0)), int(kv.get("control_interval", 1)))


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _manifest_text(ds: Dataset):
    c = ds.config
    lines = [
        ("format", "ADRD"),
        ("version", VERSION),
        ("dims", f"{c.dims.nx} {c.dims.ny}"),
        ("T", ds.T),
        ("n_samples", ds.n_samples),
        ("d_u", ds.d_u),
        ("d_y", ds.d_y),
        ("dt_days", repr(float(ds.dt_days))),
        ("control_interval", ds.control_interval),
        ("seed", ds.seed),
        ("cell_size", f"{c.dx!r} {c.dy!r} {c.dz!r}"),
        ("porosity", repr(c.porosity)),
        ("viscosity", f"{c.mu_w!r} {c.mu_o!r}"),
        ("corey", f"{c.relperm.a!r} {c.relperm.b!r} {c.relperm.swc!r} {c.relperm.sor!r}"),
        ("p0", repr(c.p0)),
        ("s0", repr(c.s0)),
        ("wells", len(c.wells)),
    ]
    for k, w in enumerate(c.wells):
        lines.append((f"well.{k}", f"{w.kind} {w.i} {w.j} {w.value!r} {w.rw!r}"))
    lines += [
        ("split.train", ",".join(str(i) for i in ds.train)),
        ("split.test", ",".join(str(i) for i in ds.test)),
        ("data_file", DATA_FILE),
        ("permeability_file", PERM_FILE),
    ]
    return "".join(f"{k} = {v}\n" for k, v in lines)


def read_manifest(path):
    kv = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}: malformed manifest line {line!r}")
        kv[key.strip()] = value.strip()
    return kv


def config_from_manifest(kv, perm_path):
    nx, ny = (int(v) for v in kv["dims"].split())
    dims = GridDims(nx, ny)
    perm = np.fromfile(perm_path, dtype="<f8").reshape(nx, ny)
    dx, dy, dz = (float(v) for v in kv["cell_size"].split())
    mu_w, mu_o = (float(v) for v in kv["viscosity"].split())
    a, b, swc, sor = (float(v) for v in kv["corey"].split())
    wells = []
    for k in range(int(kv["wells"])):
        kind, i, j, value, rw = kv[f"well.{k}"].split()
        wells.append(WellSpec(int(i), int(j), kind, float(value), float(rw)))
    return ReservoirConfig(dims, perm, wells, dx, dy, dz, float(kv["porosity"]), mu_w, mu_o,
                           RelPerm(a, b, swc, sor), float(kv["p0"]), float(kv["s0"]))


# ---------------------------------------------------------------- generation

def split_indices(n_samples):
    """3:1 train/test assignment by sample index: every fourth sample is held out."""
    test = [i for i in range(n_samples) if i % 4 == 3]
    train = [i for i in range(n_samples) if i % 4 != 3]
    return train, test


def control_schedule(d_u, T, seed, sample, interval=1, low=CONTROL_RANGE[0], high=CONTROL_RANGE[1]):
    """Piecewise-constant multipliers, redrawn every ``interval`` steps, one row per step."""
    rng = np.random.default_rng([seed, sample])
    periods = -(-T // interval)
    draws = rng.uniform(low, high, size=(periods, d_u))
    return np.repeat(draws, interval, axis=0)[:T]


def simulate_sample(config, schedule, dt_days):
    """Run one trajectory; returns per-step (p, sw, y) arrays, states x_0..x_{T-1}."""
    T = len(schedule)
    nx, ny = config.dims.shape
    p = np.empty((T, nx, ny))
    sw = np.empty((T, nx, ny))
    y = np.empty((T, config.d_y))
    s = initial_state(config)
    for t in range(T):
        p[t], sw[t] = s.p, s.sw
        s, out = step(s, schedule[t], dt_days, config)
        y[t] = out.as_vector()
    return p, sw, y


def _run_sample(args):
    config, schedule, dt_days, sample = args
    try:
        return simulate_sample(config, schedule, dt_days)
    except Exception as exc:  # re-raised with the sample id attached
        raise SimulationError(f"sample {sample}: {exc}", sample) from exc


def generate_dataset(config: ReservoirConfig, n_samples, T, seed, dt_days=30.0, control_interval=1,
                     workers=1, out_dir=None):
    if n_samples < 4:
        raise ConfigError(f"need at least 4 samples for a 3:1 split, got {n_samples}")
    if T < 2:
        raise ConfigError(f"need at least 2 time steps, got {T}")
    schedules = [control_schedule(config.d_u, T, seed, k, control_interval) for k in range(n_samples)]
    jobs = [(config, schedules[k], dt_days, k) for k in range(n_samples)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_sample, jobs))
    else:
        results = [_run_sample(j) for j in jobs]
    nx, ny = config.dims.shape
    p = np.empty((n_samples, T, nx, ny), dtype=np.float32)
    sw = np.empty_like(p)
    y = np.empty((n_samples, T, config.d_y), dtype=np.float32)
    for k, (pk, sk, yk) in enumerate(results):
        p[k], sw[k], y[k] = pk, sk, yk
    u = np.stack(schedules).astype(np.float32)
    train, test = split_indices(n_samples)
    ds = Dataset(config, T, float(dt_days), p, sw, u, y, train, test, seed, control_interval)
    if out_dir is not None:
        ds.save(out_dir)
    log.info("generated %d samples (%d train / %d test)", n_samples, len(train), len(test))
    return ds


def dataset_exists(directory):
    return os.path.isfile(os.path.join(directory, MANIFEST))
