"""YAML run configuration: reservoir, data, model and training settings.

Every section is optional and falls back to the desk-scale defaults below;
unknown keys are rejected so typos fail loudly. Schema (all keys shown)::

    seed: 0
    reservoir:
      grid: [60, 60]
      cell_size: [5.0, 5.0, 5.0]        # m
      porosity: 0.2
      viscosity: [1.0, 5.0]             # water, oil (cP)
      corey: {a: 2.0, b: 2.0, swc: 0.1, sor: 0.1}
      p0: 3000.0                        # psi
      s0: 0.1
      solver: direct                    # or cg
      permeability: {mean_md: 100.0, sigma_ln: 1.0, corr_len: 10.0, seed: 7}
      wells:                            # injector value: m^3/day; producer value: BHP psi
        - {kind: injector, i: 12, j: 12, value: 40.0, rw: 0.1}
    data: {n_samples: 40, T: 24, dt_days: 30.0, control_interval: 6, workers: 1}
    model: {core: [20, 20], halo: 4, n_z: 50, channels: [16, 32, 32, 32], kernel: 3,
            trans_hidden: 64, rank: 1}
    train: {epochs: 200, batch_size: 32, sectors_per_sample: 8, lr: 0.001, beta1: 0.9,
            beta2: 0.999, eps: 1.0e-8, clip_norm: 5.0, checkpoint_every: 0, dtype: float32,
            lr_schedule: cosine, weights: {trans: 1.0, flux: 0.1, well: 1.0}}
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .sectors import GridDims
from .sim import RelPerm, ReservoirConfig, WellSpec, gaussian_log_permeability
from .trainer import TrainConfig

DESK_WELLS = [
    {"kind": "injector", "i": 12, "j": 12, "value": 40.0},
    {"kind": "injector", "i": 47, "j": 47, "value": 40.0},
    {"kind": "producer", "i": 12, "j": 47, "value": 2000.0},
    {"kind": "producer", "i": 47, "j": 12, "value": 2000.0},
]

DEFAULTS = {
    "seed": 0,
    "reservoir": {
        "grid": [60, 60],
        "cell_size": [5.0, 5.0, 5.0],
        "porosity": 0.2,
        "viscosity": [1.0, 5.0],
        "corey": {"a": 2.0, "b": 2.0, "swc": 0.1, "sor": 0.1},
        "p0": 3000.0,
        "s0": 0.1,
        "solver": "direct",
        "permeability": {"mean_md": 100.0, "sigma_ln": 1.0, "corr_len": 10.0, "seed": 7},
        "wells": DESK_WELLS,
    },
    "data": {"n_samples": 40, "T": 24, "dt_days": 30.0, "control_interval": 6, "workers": 1},
    "model": {"core": [20, 20], "halo": 4, "n_z": 50, "channels": [16, 32, 32, 32], "kernel": 3,
              "trans_hidden": 64, "rank": 1},
    "train": {"epochs": 200, "batch_size": 32, "sectors_per_sample": 8, "lr": 1e-3, "beta1": 0.9,
              "beta2": 0.999, "eps": 1e-8, "clip_norm": 5.0, "checkpoint_every": 0, "dtype": "float32",
              "lr_schedule": "cosine", "weights": {"trans": 1.0, "flux": 0.1, "well": 1.0}},
}

WELL_KEYS = {"kind", "i", "j", "value", "rw"}


def _merge(base, override, path=""):
    if not isinstance(override, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(override).__name__}")
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}.{k}" if path else str(k)
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d):
        raw = _merge(DEFAULTS, d or {})
        for n, w in enumerate(raw["reservoir"]["wells"]):
            if not isinstance(w, dict) or set(w) - WELL_KEYS or not {"kind", "i", "j", "value"} <= set(w):
                raise ConfigError(f"reservoir.wells[{n}]: need kind, i, j, value (and optional rw), got {w!r}")
        rc = cls(raw)
        rc.validate()
        return rc

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            d = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d)

    def dump(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.raw, sort_keys=False, default_flow_style=None))
        return path

    def validate(self):
        """Build every typed object once so bad values fail before any work starts."""
        self.reservoir()
        self.model()
        self.train_config()
        d = self.raw["data"]
        if int(d["n_samples"]) < 4 or int(d["T"]) < 2 or float(d["dt_days"]) <= 0:
            raise ConfigError("data: need n_samples >= 4, T >= 2, dt_days > 0")
        if int(d["control_interval"]) < 1 or int(d["workers"]) < 1:
            raise ConfigError("data: control_interval and workers must be >= 1")

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def data(self):
        return self.raw["data"]

    def reservoir(self) -> ReservoirConfig:
        r = self.raw["reservoir"]
        try:
            dims = GridDims(*(int(v) for v in r["grid"]))
            k = r["permeability"]
            perm = gaussian_log_permeability(dims, int(k["seed"]), float(k["mean_md"]), float(k["sigma_ln"]),
                                             float(k["corr_len"]))
            wells = [WellSpec(int(w["i"]), int(w["j"]), str(w["kind"]), float(w["value"]), float(w.get("rw", 0.1)))
                     for w in r["wells"]]
            dx, dy, dz = (float(v) for v in r["cell_size"])
            mu_w, mu_o = (float(v) for v in r["viscosity"])
            c = r["corey"]
            relperm = RelPerm(float(c["a"]), float(c["b"]), float(c["swc"]), float(c["sor"]))
            return ReservoirConfig(dims, perm, wells, dx, dy, dz, float(r["porosity"]), mu_w, mu_o, relperm,
                                   float(r["p0"]), float(r["s0"]), solver=str(r["solver"]))
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"reservoir: {exc}") from exc

    def model(self) -> ModelConfig:
        m = self.raw["model"]
        core = tuple(int(v) for v in m["core"])
        halo = int(m["halo"])
        grid = tuple(int(v) for v in self.raw["reservoir"]["grid"])
        extent = tuple(c + halo if c < n else n for c, n in zip(core, grid))
        try:
            return ModelConfig(extent=extent, n_z=int(m["n_z"]), channels=tuple(m["channels"]),
                               kernel=int(m["kernel"]), trans_hidden=int(m["trans_hidden"]), rank=int(m["rank"]),
                               grid=grid, core=core, halo=halo)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"model: {exc}") from exc

    def train_config(self, e2co=False) -> TrainConfig:
        t = dict(self.raw["train"])
        weights = LossWeights(**{k: float(v) for k, v in t.pop("weights").items()})
        try:
            return TrainConfig(epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
                               sectors_per_sample=int(t["sectors_per_sample"]), lr=float(t["lr"]),
                               beta1=float(t["beta1"]), beta2=float(t["beta2"]), eps=float(t["eps"]),
                               clip_norm=float(t["clip_norm"]), seed=self.seed, weights=weights, e2co=e2co,
                               checkpoint_every=int(t["checkpoint_every"]), dtype=str(t["dtype"]),
                               lr_schedule=str(t["lr_schedule"]))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"train: {exc}") from exc


def desk_config(**sections):
    """Defaults with per-section overrides, e.g. ``desk_config(train={"epochs": 5})``."""
    return RunConfig.from_dict(sections)


def to_plain(obj):
    """numpy scalars -> python scalars, for YAML echoing."""
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
