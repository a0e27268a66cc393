"""Localized-learning training loop.

Each epoch draws fresh random expanded sectors for every training sample,
builds (sample, t, sector) examples for all transitions, and optimizes the
composite loss with Adam and global-norm gradient clipping.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses as L
from . import model as M
from . import tensor as T
from .errors import ConfigError, DimensionError, TrainingAbort
from .sectors import GridDims, SectorSpec, expand_with_halo, full_grid_spec, sample_sectors
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    sectors_per_sample: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    e2co: bool = False
    checkpoint_every: int = 0  # epochs between checkpoint writes; 0 writes only the final one
    dtype: str = "float32"
    lr_schedule: str = "constant"  # or "cosine": lr * (1 + cos(pi * (epoch - 1) / epochs)) / 2

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        for name in ("epochs", "batch_size", "sectors_per_sample"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ConfigError("optimizer settings out of range")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")

    def epoch_lr(self, epoch):
        """Learning rate for 1-based ``epoch``."""
        if self.lr_schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / self.epochs))
        return self.lr


# ---------------------------------------------------------------- examples

def augmented_control(u, spec, grid: GridDims, well_cells):
    """``[u masked (d_u), origin (2), relative well positions (2 d_u)]`` for one expanded sector.

    Wells outside the expanded window get zero control and zero position.
    """
    u = np.asarray(u, dtype=np.float64)
    d_u = len(well_cells)
    if u.shape != (d_u,):
        raise DimensionError(f"control vector {u.shape} does not match {d_u} wells")
    out = np.zeros(3 * d_u + 2)
    for k, (i, j) in enumerate(well_cells):
        if spec.contains(i, j):
            out[k] = u[k]
            out[d_u + 2 + 2 * k] = (i - spec.ex) / spec.wx
            out[d_u + 3 + 2 * k] = (j - spec.ey) / spec.wy
    out[d_u] = spec.ex / (grid.nx - spec.wx) if grid.nx > spec.wx else 0.0
    out[d_u + 1] = spec.ey / (grid.ny - spec.wy) if grid.ny > spec.wy else 0.0
    return out


def producer_mask(spec, producer_cells):
    """Rate mask ``(2 * n_prod,)``: 1 for the oil/water entries of producers inside the window."""
    m = np.zeros(2 * len(producer_cells))
    for k, (i, j) in enumerate(producer_cells):
        if spec.contains(i, j):
            m[2 * k:2 * k + 2] = 1.0
    return m


class PreparedData:
    """Normalized full-grid arrays for fast sector slicing."""

    def __init__(self, dataset, norm: M.Normalization, dtype=np.float32):
        c = dataset.config
        self.dataset = dataset
        self.grid = c.dims
        self.norm = norm
        self.dtype = dtype
        self.p = ((dataset.p - norm.p_min) / (norm.p_max - norm.p_min)).astype(dtype)
        self.sw = dataset.sw.astype(dtype)
        lnk = np.log(c.perm)
        self.k = ((lnk - norm.lnk_mean) / norm.lnk_std if norm.lnk_std > 0 else np.zeros_like(lnk)).astype(dtype)
        self.perm = c.perm
        self.k_ref = math.exp(norm.lnk_mean)
        self.y = (dataset.y / norm.y_scale).astype(dtype)
        self.u = dataset.u
        self.well_cells = [(w.i, w.j) for w in c.wells]
        self.producer_cells = [(w.i, w.j) for w in c.producers]
        self.relperm = c.relperm
        self._faces = {}

    def faces(self, spec):
        """Flux-loss face weights and core masks for a window (cached per placement)."""
        key = (spec.ex, spec.ey, spec.wx, spec.wy, spec.core.ox, spec.core.oy, spec.core.sx, spec.core.sy)
        if key not in self._faces:
            win = self.perm[spec.ex:spec.ex + spec.wx, spec.ey:spec.ey + spec.wy]
            kx, ky = L.face_weights(win, self.k_ref)
            mx, my = L.core_face_masks((spec.wx, spec.wy), spec.core_offset, (spec.core.sx, spec.core.sy))
            self._faces[key] = (kx, ky, mx, my)
        return self._faces[key]


def _window(a, spec):
    return a[..., spec.ex:spec.ex + spec.wx, spec.ey:spec.ey + spec.wy]


def build_example(sample, t, spec, data: PreparedData):
    """``(x_t input, u_aug, x_{t+1} input, rates, rate mask)`` for one sector; inputs are ``3 x H x W``."""
    ds = data.dataset
    if not 0 <= t < ds.T - 1:
        raise ConfigError(f"transition index {t} out of range for T={ds.T}")
    spec.core.check(data.grid)
    if spec.ex < 0 or spec.ey < 0 or spec.ex + spec.wx > data.grid.nx or spec.ey + spec.wy > data.grid.ny:
        raise ConfigError(f"sector window {spec} leaves the grid")
    k = _window(data.k, spec)
    x_t = np.stack([_window(data.p[sample, t], spec), _window(data.sw[sample, t], spec), k])
    x_n = np.stack([_window(data.p[sample, t + 1], spec), _window(data.sw[sample, t + 1], spec), k])
    u = augmented_control(data.u[sample, t], spec, data.grid, data.well_cells).astype(data.dtype)
    y = data.y[sample, t]
    mask = producer_mask(spec, data.producer_cells).astype(data.dtype)
    return x_t, u, x_n, y, mask


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params: T.ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, params: T.ParamStore, scale=1.0):
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = p.grad * scale
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------- loss

def batch_loss(batch, params, cfg: M.ModelConfig, tcfg: TrainConfig, relperm):
    """Forward pass over a batch dict; returns the LossBreakdown (differentiable ``tensor``)."""
    x_t, x_n = batch["x_t"], batch["x_n"]
    n = x_t.shape[0]
    z_both = M.encode(Tensor(np.concatenate([x_t, x_n])), params, cfg)
    z_t = T.getitem(z_both, slice(0, n))
    z_next = T.getitem(z_both, slice(n, 2 * n))
    u = Tensor(batch["u"])
    z_hat, _ = M.transition(z_t, u, params, cfg)
    dec = M.decode(T.concat([z_t, z_hat]), params, cfg)
    x_hat_t = T.getitem(dec, slice(0, n))
    x_hat_n = T.getitem(dec, slice(n, 2 * n))
    true_t = Tensor(np.ascontiguousarray(x_t[:, :2]))
    true_n = Tensor(np.ascontiguousarray(x_n[:, :2]))
    terms = {
        "rec": L.rec_loss(true_t, x_hat_t),
        "pred": L.pred_loss(true_n, x_hat_n),
        "trans": L.trans_loss(z_next, z_hat),
        "flux": L.flux_loss(true_t, x_hat_t, true_n, x_hat_n, (batch["kx"], batch["ky"]), relperm,
                            (batch["mx"], batch["my"])),
    }
    if tcfg.e2co:
        y_hat = M.observe(z_t, z_hat, u, params, cfg)
        terms["well"] = L.well_loss(Tensor(batch["y"]), y_hat, batch["y_mask"])
    return L.combine(terms, tcfg.weights, tcfg.e2co)


def assemble_batch(triples, data: PreparedData):
    parts = [build_example(s, t, spec, data) for s, t, spec in triples]
    faces = [data.faces(spec) for _, _, spec in triples]
    return {
        "x_t": np.stack([p[0] for p in parts]),
        "u": np.stack([p[1] for p in parts]),
        "x_n": np.stack([p[2] for p in parts]),
        "y": np.stack([p[3] for p in parts]),
        "y_mask": np.stack([p[4] for p in parts]),
        "kx": np.stack([f[0] for f in faces]),
        "ky": np.stack([f[1] for f in faces]),
        "mx": np.stack([f[2] for f in faces]),
        "my": np.stack([f[3] for f in faces]),
    }


# ---------------------------------------------------------------- training

def model_config_for(dataset, base: M.ModelConfig, norm=None, e2co=None):
    """Copy of ``base`` bound to the dataset's grid, wells and normalization."""
    c = dataset.config
    wells = [(w.i, w.j) for w in c.wells]
    prods = [k for k, w in enumerate(c.wells) if w.is_producer]
    ext = tuple(s + base.halo if s < n else n for s, n in zip(base.core, c.dims.shape))
    return replace(base, extent=ext, grid=c.dims.shape, d_u=c.d_u, d_y=c.d_y,
                   e2co=base.e2co if e2co is None else e2co, well_cells=wells, producer_slots=prods,
                   norm=norm if norm is not None else fit_dataset_normalization(dataset))


def fit_dataset_normalization(dataset):
    train = dataset.train or list(range(dataset.n_samples))
    return M.fit_normalization(dataset.p[train], dataset.config.perm, dataset.y[train])


@dataclass
class TrainResult:
    checkpoint: M.Checkpoint
    metrics: list  # one dict per epoch
    epoch_seconds: list


def _metrics_columns(e2co):
    cols = ["epoch", "wall_seconds", "rec", "pred", "trans", "flux"]
    return cols + (["well", "total"] if e2co else ["total"])


def write_metrics(path, rows, e2co):
    cols = _metrics_columns(e2co)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.8g}" if isinstance(r[k], float) else r[k]) for k in cols})


def epoch_triples(dataset, cfg: M.ModelConfig, tcfg: TrainConfig, rng):
    """Shuffled (sample, t, spec) examples for one epoch."""
    grid = dataset.config.dims
    samples = dataset.train
    if not samples:
        raise ConfigError("dataset has no training samples")
    specs = sample_sectors(grid, cfg.core, cfg.halo, len(samples) * tcfg.sectors_per_sample, rng=rng)
    triples = []
    for n, s in enumerate(samples):
        for spec in specs[n * tcfg.sectors_per_sample:(n + 1) * tcfg.sectors_per_sample]:
            triples.extend((s, t, spec) for t in range(dataset.T - 1))
    order = rng.permutation(len(triples))
    return [triples[i] for i in order]


def train(dataset, cfg: M.ModelConfig, tcfg: TrainConfig, out=None, metrics_path=None, params=None,
          on_epoch=None):
    """Train on the dataset's training split; returns a :class:`TrainResult`.

    ``cfg`` must already be bound to the dataset (see :func:`model_config_for`).
    """
    dtype = np.dtype(tcfg.dtype)
    if cfg.grid != dataset.config.dims.shape:
        raise ConfigError(f"model grid {cfg.grid} does not match dataset grid {dataset.config.dims.shape}")
    if tcfg.e2co and not cfg.e2co:
        cfg = replace(cfg, e2co=True)
    data = PreparedData(dataset, cfg.norm, dtype)
    if params is None:
        params = M.init_params(cfg, seed=tcfg.seed, dtype=dtype)
    opt = Adam(params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    rng = np.random.default_rng(tcfg.seed)
    meta = {"train": _train_meta(tcfg)}
    rows, seconds = [], []
    for epoch in range(1, tcfg.epochs + 1):
        start = time.perf_counter()
        opt.lr = tcfg.epoch_lr(epoch)
        triples = epoch_triples(dataset, cfg, tcfg, rng)
        sums = dict.fromkeys(("rec", "pred", "trans", "flux", "well", "total"), 0.0)
        count = 0
        for b in range(0, len(triples), tcfg.batch_size):
            chunk = triples[b:b + tcfg.batch_size]
            batch = assemble_batch(chunk, data)
            params.zero_grad()
            with Tape() as tape:
                lb = batch_loss(batch, params, cfg, tcfg, data.relperm)
            if not math.isfinite(lb.total):
                prov = [(s, t, (spec.core.ox, spec.core.oy)) for s, t, spec in chunk]
                raise TrainingAbort(f"non-finite loss {lb.total} in epoch {epoch}, batch {b // tcfg.batch_size}", prov)
            T.backward(tape, lb.tensor)
            gn = params.grad_norm()
            if not math.isfinite(gn):
                prov = [(s, t, (spec.core.ox, spec.core.oy)) for s, t, spec in chunk]
                raise TrainingAbort(f"non-finite gradient in epoch {epoch}, batch {b // tcfg.batch_size}", prov)
            opt.step(params, scale=min(1.0, tcfg.clip_norm / gn) if gn > 0 else 1.0)
            for k, v in lb.as_row().items():
                sums[k] += v * len(chunk)
            count += len(chunk)
        wall = time.perf_counter() - start
        seconds.append(wall)
        row = {"epoch": epoch, "wall_seconds": wall, **{k: v / count for k, v in sums.items()}}
        rows.append(row)
        log.info("epoch %d  %.1fs  total %.5f", epoch, wall, row["total"])
        if on_epoch is not None:
            on_epoch(row)
        ckpt = M.Checkpoint(cfg, params, meta)
        if out is not None and tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
            ckpt.save(out)
        if metrics_path is not None:
            write_metrics(metrics_path, rows, tcfg.e2co)
    ckpt = M.Checkpoint(cfg, params, meta)
    if out is not None:
        ckpt.save(out)
    return TrainResult(ckpt, rows, seconds)


def _train_meta(tcfg: TrainConfig):
    return {"epochs": tcfg.epochs, "batch_size": tcfg.batch_size, "sectors_per_sample": tcfg.sectors_per_sample,
            "lr": tcfg.lr, "lr_schedule": tcfg.lr_schedule, "seed": tcfg.seed, "e2co": tcfg.e2co,
            "weights": {"trans": tcfg.weights.trans, "flux": tcfg.weights.flux, "well": tcfg.weights.well}}


def full_grid_config(cfg: M.ModelConfig):
    """The same network on a single sector covering the grid (no halo)."""
    return replace(cfg, core=cfg.grid, halo=0, extent=cfg.grid)


def train_full_grid(dataset, cfg: M.ModelConfig, tcfg: TrainConfig, **kw):
    """Baseline: one full-grid sector per sample per epoch."""
    return train(dataset, full_grid_config(cfg), replace(tcfg, sectors_per_sample=1), **kw)


def evaluate_loss(dataset, ckpt: M.Checkpoint, tcfg: TrainConfig, samples, seed=0, sectors=4):
    """Mean total loss over a fixed random set of sectors from ``samples`` (no gradient)."""
    cfg = ckpt.config
    data = PreparedData(dataset, cfg.norm, ckpt.params["enc.dense.W"].data.dtype)
    rng = np.random.default_rng(seed)
    specs = sample_sectors(dataset.config.dims, cfg.core, cfg.halo, len(samples) * sectors, rng=rng)
    triples = [(s, t, specs[n * sectors + m]) for n, s in enumerate(samples) for m in range(sectors)
               for t in range(dataset.T - 1)]
    total, count = 0.0, 0
    for b in range(0, len(triples), 64):
        chunk = triples[b:b + 64]
        lb = batch_loss(assemble_batch(chunk, data), ckpt.params, cfg, tcfg, data.relperm)
        total += lb.total * len(chunk)
        count += len(chunk)
    return total / count
