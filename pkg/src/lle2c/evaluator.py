"""Closed-loop full-grid rollout by sector inference and stitching, error metrics and timing."""
from __future__ import annotations

import csv
import os
import platform
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as M
from .errors import ConfigError, DimensionError
from .sectors import GridDims, crop_core, inference_specs, stitch
from .sim import initial_state, step
from .trainer import augmented_control


@dataclass
class RolloutResult:
    states: np.ndarray  # (T-1, 2, nx, ny) predicted x_1 .. x_{T-1}, physical units
    y_pred: np.ndarray  # (T-1, d_y) producer rates per step (zeros without the observation head)
    step_seconds: list = field(default_factory=list)
    mae_p: np.ndarray = None  # per step, psi (filled when truth is supplied)
    mae_s: np.ndarray = None
    y_true: np.ndarray = None

    @property
    def n_steps(self):
        return len(self.states)


def mae(true, pred):
    """Mean absolute cellwise difference per channel (leading axes kept, last two averaged)."""
    true, pred = np.asarray(true, dtype=np.float64), np.asarray(pred, dtype=np.float64)
    if true.shape != pred.shape:
        raise DimensionError(f"mae: shapes {true.shape} and {pred.shape} differ")
    return np.mean(np.abs(true - pred), axis=(-2, -1))


def field_rates(outputs):
    """Per-step ``(oil, water)`` totals from interleaved producer rates ``(..., 2 * n_prod)``."""
    y = np.asarray(outputs, dtype=np.float64)
    if y.shape[-1] % 2:
        raise DimensionError(f"rate vector length {y.shape[-1]} is not (oil, water) pairs")
    if y.shape[-1] == 0:
        return np.zeros(y.shape[:-1] + (2,))
    return np.stack([y[..., 0::2].sum(axis=-1), y[..., 1::2].sum(axis=-1)], axis=-1)


class SectorPredictor:
    """Stateless full-grid step: extract expanded sectors, predict, crop cores, stitch."""

    def __init__(self, ckpt: M.Checkpoint, grid: GridDims, perm, chunk=1024):
        cfg = ckpt.config
        if tuple(cfg.grid) != grid.shape:
            raise ConfigError(f"checkpoint was trained on a {cfg.grid} grid, data grid is {grid.shape}")
        self.cfg, self.params, self.grid, self.chunk = cfg, ckpt.params, grid, chunk
        self.specs = inference_specs(grid, cfg.core, cfg.halo, allow_clamp=True)
        for s in self.specs:
            if (s.wx, s.wy) != cfg.extent:
                raise ConfigError(f"sector window {s.wx}x{s.wy} does not match the model extent {cfg.extent}")
        if len(cfg.well_cells) != cfg.d_u:
            raise ConfigError("checkpoint carries no well geometry")
        self.dtype = self.params["enc.dense.W"].data.dtype
        nm = cfg.norm
        lnk = np.log(np.asarray(perm, dtype=np.float64))
        self.k = ((lnk - nm.lnk_mean) / nm.lnk_std if nm.lnk_std > 0 else np.zeros_like(lnk)).astype(self.dtype)
        self.owner = self._producer_owners()

    def _producer_owners(self):
        """Index of the sector whose (stitched) core owns each producer."""
        owners = []
        for slot in self.cfg.producer_slots:
            i, j = self.cfg.well_cells[slot]
            best = None
            for n, s in enumerate(self.specs):
                c = s.core
                if c.ox <= i < c.ox + c.sx and c.oy <= j < c.oy + c.sy:
                    if best is None or (c.ox, c.oy) > (self.specs[best].core.ox, self.specs[best].core.oy):
                        best = n  # overlapping clamped cores: the larger origin wins, as in stitch
            owners.append(best)
        return owners

    def step(self, states, controls):
        """Advance ``(B, 2, nx, ny)`` physical states under ``(B, d_u)`` controls.

        Returns next states and ``(B, d_y)`` producer rates.
        """
        cfg, nm = self.cfg, self.cfg.norm
        states = np.asarray(states)
        b = states.shape[0]
        p = ((states[:, 0] - nm.p_min) / (nm.p_max - nm.p_min)).astype(self.dtype)
        sw = states[:, 1].astype(self.dtype)
        ns = len(self.specs)
        wx, wy = cfg.extent
        x = np.empty((b, ns, 3, wx, wy), dtype=self.dtype)
        u = np.empty((b, ns, cfg.d_aug), dtype=self.dtype)
        for n, s in enumerate(self.specs):
            win = (slice(s.ex, s.ex + wx), slice(s.ey, s.ey + wy))
            x[:, n, 0] = p[(slice(None),) + win]
            x[:, n, 1] = sw[(slice(None),) + win]
            x[:, n, 2] = self.k[win]
            for c in range(b):
                u[c, n] = augmented_control(controls[c], s, self.grid, cfg.well_cells)
        x = x.reshape(b * ns, 3, wx, wy)
        u = u.reshape(b * ns, cfg.d_aug)
        outs, ys = [], []
        for k in range(0, b * ns, self.chunk):
            out, y = M.predict_sector(x[k:k + self.chunk], u[k:k + self.chunk], self.params, cfg)
            outs.append(out.data)
            if y is not None:
                ys.append(y.data)
        pred = np.concatenate(outs).reshape(b, ns, 2, wx, wy)
        nxt = np.empty_like(states, dtype=np.float64)
        for c in range(b):
            nxt[c] = stitch([(s.core, crop_core(pred[c, n], s)) for n, s in enumerate(self.specs)], self.grid)
        nxt[:, 0] = nxt[:, 0] * (nm.p_max - nm.p_min) + nm.p_min
        rates = np.zeros((b, cfg.d_y))
        if ys:
            yv = np.concatenate(ys).reshape(b, ns, cfg.d_y).astype(np.float64) * nm.y_scale
            for k, owner in enumerate(self.owner):
                rates[:, 2 * k:2 * k + 2] = yv[:, owner, 2 * k:2 * k + 2]
        return nxt, rates


def rollout_many(ckpt, x0, schedules, T, perm, truth=None, y_truth=None, grid=None):
    """Closed-loop rollouts of ``B`` cases at once; returns one :class:`RolloutResult` per case.

    ``x0`` is ``(B, 2, nx, ny)``; ``schedules`` is ``(B, >= T-1, d_u)``; ``truth``
    optionally ``(B, T, 2, nx, ny)`` for per-step MAE.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 4 or x0.shape[1] != 2:
        raise DimensionError(f"initial states must be (B, 2, nx, ny), got {x0.shape}")
    grid = grid or GridDims(*x0.shape[2:])
    predictor = SectorPredictor(ckpt, grid, perm)
    schedules = np.asarray(schedules, dtype=np.float64)
    if schedules.shape[0] != x0.shape[0] or schedules.shape[1] < T - 1:
        raise DimensionError(f"schedule {schedules.shape} too short for {x0.shape[0]} cases and T={T}")
    b = x0.shape[0]
    states = np.empty((b, T - 1) + x0.shape[1:])
    rates = np.zeros((b, T - 1, ckpt.config.d_y))
    secs = []
    cur = x0
    for t in range(T - 1):
        start = time.perf_counter()
        cur, rates[:, t] = predictor.step(cur, schedules[:, t])
        secs.append((time.perf_counter() - start) / b)
        states[:, t] = cur
    results = []
    for c in range(b):
        r = RolloutResult(states[c], rates[c], list(secs))
        if truth is not None:
            e = mae(truth[c][1:T], states[c])
            r.mae_p, r.mae_s = e[:, 0], e[:, 1]
        if y_truth is not None:
            r.y_true = np.asarray(y_truth[c][:T - 1], dtype=np.float64)
        results.append(r)
    return results


def rollout(ckpt, x0, schedule, T, perm, truth=None, y_truth=None):
    """Single-case closed-loop rollout."""
    x0 = np.asarray(x0)
    return rollout_many(ckpt, x0[None], np.asarray(schedule)[None], T, perm,
                        None if truth is None else np.asarray(truth)[None],
                        None if y_truth is None else np.asarray(y_truth)[None])[0]


# ---------------------------------------------------------------- dataset evaluation

@dataclass
class Evaluation:
    samples: list
    results: list  # RolloutResult per test sample
    persistence_p: np.ndarray  # (samples, T-1): closed-loop persistence x_hat_t = x_0
    persistence_s: np.ndarray
    onestep_p: np.ndarray  # (samples, T-1): one-step persistence x_hat_{t+1} = x_t (true x_t)
    onestep_s: np.ndarray

    @property
    def mae_p(self):
        return np.stack([r.mae_p for r in self.results])

    @property
    def mae_s(self):
        return np.stack([r.mae_s for r in self.results])


def evaluate(ckpt, dataset, samples=None):
    samples = list(dataset.test if samples is None else samples)
    if not samples:
        raise ConfigError("no samples to evaluate")
    if tuple(ckpt.config.grid) != dataset.dims.shape:
        raise ConfigError(f"checkpoint grid {tuple(ckpt.config.grid)} does not match dataset grid {dataset.dims.shape}")
    T = dataset.T
    truth = np.stack([np.stack([dataset.p[s], dataset.sw[s]], axis=1) for s in samples]).astype(np.float64)
    res = rollout_many(ckpt, truth[:, 0], dataset.u[samples], T, dataset.config.perm, truth, dataset.y[samples],
                       grid=dataset.dims)
    persist = mae(truth[:, 1:], np.broadcast_to(truth[:, :1], truth[:, 1:].shape))
    onestep = mae(truth[:, 1:], truth[:, :-1])
    return Evaluation(samples, res, persist[..., 0], persist[..., 1], onestep[..., 0], onestep[..., 1])


def write_reports(ev: Evaluation, out_dir, e2co):
    """Per-step MAE and field-rate CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "mae.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "step", "mae_p_psi", "mae_s", "persistence_p_psi", "persistence_s"])
        for n, (s, r) in enumerate(zip(ev.samples, ev.results)):
            for t in range(r.n_steps):
                w.writerow([s, t + 1, f"{r.mae_p[t]:.6g}", f"{r.mae_s[t]:.6g}",
                            f"{ev.persistence_p[n, t]:.6g}", f"{ev.persistence_s[n, t]:.6g}"])
    if e2co:
        with open(out / "field_rates.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "step", "phase", "true", "predicted"])
            for s, r in zip(ev.samples, ev.results):
                tr, pr = field_rates(r.y_true), field_rates(r.y_pred)
                for t in range(r.n_steps):
                    for k, phase in enumerate(("oil", "water")):
                        w.writerow([s, t + 1, phase, f"{tr[t, k]:.6g}", f"{pr[t, k]:.6g}"])
    return out


def field_rate_errors(result: RolloutResult):
    """Per-step relative errors ``(oil, water)`` against the true field liquid rate."""
    tr, pr = field_rates(result.y_true), field_rates(result.y_pred)
    liquid = tr.sum(axis=-1, keepdims=True)
    return np.abs(pr - tr) / np.where(liquid > 0, liquid, 1.0)


# ---------------------------------------------------------------- timing

def environment():
    return f"{platform.python_implementation()} {platform.python_version()}, numpy {np.__version__}, " \
           f"{platform.machine()}, {os.cpu_count()} cpu"


def median_time(fn, repeats=5, warmup=1):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def cell_touch_ratio(grid: GridDims, extent, sectors_per_sample, T):
    """Cells processed per epoch, full-grid over localized: ``n (T-1) / (w^2 s (T-1))``."""
    full = grid.n * (T - 1)
    local = extent[0] * extent[1] * sectors_per_sample * (T - 1)
    return full / local


def simulator_step_seconds(config, controls, dt_days, steps=5):
    """Median wall-clock of one simulator step starting from the initial state."""
    s0 = initial_state(config)
    s1, _ = step(s0, controls, dt_days, config)  # warm-up, and a non-trivial state to time from
    return median_time(lambda: step(s1, controls, dt_days, config), repeats=steps, warmup=0)


def inference_step_seconds(ckpt, dataset, batch, repeats=5):
    """Median per-case seconds of one stitched surrogate step for ``batch`` simultaneous cases."""
    predictor = SectorPredictor(ckpt, dataset.dims, dataset.config.perm)
    samples = (dataset.test or list(range(dataset.n_samples)))
    idx = [samples[k % len(samples)] for k in range(batch)]
    states = np.stack([dataset.state(s, 1) for s in idx]).astype(np.float64)
    controls = dataset.u[idx, 1].astype(np.float64)
    return median_time(lambda: predictor.step(states, controls), repeats=repeats) / batch


@dataclass
class Benchmark:
    sim_step: float
    infer_batch1: float
    infer_batchB: float
    batch: int
    ll_epoch: float = None
    fg_epoch: float = None
    cell_ratio: float = None
    env: str = ""

    @property
    def speedup_batch1(self):
        return self.sim_step / self.infer_batch1

    @property
    def speedup_batchB(self):
        return self.sim_step / self.infer_batchB

    @property
    def epoch_ratio(self):
        return None if not (self.ll_epoch and self.fg_epoch) else self.fg_epoch / self.ll_epoch

    def rows(self):
        out = [("sim_step", self.sim_step), ("surrogate_step_batch1_per_case", self.infer_batch1),
               (f"surrogate_step_batch{self.batch}_per_case", self.infer_batchB),
               ("speedup_batch1", self.speedup_batch1), (f"speedup_batch{self.batch}", self.speedup_batchB)]
        if self.ll_epoch is not None:
            out += [("epoch_ll", self.ll_epoch), ("epoch_full_grid", self.fg_epoch),
                    ("epoch_ratio_full_over_ll", self.epoch_ratio), ("cell_touch_ratio_full_over_ll", self.cell_ratio)]
        return out

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config", "seconds"])
            for k, v in self.rows():
                w.writerow([k, f"{v:.6g}"])
            w.writerow(["environment", self.env])
        return path


def benchmark(ckpt, dataset, batch=64, train_epochs=False, train_config=None, repeats=5):
    """Simulator vs surrogate step timing; with ``train_epochs`` also LL vs full-grid epoch wall-clock.

    Epoch timing follows the median-of-``repeats`` after one warm-up epoch rule.
    """
    from . import trainer as TR

    c = dataset.config
    controls = np.full(c.d_u, 0.6)
    bench = Benchmark(simulator_step_seconds(c, controls, dataset.dt_days, repeats),
                      inference_step_seconds(ckpt, dataset, 1, repeats),
                      inference_step_seconds(ckpt, dataset, batch, repeats), batch, env=environment())
    if train_epochs:
        tcfg = train_config or TR.TrainConfig()
        tcfg = replace(tcfg, epochs=repeats + 1)
        cfg = replace(ckpt.config, e2co=tcfg.e2co)
        ll = TR.train(dataset, cfg, tcfg)
        fg = TR.train_full_grid(dataset, cfg, tcfg)
        bench.ll_epoch = statistics.median(ll.epoch_seconds[1:])
        bench.fg_epoch = statistics.median(fg.epoch_seconds[1:])
        bench.cell_ratio = cell_touch_ratio(dataset.dims, cfg.extent, tcfg.sectors_per_sample, dataset.T)
    return bench
