"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 simulation failure,
4 non-finite training loss.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluator as E
from . import model as M
from . import trainer as TR
from .config import RunConfig
from .dataset import Dataset, dataset_exists, generate_dataset
from .errors import ConfigError, DimensionError, SimulationError, TrainingAbort

log = logging.getLogger("lle2c")

EXIT_OK, EXIT_CONFIG, EXIT_SIM, EXIT_TRAIN = 0, 2, 3, 4


def _writable_dir(path):
    """Create ``path`` if needed and check it can be written."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc.strerror or exc}") from exc
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def _dataset(path):
    if not dataset_exists(path):
        raise ConfigError(f"{path} does not contain a dataset (no manifest.txt)")
    return Dataset.load(path)


def _checkpoint(path):
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint {path} not found")
    return M.Checkpoint.load(path)


def cmd_gen_data(args):
    rc = RunConfig.load(args.config)
    out = _writable_dir(args.out)
    d = rc.data
    ds = generate_dataset(rc.reservoir(), int(d["n_samples"]), int(d["T"]), rc.seed, float(d["dt_days"]),
                          int(d["control_interval"]), int(d["workers"]), out_dir=out)
    rc.dump(out / "config.yaml")
    print(f"wrote {ds.n_samples} samples to {out}: {len(ds.train)} train / {len(ds.test)} test")
    return EXIT_OK


def cmd_train(args):
    rc = RunConfig.load(args.config)
    ds = _dataset(args.data)
    ckpt_path = Path(args.out)
    _writable_dir(ckpt_path.parent if str(ckpt_path.parent) else ".")
    tcfg = rc.train_config(e2co=args.e2co)
    base = rc.model()
    if base.grid != ds.dims.shape:
        raise ConfigError(f"config grid {base.grid} does not match dataset grid {ds.dims.shape}")
    cfg = TR.model_config_for(ds, base, e2co=args.e2co)
    metrics = ckpt_path.with_name(ckpt_path.stem + "_metrics.csv")
    rc.dump(ckpt_path.with_name(ckpt_path.stem + "_config.yaml"))
    runner = TR.train_full_grid if args.full_grid else TR.train
    res = runner(ds, cfg, tcfg, out=ckpt_path, metrics_path=metrics)
    last = res.metrics[-1]
    print(f"trained {len(res.metrics)} epochs ({'full-grid' if args.full_grid else 'localized'}"
          f"{', e2co' if args.e2co else ''}): final loss {last['total']:.5f}; "
          f"checkpoint {ckpt_path}, metrics {metrics}")
    return EXIT_OK


def cmd_evaluate(args):
    ckpt = _checkpoint(args.ckpt)
    ds = _dataset(args.data)
    out = _writable_dir(args.out)
    ev = E.evaluate(ckpt, ds)
    E.write_reports(ev, out, ckpt.config.e2co)
    (out / "provenance.txt").write_text(f"checkpoint = {Path(args.ckpt).resolve()}\n"
                                        f"data = {Path(args.data).resolve()}\n"
                                        f"train = {ckpt.meta.get('train', {})}\n")
    mp, ms = ev.mae_p.mean(axis=0), ev.mae_s.mean(axis=0)
    print(f"{len(ev.samples)} test samples, {ds.T - 1} steps: pressure MAE mean {mp.mean():.1f} psi "
          f"(max {mp.max():.1f}); saturation MAE mean {ms.mean():.4f} (max {ms.max():.4f})")
    if ckpt.config.e2co:
        worst = [float(E.field_rate_errors(r).max()) for r in ev.results]
        print(f"field-rate relative error, worst step per sample: {np.round(worst, 3).tolist()}")
    print(f"reports in {out}")
    return EXIT_OK


def cmd_bench(args):
    ckpt = _checkpoint(args.ckpt)
    ds = _dataset(args.data)
    if tuple(ckpt.config.grid) != ds.dims.shape:
        raise ConfigError(f"checkpoint grid {tuple(ckpt.config.grid)} does not match dataset grid {ds.dims.shape}")
    meta = ckpt.meta.get("train", {})
    tcfg = TR.TrainConfig(batch_size=int(meta.get("batch_size", 32)),
                          sectors_per_sample=int(meta.get("sectors_per_sample", 8)),
                          seed=int(meta.get("seed", 0)), e2co=bool(meta.get("e2co", False)),
                          weights=meta.get("weights", {}), lr=float(meta.get("lr", 1e-3)),
                          lr_schedule=str(meta.get("lr_schedule", "constant")))
    b = E.benchmark(ckpt, ds, batch=args.batch, train_epochs=not args.skip_training, train_config=tcfg,
                    repeats=args.repeats)
    path = b.write(Path(args.ckpt).with_name(Path(args.ckpt).stem + "_timing.csv"))
    print(f"simulator step {b.sim_step * 1e3:.2f} ms; surrogate step per case {b.infer_batch1 * 1e3:.2f} ms "
          f"(batch 1), {b.infer_batchB * 1e3:.3f} ms (batch {b.batch})")
    print(f"surrogate vs simulator speedup: {b.speedup_batch1:.1f}x (batch 1), {b.speedup_batchB:.1f}x "
          f"(batch {b.batch})")
    if b.ll_epoch is not None:
        print(f"epoch wall-clock: localized {b.ll_epoch:.2f} s, full-grid {b.fg_epoch:.2f} s, "
              f"ratio full/LL {b.epoch_ratio:.3f} (cell-touch ratio {b.cell_ratio:.3f})")
    print(f"timings in {path}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="lle2c", description="Localized-learning E2C(O) reservoir surrogate")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress (per-epoch losses)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate a dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a surrogate")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--full-grid", action="store_true", help="train on the whole grid (no sectors)")
    t.add_argument("--e2co", action="store_true", help="add the well-output head")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", help="closed-loop rollout on the test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_evaluate)

    b = sub.add_parser("bench", help="timing: surrogate vs simulator, localized vs full-grid epochs")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--batch", type=int, default=64)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--skip-training", action="store_true", help="only time inference and the simulator")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, DimensionError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_SIM
    except TrainingAbort as exc:
        print(f"training aborted: {exc}; batch {exc.provenance}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
