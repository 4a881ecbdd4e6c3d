"""Command-line entry point: ``sats <command> [options]``.

Exit status is 0 on success, 2 for validation or usage errors and 1 for
runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import os
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import netcore, plotting
from .augment import virtual_unknown_augment
from .config import ExperimentConfig
from .datamodel import (ValidationError, read_dataset, save_label_map, validate_dataset, write_dataset)
from .experiments import ablation_rows, dedupe_values, run_ablation, summarize, sweep_tau1
from .metrics import evaluate, report_rows
from .synthbench import class_pixel_frequencies, generate_benchmark
from .trainer import TrainLogRecord, infer_unknowns, run_one_stage_baseline, run_stage1, run_stage2

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SPLITS = ("source", "target_train", "target_val")


class UsageError(Exception):
    """Missing prerequisite or invalid request; maps to exit status 2."""


def _csv(path, rows):
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


@contextmanager
def _staged(final: Path):
    """Build a directory next to ``final`` and swap it in only on success."""
    final = Path(final)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = final.with_name(f".{final.name}.tmp-{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)


def _load_splits(cfg: ExperimentConfig, names=SPLITS):
    root = cfg.data
    out = []
    for name in names:
        path = root / name
        if not (path / "dataset.txt").exists():
            raise UsageError(f"missing dataset {path} (run 'sats gen-data' first or pass --data)")
        out.append(read_dataset(path))
    return out


def _write_log(path, records):
    _csv(path, [list(TrainLogRecord.FIELDS)] + [r.row() for r in records])


def _figures(cfg):
    return cfg.get("figures", True)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    bench = cfg.bench()
    splits = generate_benchmark(bench)
    with _staged(cfg.data) as tmp:
        for name, ds in zip(SPLITS, splits):
            problems = validate_dataset(ds)
            if problems:
                raise ValidationError(f"{name}: {problems[0]}")
            write_dataset(ds, tmp / name)
    cs = splits[0].class_space
    print(f"wrote {cfg.data}: K={cs.num_known} K'={cs.num_private} head classes={sorted(cs.head_classes)}")
    for name, ds in zip(SPLITS, splits):
        freq = class_pixel_frequencies(ds)
        print(f"  {name:<13} {len(ds):4d} images  class pixels {freq.tolist()}")
    if args.dump_masks:
        _dump_masks(cfg, splits[0], Path(args.dump_masks))
    return EXIT_OK


def _dump_masks(cfg, source, out_dir: Path, count: int = 8):
    out_dir.mkdir(parents=True, exist_ok=True)
    st = cfg.stage()
    rng = np.random.default_rng(cfg.seed)
    for i in range(min(count, len(source))):
        aug, mask = virtual_unknown_augment(source[i], rng, st.virtual, source.class_space.unknown_index)
        save_label_map(mask.astype(np.uint8) * 255, out_dir / f"mask_{i:03d}.png")
        save_label_map(aug.label, out_dir / f"label_{i:03d}.png")


def _resolve_unknowns(cfg, args, target):
    """D_T^unk from --unk-dir, --detector, or the defaults under --out."""
    unk_dir = Path(args.unk_dir) if args.unk_dir else None
    detector = Path(args.detector) if args.detector else None
    if unk_dir is None and detector is None:
        if (cfg.out / "unk" / "dataset.txt").exists():
            unk_dir = cfg.out / "unk"
        elif (cfg.out / "stage1" / "model.ckpt").exists():
            detector = cfg.out / "stage1" / "model.ckpt"
        else:
            raise UsageError("stage2 needs a detector checkpoint (--detector) or inferred unknowns (--unk-dir)")
    if unk_dir is not None:
        if not (unk_dir / "dataset.txt").exists():
            raise UsageError(f"no inferred unknowns at {unk_dir}")
        d_unk = read_dataset(unk_dir, class_space=target.class_space, domain_tag="target")
        return d_unk, None
    if not detector.exists():
        raise UsageError(f"detector checkpoint {detector} does not exist")
    params, _ = netcore.load_checkpoint(detector)
    if params.num_outputs != target.class_space.num_classes:
        raise UsageError(f"detector head has {params.num_outputs} outputs, expected K+1")
    return infer_unknowns(params, target), params


def cmd_train(cfg: ExperimentConfig, args) -> int:
    stage = args.stage
    source, target = _load_splits(cfg, ("source", "target_train"))
    st = cfg.stage()
    log = []
    meta = {"stage": stage, "seed": st.seed, "iterations": st.iterations, "num_known": source.class_space.num_known}
    if stage == "stage1":
        params = run_stage1(st, source, target, log=log)
    elif stage == "baseline":
        params = run_one_stage_baseline(st, source, target, log=log)
    else:
        d_unk, detector = _resolve_unknowns(cfg, args, target)
        params = run_stage2(st, source, target, d_unk, log=log, init=detector)
    out = cfg.out / stage
    out.mkdir(parents=True, exist_ok=True)
    netcore.save_checkpoint(params, out / "model.ckpt", meta)
    _write_log(out / "log.csv", log)
    if log and _figures(cfg):
        plotting.training_curves(log, out / "training.svg", title=stage)
    last = log[-1] if log else None
    if last:
        print(f"{stage}: {st.iterations} iterations  L_S={last.loss_source:.4f}  L_T={last.loss_target:.4f}")
    else:
        print(f"{stage}: 0 iterations, wrote initial parameters")
    return EXIT_OK


def cmd_infer_unk(cfg: ExperimentConfig, args) -> int:
    (target,) = _load_splits(cfg, ("target_train",))
    path = Path(args.detector) if args.detector else cfg.out / "stage1" / "model.ckpt"
    if not path.exists():
        raise UsageError(f"detector checkpoint {path} does not exist")
    params, _ = netcore.load_checkpoint(path)
    if params.num_outputs != target.class_space.num_classes:
        raise UsageError(f"detector head has {params.num_outputs} outputs, expected K+1="
                         f"{target.class_space.num_classes}")
    d_unk = infer_unknowns(params, target)
    with _staged(cfg.out / "unk") as tmp:
        write_dataset(d_unk, tmp)
    unk = target.class_space.unknown_index
    frac = np.mean([(it.label == unk).any() for it in d_unk])
    print(f"wrote {len(d_unk)} label maps to {cfg.out / 'unk'}; {100 * frac:.1f}% contain unknown pixels")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    val_dir = Path(args.val) if args.val else cfg.data / "target_val"
    if not (val_dir / "dataset.txt").exists():
        raise UsageError(f"no validation set at {val_dir}")
    val = read_dataset(val_dir)
    if len(val) == 0:
        raise UsageError(f"validation set {val_dir} is empty")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    params, meta = netcore.load_checkpoint(ckpt)
    if params.num_outputs != val.class_space.num_classes:
        raise UsageError(f"model head has {params.num_outputs} outputs, expected K+1={val.class_space.num_classes}")
    report = evaluate(params, val)
    out = cfg.out / "eval" / (args.name or meta.get("stage", ckpt.stem))
    out.mkdir(parents=True, exist_ok=True)
    rows = report_rows(report)
    if report.excluded_classes:
        rows.append(["excluded_from_common", " ".join(str(c) for c in report.excluded_classes)])
    _csv(out / "metrics.csv", rows)
    if _figures(cfg):
        plotting.metrics_bar(report, out / "metrics.svg")
    pct = report.as_percent()
    print(f"common {pct['common']:.2f}  private {pct['private']:.2f}  H-Score {pct['h_score']:.2f}")
    return EXIT_OK


def cmd_sweep_tau1(cfg: ExperimentConfig, args) -> int:
    raw = args.values if args.values is not None else cfg.get("tau1_values")
    if raw is None:
        raise UsageError("no tau1 values given (use --values or tau1_values in the config)")
    values = [float(v) for v in str(raw).replace(",", " ").split()] if isinstance(raw, str) else list(raw)
    bad = [v for v in values if not 0.0 < v < 1.0]
    if bad:
        raise UsageError(f"tau1 values must lie in (0, 1): {bad}")
    values, dropped = dedupe_values(values)
    if dropped:
        print("warning: duplicate tau1 values removed", file=sys.stderr)
    if len(values) < 2:
        raise UsageError("sweep needs at least two distinct tau1 values")
    source, target, val = _load_splits(cfg)
    pipeline = args.pipeline or cfg.get("sweep_pipeline", "baseline")
    rows = sweep_tau1(cfg.stage(), source, target, val, values, pipeline, verbose=args.verbose)
    out = cfg.out / "sweep_tau1"
    out.mkdir(parents=True, exist_ok=True)
    _csv(out / "sweep_tau1.csv", [["tau1", "common", "private", "h_score"]] +
         [[f"{t:g}", f"{c:.2f}", f"{p:.2f}", f"{h:.2f}"] for t, c, p, h in rows])
    if _figures(cfg):
        plotting.sweep_curve(rows, out / "sweep_tau1.svg")
    for t, c, p, h in rows:
        print(f"tau1={t:g}  common {c:.2f}  private {p:.2f}  H-Score {h:.2f}")
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args) -> int:
    source, target, val = _load_splits(cfg)
    seeds = cfg.seeds
    results = run_ablation(cfg.stage(), source, target, val, seeds, verbose=args.verbose)
    out = cfg.out / "report"
    out.mkdir(parents=True, exist_ok=True)
    _csv(out / "ablation.csv", ablation_rows(results))
    checks = sum(r.mask_checks for r in results)
    bad = sum(r.mask_violations for r in results)
    _csv(out / "mask_checks.csv", [["seed", "checks", "violations"]] +
         [[r.seed, r.mask_checks, r.mask_violations] for r in results])
    summary = summarize(results)
    if _figures(cfg):
        plotting.ablation_bars(summary, out / "ablation.svg")
        for r in results:
            for c, log in r.logs.items():
                plotting.training_curves(log, out / f"training_{c}_seed{r.seed}.svg", title=f"config {c}, seed {r.seed}")
    for c, s in summary.items():
        print(f"{c}: common {s['common']:.2f}  private {s['private']:.2f}  H-Score {s['h_score']:.2f}")
    print(f"phase-B mask superset checks: {checks}, violations: {bad}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _common(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output root (default: runs)")
    p.add_argument("--data", help="dataset root (default: <out>/data)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--tau1", type=float)
    p.add_argument("--tau2", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--no-figures", action="store_true", help="skip matplotlib figures")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sats", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic two-domain benchmark")
    _common(p)
    p.add_argument("--dump-masks", metavar="DIR", help="also write sample virtual-unknown masks as PNG")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train stage1, stage2 or the one-stage baseline")
    p.add_argument("stage", choices=("stage1", "stage2", "baseline"))
    _common(p)
    p.add_argument("--detector", help="stage-1 checkpoint (stage2)")
    p.add_argument("--unk-dir", help="precomputed inferred-unknown dataset (stage2)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer-unk", help="label the target training set with a stage-1 detector")
    _common(p)
    p.add_argument("--detector", help="stage-1 checkpoint (default: <out>/stage1/model.ckpt)")
    p.set_defaults(func=cmd_infer_unk)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the target validation set")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--val", help="validation dataset dir (default: <data>/target_val)")
    p.add_argument("--name", help="report sub-directory name")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-tau1", help="H-Score as a function of tau1")
    _common(p)
    p.add_argument("--values", help="comma-separated tau1 values")
    p.add_argument("--pipeline", choices=("baseline", "sats"))
    p.set_defaults(func=cmd_sweep_tau1)

    p = sub.add_parser("report", help="run the A-D ablation over several seeds and plot it")
    _common(p)
    p.add_argument("--seeds", help="comma-separated training seeds (default 0,1,2)")
    p.set_defaults(func=cmd_report)
    return parser


def _overrides(args):
    keys = ("seed", "out", "data", "iterations", "tau1", "tau2", "alpha", "gamma")
    ov = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "no_figures", False):
        ov["figures"] = False
    if getattr(args, "seeds", None):
        ov["seeds"] = tuple(int(s) for s in args.seeds.replace(",", " ").split())
    if getattr(args, "verbose", False) and getattr(args, "iterations", None) != 0:
        ov["log_every"] = 500
    return ov


def _limit_threads():
    n = os.environ.get("SATS_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = ExperimentConfig.build(args.config, _overrides(args))
    except (ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    limiter = _limit_threads()
    try:
        return args.func(cfg, args)
    except (UsageError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
