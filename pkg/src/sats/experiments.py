"""Toy-scale ablation (configs A-D) and the tau1 sensitivity sweep.

Config letters follow the component ablation:

* ``A``: one-stage head-expansion baseline
* ``B``: separation stage only (virtual unknowns), evaluated directly
* ``C``: B's detector followed by adaptation without hard-unknown exploration
* ``D``: full two-stage pipeline
"""
from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence

import numpy as np

from .metrics import MetricsReport, evaluate
from .trainer import (StageConfig, TrainLogRecord, infer_unknowns, run_one_stage_baseline, run_stage1,
                      run_stage2)

CONFIGS = ("A", "B", "C", "D")


@dataclass
class SeedResult:
    seed: int
    reports: Dict[str, MetricsReport]
    logs: Dict[str, List[TrainLogRecord]] = field(default_factory=dict)
    # pointwise superset checks between phase-B and phase-A mixup masks
    mask_checks: int = 0
    mask_violations: int = 0
    seconds: float = 0.0


def _note(msg, verbose):
    if verbose:
        print(msg, file=sys.stderr, flush=True)


def run_seed(cfg: StageConfig, source, target, val, seed: int, configs: Sequence[str] = CONFIGS,
             verbose: bool = False) -> SeedResult:
    cfg = replace(cfg, seed=seed)
    t0 = time.perf_counter()
    res = SeedResult(seed, {})
    if "A" in configs:
        res.logs["A"] = []
        res.reports["A"] = evaluate(run_one_stage_baseline(cfg, source, target, log=res.logs["A"]), val)
        _note(f"seed {seed} A: {res.reports['A'].as_percent()}", verbose)
    if not {"B", "C", "D"} & set(configs):
        res.seconds = time.perf_counter() - t0
        return res
    res.logs["B"] = []
    detector = run_stage1(cfg, source, target, log=res.logs["B"])
    res.reports["B"] = evaluate(detector, val)
    _note(f"seed {seed} B: {res.reports['B'].as_percent()}", verbose)
    d_unk = infer_unknowns(detector, target)
    if "C" in configs:
        res.logs["C"] = []
        model = run_stage2(replace(cfg, pretrain_steps=cfg.iterations), source, target, d_unk,
                           log=res.logs["C"], init=detector)
        res.reports["C"] = evaluate(model, val)
        _note(f"seed {seed} C: {res.reports['C'].as_percent()}", verbose)
    if "D" in configs:
        res.logs["D"] = []

        def check(it, j, base, used):
            if it >= cfg.pretrain_steps:
                res.mask_checks += 1
                res.mask_violations += int(not (used >= base).all())

        model = run_stage2(cfg, source, target, d_unk, log=res.logs["D"], mask_hook=check, init=detector)
        res.reports["D"] = evaluate(model, val)
        _note(f"seed {seed} D: {res.reports['D'].as_percent()}", verbose)
    res.seconds = time.perf_counter() - t0
    return res


def run_ablation(cfg: StageConfig, source, target, val, seeds: Sequence[int],
                 configs: Sequence[str] = CONFIGS, verbose: bool = False) -> List[SeedResult]:
    return [run_seed(cfg, source, target, val, s, configs, verbose) for s in seeds]


def summarize(results: List[SeedResult]) -> Dict[str, Dict[str, float]]:
    """Mean and std (percent) of common / private / H-Score per config."""
    out = {}
    configs = [c for c in CONFIGS if all(c in r.reports for r in results)]
    for c in configs:
        row = {}
        for key, attr in (("common", "common_miou"), ("private", "private_iou"), ("h_score", "h_score")):
            vals = np.array([100 * getattr(r.reports[c], attr) for r in results])
            row[key] = float(vals.mean())
            row[f"{key}_std"] = float(vals.std())
        out[c] = row
    return out


def ablation_rows(results: List[SeedResult]) -> List[List[str]]:
    rows = [["config", "seed", "common", "private", "h_score"]]
    for r in results:
        for c in CONFIGS:
            if c in r.reports:
                p = r.reports[c].as_percent()
                rows.append([c, str(r.seed), f"{p['common']:.2f}", f"{p['private']:.2f}", f"{p['h_score']:.2f}"])
    for c, s in summarize(results).items():
        rows.append([c, "mean", f"{s['common']:.2f}", f"{s['private']:.2f}", f"{s['h_score']:.2f}"])
    return rows


def sweep_tau1(cfg: StageConfig, source, target, val, values: Sequence[float], pipeline: str = "baseline",
               verbose: bool = False) -> List[tuple]:
    """One toy run per tau1; returns ``(tau1, common, private, h_score)`` in percent."""
    rows = []
    for t in values:
        c = replace(cfg, pseudo=replace(cfg.pseudo, tau1=t))
        res = run_seed(c, source, target, val, cfg.seed, ("A",) if pipeline == "baseline" else ("D",))
        rep = res.reports["A" if pipeline == "baseline" else "D"]
        p = rep.as_percent()
        rows.append((t, p["common"], p["private"], p["h_score"]))
        _note(f"tau1={t}: {p}", verbose)
    return rows


def dedupe_values(values: Sequence[float]):
    """Sorted unique values and whether any duplicates were dropped."""
    uniq = sorted(set(float(v) for v in values))
    return uniq, len(uniq) != len(values)
