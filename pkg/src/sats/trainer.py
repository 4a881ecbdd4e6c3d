"""Training loops: one-stage baseline, separation stage and adaptation stage.

Every loop is mean-teacher self-training.  Per iteration a source batch
(possibly augmented) and a target batch are drawn, the EMA teacher
pseudo-labels the target batch, the student takes one AdamW step on
``L_S + L_T`` and the teacher is refreshed by EMA.
"""
from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from . import netcore
from .augment import (VirtualUnknownConfig, extract_unknown_mask, refine_hard_unknown_mask,
                      unknown_mixup, virtual_unknown_augment)
from .datamodel import ClassSpace, Dataset, LabeledImage, ValidationError
from .pseudolabel import (PseudoLabelConfig, closed_set_pseudo_label, confidence_weight,
                          identity_refinement, open_set_pseudo_label)

STAGE2_INIT = ("fresh", "stage1")


@dataclass(frozen=True)
class StageConfig:
    iterations: int = 4000
    batch_size: int = 2
    pretrain_steps: int = 200
    crop_size: Optional[int] = None
    pseudo: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    virtual: VirtualUnknownConfig = field(default_factory=VirtualUnknownConfig)
    alpha: float = 0.999
    seed: int = 0
    head_classes: Optional[frozenset] = None
    lr_backbone: float = 1e-4
    lr_head: float = 1e-3
    weight_decay: float = 0.01
    warmup_steps: int = 0
    hidden: int = 16
    features: int = 16
    stage2_init: str = "fresh"
    log_every: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValidationError("iterations must be >= 0 and batch_size >= 1")
        if self.pretrain_steps < 0:
            raise ValidationError("pretrain_steps must be >= 0")
        if self.iterations > 0 and self.pretrain_steps > self.iterations:
            raise ValidationError(f"pretrain_steps ({self.pretrain_steps}) exceeds iterations ({self.iterations})")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.crop_size is not None and self.crop_size < 8:
            raise ValidationError("crop_size must be >= 8")
        if self.stage2_init not in STAGE2_INIT:
            raise ValidationError(f"stage2_init must be one of {STAGE2_INIT}")

    @property
    def hard_unknowns(self) -> bool:
        return self.pretrain_steps < self.iterations


@dataclass
class TrainLogRecord:
    iteration: int
    loss_source: float
    loss_target: float
    q_t_mean: float
    unknown_fraction: float
    wall_ms: float
    phase: str = ""

    FIELDS = ("iteration", "phase", "loss_source", "loss_target", "q_t_mean", "unknown_fraction", "wall_ms")

    def row(self):
        return [self.iteration, self.phase, f"{self.loss_source:.6f}", f"{self.loss_target:.6f}",
                f"{self.q_t_mean:.6f}", f"{self.unknown_fraction:.6f}", f"{self.wall_ms:.1f}"]


# callback(iteration, target_index, base_mask, used_mask) for every mixup pairing
MaskHook = Callable[[int, int, np.ndarray, np.ndarray], None]


def initial_params(cfg: StageConfig, cs: ClassSpace, salt: int = 0) -> netcore.NetworkParams:
    """A K-class network whose head is then expanded to K+1."""
    base = netcore.init_params(cs.num_known, seed=_seed(cfg.seed, salt), hidden=cfg.hidden,
                               features=cfg.features)
    return netcore.expand_head(base, cs.num_known)


def _seed(seed: int, salt: int) -> int:
    return int(np.random.SeedSequence([seed, salt]).generate_state(1)[0])


def _check_inputs(source: Dataset, target: Dataset):
    if source.class_space.num_known != target.class_space.num_known:
        raise ValidationError("source and target disagree on the number of known classes")
    if len(source) == 0 or len(target) == 0:
        raise ValidationError("training needs non-empty source and target sets")


def _crop(rng, arrays, size):
    if size is None:
        return arrays
    h, w = arrays[0].shape[1:3]
    if size >= h and size >= w:
        return arrays
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return [a[:, y:y + size, x:x + size] for a in arrays]


class _Loop:
    """State shared by all three training procedures."""

    def __init__(self, cfg: StageConfig, cs: ClassSpace, params, log, name):
        self.cfg = cfg
        self.cs = cs
        self.student = params
        self.teacher = params.copy()
        self.opt = netcore.OptimState.for_params(
            params, lr_backbone=cfg.lr_backbone, lr_head=cfg.lr_head,
            weight_decay=cfg.weight_decay, warmup_steps=cfg.warmup_steps)
        self.log = log
        self.name = name
        self.t0 = time.perf_counter()

    def step(self, it, src_imgs, src_labels, tgt_imgs, pseudo, q, phase=""):
        cfg = self.cfg
        n_s = len(src_imgs)
        imgs = np.concatenate([src_imgs, tgt_imgs])
        labels = np.concatenate([src_labels, pseudo])
        w_src = netcore.mean_weights(src_labels)
        w_tgt = netcore.mean_weights(pseudo, np.asarray(q)[:, None, None] * np.ones(pseudo.shape))
        weights = np.concatenate([w_src, w_tgt])
        try:
            _, grads, nll = netcore.loss_and_grad(self.student, imgs, labels, weights, return_nll=True)
        except netcore.NonFiniteError as exc:
            raise netcore.NonFiniteError(f"{self.name} iteration {it}: {exc}") from exc
        loss_s = float((w_src * nll[:n_s]).sum())
        loss_t = float((w_tgt * nll[n_s:]).sum())
        if not (np.isfinite(loss_s) and np.isfinite(loss_t)):
            raise netcore.NonFiniteError(f"{self.name} iteration {it}: non-finite loss")
        self.student, self.opt = netcore.optimizer_step(self.student, grads, self.opt)
        self.teacher = netcore.ema_update(self.teacher, self.student, cfg.alpha)
        rec = TrainLogRecord(it, loss_s, loss_t, float(np.mean(q)),
                             float(np.mean(pseudo == self.cs.unknown_index)),
                             1000.0 * (time.perf_counter() - self.t0), phase)
        if self.log is not None:
            self.log.append(rec)
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            print(f"[{self.name}] it {it + 1}/{cfg.iterations} L_S={loss_s:.4f} L_T={loss_t:.4f} "
                  f"q={rec.q_t_mean:.3f} unk={rec.unknown_fraction:.3f}", file=sys.stderr)


def _open_set_run(cfg, source, target, log, name, virtual_unknowns, refine):
    _check_inputs(source, target)
    cs = source.class_space
    loop = _Loop(cfg, cs, initial_params(cfg, cs, salt=1), log, name)
    rng = np.random.default_rng(_seed(cfg.seed, 2))
    aug_rng = np.random.default_rng(_seed(cfg.seed, 3))
    src_imgs_all, src_lab_all = source.images(), source.labels()
    tgt_imgs_all = target.images()
    for it in range(cfg.iterations):
        si = rng.integers(0, len(source), cfg.batch_size)
        ti = rng.integers(0, len(target), cfg.batch_size)
        if virtual_unknowns:
            pairs = [virtual_unknown_augment(source[i], aug_rng, cfg.virtual, cs.unknown_index)[0] for i in si]
            s_img = np.stack([p.pixels for p in pairs])
            s_lab = np.stack([p.label for p in pairs])
        else:
            s_img, s_lab = src_imgs_all[si], src_lab_all[si]
        t_img = tgt_imgs_all[ti]
        s_img, s_lab = _crop(rng, [s_img, s_lab], cfg.crop_size)
        (t_img,) = _crop(rng, [t_img], cfg.crop_size)
        probs = netcore.forward(loop.teacher, t_img)
        pseudo = refine(open_set_pseudo_label(probs, cfg.pseudo.tau1), probs)
        q = confidence_weight(probs, cfg.pseudo.tau2)
        loop.step(it, s_img, s_lab, t_img, pseudo, q)
    return loop.student


def run_stage1(cfg: StageConfig, source: Dataset, target_train: Dataset,
               log: Optional[List[TrainLogRecord]] = None, refine=identity_refinement) -> netcore.NetworkParams:
    """Unknown detector: virtual-unknown source supervision plus open-set target pseudo labels."""
    return _open_set_run(cfg, source, target_train, log, "stage1", True, refine)


def run_one_stage_baseline(cfg: StageConfig, source: Dataset, target_train: Dataset,
                           log: Optional[List[TrainLogRecord]] = None,
                           refine=identity_refinement) -> netcore.NetworkParams:
    """Head-expansion baseline: same loop with plain source batches."""
    return _open_set_run(cfg, source, target_train, log, "baseline", False, refine)


def infer_unknowns(detector: netcore.NetworkParams, target_train: Dataset, batch_size: int = 16) -> Dataset:
    """Label every target image with the detector's (K+1)-way argmax map."""
    cs = target_train.class_space
    if detector.num_outputs != cs.num_classes:
        raise ValidationError(f"detector head has {detector.num_outputs} outputs, expected {cs.num_classes}")
    items = []
    imgs = target_train.images() if len(target_train) else np.zeros((0, 1, 1, 3), np.uint8)
    for s in range(0, len(target_train), batch_size):
        pred = netcore.predict(detector, imgs[s:s + batch_size])
        for k, lab in enumerate(pred):
            src = target_train[s + k]
            items.append(LabeledImage(src.pixels, lab, src.name))
    return Dataset(items, "target", cs)


def run_stage2(cfg: StageConfig, source: Dataset, target_train: Dataset, d_t_unk: Dataset,
               log: Optional[List[TrainLogRecord]] = None, mask_hook: Optional[MaskHook] = None,
               init: Optional[netcore.NetworkParams] = None,
               refine=identity_refinement) -> netcore.NetworkParams:
    """Unknown-aware adaptation.

    Source images receive target unknowns by mixup.  For the first
    ``pretrain_steps`` iterations the mask comes straight from the detector
    map; afterwards it is widened each step with pixels the current teacher
    calls unknown where the detector had said a head class.
    """
    _check_inputs(source, target_train)
    if len(d_t_unk) != len(target_train):
        raise ValidationError("detector labels must align 1:1 with the target training set")
    cs = source.class_space
    heads = cfg.head_classes if cfg.head_classes is not None else cs.head_classes
    if init is not None and cfg.stage2_init == "stage1":
        params = init.copy()
    else:
        params = initial_params(cfg, cs, salt=4)
    loop = _Loop(cfg, cs, params, log, "stage2")
    rng = np.random.default_rng(_seed(cfg.seed, 5))
    tgt_imgs_all = target_train.images()
    unk_labels = d_t_unk.labels()
    base_masks = unk_labels == cs.unknown_index
    for it in range(cfg.iterations):
        phase = "A" if it < cfg.pretrain_steps else "B"
        si = rng.integers(0, len(source), cfg.batch_size)
        ti = rng.integers(0, len(target_train), cfg.batch_size)
        pi = rng.integers(0, len(target_train), cfg.batch_size)
        t_img = tgt_imgs_all[ti]
        # one teacher pass covers the target batch and, in phase B, the mixup partners
        batch = np.concatenate([t_img, tgt_imgs_all[pi]]) if phase == "B" else t_img
        probs = netcore.forward(loop.teacher, batch)
        masks = []
        for k, j in enumerate(pi):
            base = base_masks[j]
            if phase == "B":
                current = closed_set_pseudo_label(probs[cfg.batch_size + k])
                mask = refine_hard_unknown_mask(unk_labels[j], current, heads, cs.unknown_index)
            else:
                mask = extract_unknown_mask(unk_labels[j], cs.unknown_index)
            if mask_hook is not None:
                mask_hook(it, int(j), base, mask)
            masks.append(mask)
        mixed = [unknown_mixup(source[i], target_train[j], m, cs.unknown_index)
                 for i, j, m in zip(si, pi, masks)]
        s_img = np.stack([m.pixels for m in mixed])
        s_lab = np.stack([m.label for m in mixed])
        probs_t = probs[: cfg.batch_size]
        s_img, s_lab = _crop(rng, [s_img, s_lab], cfg.crop_size)
        if cfg.crop_size is not None:
            t_img, probs_t = _crop(rng, [t_img, probs_t], cfg.crop_size)
        pseudo = refine(closed_set_pseudo_label(probs_t), probs_t)
        q = confidence_weight(probs_t, cfg.pseudo.tau2)
        loop.step(it, s_img, s_lab, t_img, pseudo, q, phase)
    return loop.student


def with_iterations(cfg: StageConfig, iterations: int) -> StageConfig:
    return replace(cfg, iterations=iterations, pretrain_steps=min(cfg.pretrain_steps, iterations))
