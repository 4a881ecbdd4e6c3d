"""Pseudo-label rules and the per-image confidence weight.

All functions accept a probability map ``(H, W, C)`` or a batch
``(N, H, W, C)`` whose last axis spans the K known classes plus unknown.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import ValidationError


@dataclass(frozen=True)
class PseudoLabelConfig:
    tau1: float = 0.5
    tau2: float = 0.968

    def __post_init__(self):
        for name in ("tau1", "tau2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1), got {v}")


def open_set_pseudo_label(probs: np.ndarray, tau1: float) -> np.ndarray:
    """Best known class if its probability reaches ``tau1``, otherwise unknown.

    The unknown channel never competes in the max; it is only reached through
    the fallback branch.
    """
    probs = np.asarray(probs)
    unknown = probs.shape[-1] - 1
    known = probs[..., :unknown]
    best = np.argmax(known, axis=-1)
    conf = np.take_along_axis(known, best[..., None], axis=-1)[..., 0]
    return np.where(conf >= tau1, best, unknown).astype(np.uint8)


def closed_set_pseudo_label(probs: np.ndarray) -> np.ndarray:
    """Argmax over every channel, unknown included; ties go to the lowest index."""
    return np.argmax(np.asarray(probs), axis=-1).astype(np.uint8)


def confidence_weight(probs: np.ndarray, tau2: float):
    """Fraction of all ``H*W`` pixels whose top probability is strictly above ``tau2``.

    Returns a float for one map and an ``(N,)`` array for a batch.
    """
    probs = np.asarray(probs)
    confident = probs.max(axis=-1) > tau2
    if probs.ndim == 3:
        return float(confident.mean())
    return confident.reshape(confident.shape[0], -1).mean(axis=1)


def identity_refinement(pseudo_label: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Default pseudo-label refinement hook (no external refiner)."""
    return pseudo_label
