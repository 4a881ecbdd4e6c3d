"""Deterministic two-domain shapes benchmark.

Class 0 is a textured background; known foreground classes are rectangles,
circles and triangles, each with its own base hue.  Target images add
private-class crosses and rings whose hues sit ``private_hue_offset`` degrees
away from the known foreground hues, then pass through a per-channel affine
colour shift plus Gaussian noise.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .augment import Polygon, rasterize_polygon
from .datamodel import IGNORE_INDEX, ClassSpace, Dataset, LabeledImage, ValidationError

KNOWN_SHAPES = ("rectangle", "circle", "triangle")
PRIVATE_SHAPES = ("cross", "ring")


@dataclass(frozen=True)
class DomainShift:
    gain: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_std: float = 0.0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValidationError("noise std must be >= 0")

    @property
    def is_identity(self) -> bool:
        return self.gain == (1.0, 1.0, 1.0) and self.bias == (0.0, 0.0, 0.0) and self.noise_std == 0


# mild enough that shifted background is not mistaken for a novel colour
DEFAULT_SHIFT = DomainShift(gain=(0.925, 1.025, 1.1), bias=(5.0, -7.5, 10.0), noise_std=5.0)


@dataclass(frozen=True)
class BenchConfig:
    image_size: int = 64
    num_known: int = 3
    num_private: int = 2
    train_count: int = 200
    val_count: int = 50
    shift: DomainShift = field(default_factory=lambda: DEFAULT_SHIFT)
    # close enough that some private pixels pass for a head class
    private_hue_offset: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.num_known < 2:
            raise ValidationError(f"num_known must be >= 2 (background + 1 shape), got {self.num_known}")
        if self.num_private < 1:
            raise ValidationError(f"num_private must be >= 1 for an open-set target, got {self.num_private}")
        if self.image_size < 16:
            raise ValidationError(f"image_size must be >= 16, got {self.image_size}")
        if self.train_count < 1 or self.val_count < 1:
            raise ValidationError("split sizes must be >= 1")
        if not 0.0 <= self.private_hue_offset <= 180.0:
            raise ValidationError("private_hue_offset must lie in [0, 180] degrees")

    @property
    def class_space(self) -> ClassSpace:
        return ClassSpace(self.num_known, self.num_private)


def _hsv_rgb(hue_deg: float, sat: float, val: float) -> np.ndarray:
    r, g, b = colorsys.hsv_to_rgb((hue_deg % 360.0) / 360.0, sat, val)
    return np.array([r, g, b]) * 255.0


def class_palette(cfg: BenchConfig) -> Dict[str, np.ndarray]:
    """Base colours: ``known`` has K rows (row 0 is background), ``private`` K' rows."""
    n_fg = cfg.num_known - 1
    fg_hues = [360.0 * i / n_fg for i in range(n_fg)]
    known = [np.array([110.0, 105.0, 100.0])] + [_hsv_rgb(h, 0.8, 0.85) for h in fg_hues]
    private = [_hsv_rgb(fg_hues[j % n_fg] + cfg.private_hue_offset * (1 if j % 2 == 0 else -1)
                        + 15.0 * (j // (2 * n_fg)), 0.8, 0.85)
               for j in range(cfg.num_private)]
    return {"known": np.stack(known), "private": np.stack(private)}


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size]
    return yy + 0.5, xx + 0.5


def _shape_mask(kind: str, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    r = rng.uniform(0.09, 0.17) * size
    cy, cx = rng.uniform(r, size - r, 2)
    if kind == "rectangle":
        hh, hw = r * rng.uniform(0.6, 1.0), r * rng.uniform(0.6, 1.0)
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "triangle":
        ang = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3])
        verts = np.stack([cx + 1.2 * r * np.cos(ang), cy + 1.2 * r * np.sin(ang)], axis=1)
        verts = np.clip(np.rint(verts), 0, size - 1)
        return rasterize_polygon(Polygon(verts), size, size)
    if kind == "cross":
        t = r * 0.35
        return ((np.abs(yy - cy) <= t) & (np.abs(xx - cx) <= r)) | ((np.abs(xx - cx) <= t) & (np.abs(yy - cy) <= r))
    if kind == "ring":
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(kind)


def _background(rng: np.random.Generator, size: int, base: np.ndarray) -> np.ndarray:
    yy, xx = _grid(size)
    fy, fx = rng.uniform(0.05, 0.2, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    wave = 12.0 * np.sin(fy * yy + phase[0]) * np.cos(fx * xx + phase[1])
    img = base[None, None, :] + wave[..., None] + rng.normal(0, 6.0, (size, size, 3))
    return img


def _render(rng: np.random.Generator, cfg: BenchConfig, palette, with_private: bool):
    size = cfg.image_size
    img = _background(rng, size, palette["known"][0])
    label = np.zeros((size, size), dtype=np.uint8)
    objects = [(k, False) for k in rng.integers(1, cfg.num_known, size=int(rng.integers(2, 5)))]
    if with_private:
        objects += [(j, True) for j in rng.integers(0, cfg.num_private, size=int(rng.integers(1, 3)))]
    for cls, private in objects:
        kind = PRIVATE_SHAPES[cls % len(PRIVATE_SHAPES)] if private else KNOWN_SHAPES[(cls - 1) % len(KNOWN_SHAPES)]
        m = _shape_mask(kind, rng, size)
        base = palette["private"][cls] if private else palette["known"][cls]
        color = base + rng.uniform(-15, 15, 3)
        texture = rng.normal(0, 6.0, (size, size, 3))
        img = np.where(m[..., None], color[None, None, :] + texture, img)
        label[m] = cfg.num_known if private else cls
    return img, label


def _apply_shift(img: np.ndarray, shift: DomainShift, rng: np.random.Generator) -> np.ndarray:
    out = img * np.asarray(shift.gain)[None, None, :] + np.asarray(shift.bias)[None, None, :]
    if shift.noise_std > 0:
        out = out + rng.normal(0, shift.noise_std, img.shape)
    return out


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _split(cfg: BenchConfig, which: str, count: int, palette, seq: np.random.SeedSequence) -> Dataset:
    cs = cfg.class_space
    items = []
    for i, child in enumerate(seq.spawn(count)):
        render_rng, shift_rng = (np.random.default_rng(s) for s in child.spawn(2))
        target = which != "source"
        img, label = _render(render_rng, cfg, palette, with_private=target)
        if target:
            img = _apply_shift(img, cfg.shift, shift_rng)
        if which == "target":
            label = np.full_like(label, IGNORE_INDEX)
        items.append(LabeledImage(_to_u8(img), label, name=f"{which}_{i:05d}"))
    return Dataset(items, which, cs)


def generate_benchmark(cfg: BenchConfig = BenchConfig()):
    """Return ``(source, target_train, target_val)``; a pure function of ``cfg``."""
    palette = class_palette(cfg)
    root = np.random.SeedSequence(cfg.seed)
    s_src, s_tgt, s_val = root.spawn(3)
    source = _split(cfg, "source", cfg.train_count, palette, s_src)
    target = _split(cfg, "target", cfg.train_count, palette, s_tgt)
    val = _split(cfg, "target_val", cfg.val_count, palette, s_val)
    heads = default_head_classes(source)
    cs = cfg.class_space.with_head_classes(heads)
    for ds in (source, target, val):
        ds.class_space = cs
    return source, target, val


def class_pixel_frequencies(ds: Dataset) -> np.ndarray:
    """Pixel count per class ``0..K`` over non-ignore pixels."""
    n = ds.class_space.num_classes
    counts = np.zeros(n, dtype=np.int64)
    for it in ds.items:
        lab = it.label[it.label != IGNORE_INDEX]
        counts += np.bincount(lab.ravel(), minlength=n)[:n]
    return counts


def default_head_classes(source: Dataset) -> frozenset:
    """Background plus the most frequent foreground known class."""
    counts = class_pixel_frequencies(source)[: source.class_space.num_known]
    fg = 1 + int(np.argmax(counts[1:])) if len(counts) > 1 else 0
    return frozenset({0, fg})
