"""Mask construction and image/label composition.

Covers virtual-unknown polygons for the separation stage, unknown mixup for
the adaptation stage and the hard-unknown mask refinement.  Masks are boolean
``(H, W)`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .datamodel import LabeledImage, ValidationError

MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class Polygon:
    vertices: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        verts = tuple((int(x), int(y)) for x, y in self.vertices)
        if len(verts) < 3:
            raise ValidationError(f"polygon needs >= 3 vertices, got {len(verts)}")
        object.__setattr__(self, "vertices", verts)

    def in_bounds(self, height: int, width: int) -> bool:
        return all(0 <= x <= width - 1 and 0 <= y <= height - 1 for x, y in self.vertices)


@dataclass(frozen=True)
class VirtualUnknownConfig:
    gamma: float = 0.25
    vertex_count_range: Tuple[int, int] = (3, 8)
    polygons_per_image: int = 1

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValidationError(f"gamma must lie in (0, 1), got {self.gamma}")
        lo, hi = self.vertex_count_range
        if lo < 3 or hi < lo:
            raise ValidationError(f"bad vertex_count_range {self.vertex_count_range}")
        if self.polygons_per_image < 1:
            raise ValidationError("polygons_per_image must be >= 1")

    def area_band(self, height: int, width: int) -> Tuple[float, float]:
        target = self.gamma * height * width / self.polygons_per_image
        return 0.5 * target, 1.5 * target


def rasterize_polygon(poly: Polygon, height: int, width: int) -> np.ndarray:
    """Scanline fill with the even-odd rule, sampling pixel centres.

    An edge is active on scanline ``y + 0.5`` when ``ymin <= y + 0.5 < ymax``;
    along the row a span ``[xa, xb)`` covers the pixel centres it contains.
    """
    mask = np.zeros((height, width), dtype=bool)
    verts = poly.vertices
    edges = []
    for i in range(len(verts)):
        (x0, y0), (x1, y1) = verts[i], verts[(i + 1) % len(verts)]
        if y0 == y1:
            continue
        if y0 > y1:
            x0, y0, x1, y1 = x1, y1, x0, y0
        edges.append((y0, y1, x0, x1 - x0))
    if not edges:
        return mask
    ys = [v[1] for v in verts]
    row_lo = max(0, int(np.floor(min(ys))))
    row_hi = min(height - 1, int(np.ceil(max(ys))))
    for row in range(row_lo, row_hi + 1):
        yc = row + 0.5
        # multiply before dividing so crossings landing on a pixel centre are exact
        xs = sorted(x0 + (yc - y0) * dx / (y1 - y0) for y0, y1, x0, dx in edges if y0 <= yc < y1)
        for xa, xb in zip(xs[0::2], xs[1::2]):
            # first/last pixel index whose centre c satisfies xa <= c < xb
            start = max(0, int(np.ceil(xa - 0.5)))
            stop = min(width, int(np.ceil(xb - 0.5)))
            if stop > start:
                mask[row, start:stop] = True
    return mask


def _scale_vertices(verts: np.ndarray, factor: float, height: int, width: int) -> np.ndarray:
    centre = verts.mean(axis=0)
    scaled = centre + (verts - centre) * factor
    # shift back into the frame before clipping so large polygons keep their shape
    lo = scaled.min(axis=0)
    hi = scaled.max(axis=0)
    limit = np.array([width - 1, height - 1], dtype=float)
    shift = np.where(lo < 0, -lo, 0.0) + np.where(hi > limit, limit - hi, 0.0)
    scaled = scaled + shift
    return np.clip(np.rint(scaled), 0, limit).astype(int)


def sample_polygon(rng: np.random.Generator, height: int, width: int,
                   cfg: VirtualUnknownConfig = VirtualUnknownConfig()) -> Polygon:
    """Random vertices joined in sampling order, rescaled towards the gamma area target."""
    if height < 4 or width < 4:
        raise ValidationError("image must be at least 4x4 for virtual unknowns")
    lo_area, hi_area = cfg.area_band(height, width)
    target = 0.5 * (lo_area + hi_area)
    best, best_gap = None, np.inf
    vmin, vmax = cfg.vertex_count_range
    for _ in range(MAX_ATTEMPTS):
        n = int(rng.integers(vmin, vmax + 1))
        verts = np.stack([rng.integers(0, width, n), rng.integers(0, height, n)], axis=1)
        area = rasterize_polygon(Polygon(verts), height, width).sum()
        if area == 0:
            continue
        verts = _scale_vertices(verts.astype(float), np.sqrt(target / area), height, width)
        poly = Polygon(verts)
        area = int(rasterize_polygon(poly, height, width).sum())
        if lo_area <= area <= hi_area:
            return poly
        gap = min(abs(area - lo_area), abs(area - hi_area))
        if gap < best_gap:
            best, best_gap = poly, gap
    if best is None:
        best = Polygon([(0, 0), (width - 1, 0), (0, height - 1)])
    return best


def random_color(rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 256, size=3).astype(np.uint8)


def _check_same_size(*arrays):
    shapes = {a.shape[:2] for a in arrays}
    if len(shapes) != 1:
        raise ValidationError(f"raster size mismatch: {sorted(shapes)}")


def compose_virtual_unknown(img: LabeledImage, mask: np.ndarray, color, unknown_index: int) -> LabeledImage:
    """Paint ``color`` into ``mask`` and relabel those pixels as unknown (mask beats ignore)."""
    m = np.asarray(mask, dtype=bool)
    _check_same_size(img.pixels, m)
    c = np.asarray(color, dtype=np.uint8).reshape(1, 1, 3)
    pixels = np.where(m[..., None], c, img.pixels)
    label = np.where(m, np.uint8(unknown_index), img.label)
    return LabeledImage(pixels, label, img.name)


def virtual_unknown_augment(img: LabeledImage, rng: np.random.Generator, cfg: VirtualUnknownConfig,
                            unknown_index: int) -> Tuple[LabeledImage, np.ndarray]:
    """Apply ``cfg.polygons_per_image`` random polygons; returns the image and the union mask."""
    h, w = img.height, img.width
    union = np.zeros((h, w), dtype=bool)
    out = img
    for _ in range(cfg.polygons_per_image):
        m = rasterize_polygon(sample_polygon(rng, h, w, cfg), h, w)
        out = compose_virtual_unknown(out, m, random_color(rng), unknown_index)
        union |= m
    return out, union


def extract_unknown_mask(pred: np.ndarray, unknown_index: int) -> np.ndarray:
    return np.asarray(pred) == unknown_index


def unknown_mixup(src: LabeledImage, tgt: LabeledImage, mask: np.ndarray, unknown_index: int) -> LabeledImage:
    """Paste the masked target pixels into the source image, labelled unknown."""
    m = np.asarray(mask, dtype=bool)
    _check_same_size(src.pixels, tgt.pixels, m)
    pixels = np.where(m[..., None], tgt.pixels, src.pixels)
    label = np.where(m, np.uint8(unknown_index), src.label)
    return LabeledImage(pixels, label, src.name)


def refine_hard_unknown_mask(stage1_pred: np.ndarray, stage2_pseudo: np.ndarray,
                             head_classes, unknown_index: int) -> np.ndarray:
    """Unknown in the detector map, or unknown now where the detector said a head class."""
    s1 = np.asarray(stage1_pred)
    s2 = np.asarray(stage2_pseudo)
    if s1.shape != s2.shape:
        raise ValidationError(f"label map size mismatch: {s1.shape} vs {s2.shape}")
    heads = np.fromiter(sorted(head_classes), dtype=np.int64)
    return (s1 == unknown_index) | ((s2 == unknown_index) & np.isin(s1, heads))


def mask_fraction(masks: Sequence[np.ndarray]) -> float:
    total = sum(m.size for m in masks)
    return float(sum(int(m.sum()) for m in masks)) / total if total else 0.0
