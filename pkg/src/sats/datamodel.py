"""Rasters, class-space conventions, dataset containers and PNG IO.

Class indices are 0-based: known classes are ``0..K-1``, the single unknown
class is ``K`` and ``255`` marks pixels excluded from losses and metrics.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from PIL import Image

IGNORE_INDEX = 255

DOMAIN_TAGS = ("source", "target", "target_val")


class ValidationError(ValueError):
    """Raised when a raster or dataset breaks one of its invariants."""


@dataclass(frozen=True)
class ClassSpace:
    num_known: int
    num_private: int = 0
    head_classes: frozenset = field(default_factory=frozenset)
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if self.num_known < 1:
            raise ValidationError(f"num_known must be >= 1, got {self.num_known}")
        if self.num_private < 0:
            raise ValidationError(f"num_private must be >= 0, got {self.num_private}")
        if self.num_known >= self.ignore_index:
            raise ValidationError("num_known collides with the ignore sentinel")
        object.__setattr__(self, "head_classes", frozenset(int(c) for c in self.head_classes))
        bad = [c for c in self.head_classes if not 0 <= c < self.num_known]
        if bad:
            raise ValidationError(f"head classes must be known classes, got {sorted(bad)}")

    @property
    def unknown_index(self) -> int:
        return self.num_known

    @property
    def num_classes(self) -> int:
        """Size of the expanded (K+1) label space."""
        return self.num_known + 1

    def valid_labels(self) -> np.ndarray:
        return np.array(list(range(self.num_known + 1)) + [self.ignore_index])

    def with_head_classes(self, head_classes: Iterable[int]) -> "ClassSpace":
        return ClassSpace(self.num_known, self.num_private, frozenset(head_classes), self.ignore_index)


@dataclass(frozen=True)
class LabeledImage:
    """RGB raster ``(H, W, 3)`` uint8 plus a ``(H, W)`` uint8 class map."""

    pixels: np.ndarray
    label: np.ndarray
    name: str = ""
    # optional tag used only by validate_dataset to catch mixed class spaces
    class_space: Optional[ClassSpace] = field(default=None, compare=False)

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        label = np.asarray(self.label)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValidationError(f"pixels must be HxWx3, got {pixels.shape}")
        if label.shape != pixels.shape[:2]:
            raise ValidationError(f"label shape {label.shape} != image shape {pixels.shape[:2]}")
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        label = np.ascontiguousarray(label, dtype=np.uint8)
        pixels.setflags(write=False)
        label.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "label", label)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabeledImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels) and np.array_equal(self.label, other.label)

    __hash__ = None


@dataclass
class Dataset:
    items: List[LabeledImage]
    domain_tag: str
    class_space: ClassSpace

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def __iter__(self):
        return iter(self.items)

    def images(self) -> np.ndarray:
        return np.stack([it.pixels for it in self.items])

    def labels(self) -> np.ndarray:
        return np.stack([it.label for it in self.items])


def check_label_values(label: np.ndarray, num_known: int, ignore_index: int = IGNORE_INDEX):
    """Raise ValidationError naming the first pixel outside ``{0..K} u {ignore}``."""
    bad = (label > num_known) & (label != ignore_index)
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise ValidationError(f"label value {int(label[y, x])} at pixel (row={y}, col={x}) exceeds K={num_known}")


def load_labeled_image(image_path, label_path=None, num_known: Optional[int] = None) -> LabeledImage:
    image_path = Path(image_path)
    with Image.open(image_path) as im:
        if im.mode != "RGB":
            raise ValidationError(f"{image_path}: expected 8-bit RGB, got mode {im.mode}")
        pixels = np.asarray(im, dtype=np.uint8)
    if label_path is None:
        label = np.full(pixels.shape[:2], IGNORE_INDEX, dtype=np.uint8)
    else:
        with Image.open(label_path) as lm:
            if lm.mode != "L":
                raise ValidationError(f"{label_path}: expected 8-bit single channel, got mode {lm.mode}")
            label = np.asarray(lm, dtype=np.uint8)
        if label.shape != pixels.shape[:2]:
            raise ValidationError(f"{label_path}: size {label.shape} does not match image {pixels.shape[:2]}")
        if num_known is not None:
            check_label_values(label, num_known)
    return LabeledImage(pixels, label, name=image_path.stem)


def save_labeled_image(img: LabeledImage, image_path, label_path) -> None:
    Image.fromarray(img.pixels, mode="RGB").save(image_path, format="PNG")
    Image.fromarray(img.label, mode="L").save(label_path, format="PNG")


def save_label_map(label: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(label, dtype=np.uint8), mode="L").save(path, format="PNG")


def load_label_map(path) -> np.ndarray:
    with Image.open(path) as lm:
        if lm.mode != "L":
            raise ValidationError(f"{path}: expected 8-bit single channel, got mode {lm.mode}")
        return np.asarray(lm, dtype=np.uint8)


def validate_dataset(ds: Dataset) -> List[str]:
    """Return a list of human-readable invariant violations (empty when valid)."""
    problems = []
    cs = ds.class_space
    if ds.domain_tag not in DOMAIN_TAGS:
        problems.append(f"unknown domain tag {ds.domain_tag!r}")
    if ds.domain_tag in ("target", "target_val") and cs.num_private < 1:
        problems.append("open-set target declared with num_private = 0")
    for i, it in enumerate(ds.items):
        if not isinstance(it, LabeledImage):
            problems.append(f"item {i}: not a LabeledImage")
            continue
        lab = it.label
        bad = (lab > cs.num_known) & (lab != cs.ignore_index)
        if bad.any():
            y, x = np.argwhere(bad)[0]
            problems.append(f"item {i}: label value {int(lab[y, x])} at ({y},{x}) outside class space")
        if ds.domain_tag == "source" and (lab == cs.unknown_index).any():
            problems.append(f"item {i}: source label contains the unknown class")
    item_spaces = {it.class_space for it in ds.items if isinstance(it, LabeledImage)}
    item_spaces.discard(None)
    if item_spaces - {cs}:
        problems.append("items carry more than one class space")
    return problems


def _dataset_dirs(root: Path):
    return root / "images", root / "labels", root / "dataset.txt"


def write_dataset(ds: Dataset, root) -> None:
    """Write ``<root>/{images,labels}/<name>.png`` plus ``dataset.txt``."""
    root = Path(root)
    img_dir, lab_dir, manifest = _dataset_dirs(root)
    img_dir.mkdir(parents=True, exist_ok=True)
    lab_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, it in enumerate(ds.items):
        name = it.name or f"{i:05d}"
        names.append(name)
        save_labeled_image(it, img_dir / f"{name}.png", lab_dir / f"{name}.png")
    header = (
        f"# domain={ds.domain_tag} num_known={ds.class_space.num_known} "
        f"num_private={ds.class_space.num_private} "
        f"head_classes={','.join(str(c) for c in sorted(ds.class_space.head_classes))}\n"
    )
    manifest.write_text(header + "".join(n + "\n" for n in names))


def _parse_header(line: str) -> dict:
    out = {}
    for tok in line.lstrip("#").split():
        k, _, v = tok.partition("=")
        out[k] = v
    return out


def read_dataset(root, class_space: Optional[ClassSpace] = None, domain_tag: Optional[str] = None) -> Dataset:
    root = Path(root)
    img_dir, lab_dir, manifest = _dataset_dirs(root)
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    lines = manifest.read_text().splitlines()
    meta = {}
    if lines and lines[0].startswith("#"):
        meta = _parse_header(lines[0])
        lines = lines[1:]
    if class_space is None:
        if "num_known" not in meta:
            raise ValidationError(f"{manifest}: class space not recorded and none given")
        heads = [int(c) for c in meta.get("head_classes", "").split(",") if c]
        class_space = ClassSpace(int(meta["num_known"]), int(meta.get("num_private", 0)), frozenset(heads))
    domain_tag = domain_tag or meta.get("domain", "source")
    items = []
    for name in (ln.strip() for ln in lines):
        if not name:
            continue
        lab = lab_dir / f"{name}.png"
        items.append(load_labeled_image(img_dir / f"{name}.png", lab if lab.exists() else None,
                                        num_known=class_space.num_known))
    return Dataset(items, domain_tag, class_space)


def stack_labels(labels: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(l, dtype=np.uint8) for l in labels])


def atomic_dir(final: Path) -> Path:
    """Temporary sibling directory to build ``final`` in before an ``os.replace``."""
    final = Path(final)
    tmp = final.with_name(f".{final.name}.tmp-{os.getpid()}")
    return tmp
