"""Flat ``key = value`` experiment configuration with command-line overrides."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

from .augment import VirtualUnknownConfig
from .datamodel import ValidationError
from .pseudolabel import PseudoLabelConfig
from .synthbench import DEFAULT_SHIFT, BenchConfig, DomainShift
from .trainer import StageConfig


def _floats(text: str, n: Optional[int] = None) -> Tuple[float, ...]:
    vals = tuple(float(v) for v in text.replace(",", " ").split())
    if n is not None and len(vals) != n:
        raise ValidationError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {text!r}")


# key -> parser; every key the file format understands
KEYS = {
    "seed": int,
    "out": str,
    "data": str,
    # benchmark
    "image_size": int,
    "num_known": int,
    "num_private": int,
    "train_count": int,
    "val_count": int,
    "shift_gain": lambda s: _floats(s, 3),
    "shift_bias": lambda s: _floats(s, 3),
    "shift_noise": float,
    "private_hue_offset": float,
    # training
    "iterations": int,
    "batch_size": int,
    "pretrain_steps": int,
    "crop_size": lambda s: None if s.strip().lower() in ("", "none") else int(s),
    "tau1": float,
    "tau2": float,
    "alpha": float,
    "gamma": float,
    "vertex_min": int,
    "vertex_max": int,
    "polygons_per_image": int,
    "lr_backbone": float,
    "lr_head": float,
    "weight_decay": float,
    "warmup_steps": int,
    "head_classes": lambda s: frozenset(_ints(s)) if s.strip() else None,
    "stage2_init": str,
    "hidden": int,
    "features": int,
    "log_every": int,
    # experiments
    "seeds": _ints,
    "tau1_values": _floats,
    "sweep_pipeline": str,
    "figures": _bool,
}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, object]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value'")
        if key not in KEYS:
            raise ValidationError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = KEYS[key](val.strip())
        except ValueError as exc:
            raise ValidationError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def load_config_file(path) -> Dict[str, object]:
    path = Path(path)
    return parse_config_text(path.read_text(), str(path))


@dataclass
class ExperimentConfig:
    values: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def build(cls, config_path=None, overrides: Optional[Dict[str, object]] = None) -> "ExperimentConfig":
        vals = load_config_file(config_path) if config_path else {}
        for k, v in (overrides or {}).items():
            if v is not None:
                vals[k] = v
        cfg = cls(vals)
        cfg.validate()
        return cfg

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def seed(self) -> int:
        return int(self.get("seed", 0))

    @property
    def out(self) -> Path:
        return Path(self.get("out", "runs"))

    @property
    def data(self) -> Path:
        return Path(self.get("data", self.out / "data"))

    def bench(self) -> BenchConfig:
        shift = DomainShift(
            gain=tuple(self.get("shift_gain", DEFAULT_SHIFT.gain)),
            bias=tuple(self.get("shift_bias", DEFAULT_SHIFT.bias)),
            noise_std=float(self.get("shift_noise", DEFAULT_SHIFT.noise_std)),
        )
        kw = {k: self.values[k] for k in ("image_size", "num_known", "num_private", "train_count",
                                          "val_count", "private_hue_offset") if k in self.values}
        return BenchConfig(shift=shift, seed=self.seed, **kw)

    def stage(self) -> StageConfig:
        base = StageConfig()
        pseudo = PseudoLabelConfig(self.get("tau1", base.pseudo.tau1), self.get("tau2", base.pseudo.tau2))
        vmin, vmax = base.virtual.vertex_count_range
        virtual = VirtualUnknownConfig(
            gamma=self.get("gamma", base.virtual.gamma),
            vertex_count_range=(self.get("vertex_min", vmin), self.get("vertex_max", vmax)),
            polygons_per_image=self.get("polygons_per_image", base.virtual.polygons_per_image),
        )
        kw = {k: self.values[k] for k in (
            "iterations", "batch_size", "pretrain_steps", "crop_size", "alpha", "head_classes", "lr_backbone",
            "lr_head", "weight_decay", "warmup_steps", "stage2_init", "hidden", "features", "log_every",
        ) if k in self.values}
        iters = kw.get("iterations", base.iterations)
        if "pretrain_steps" not in kw:
            # keep the 20:1 iteration to pre-training ratio when only iterations is given
            kw["pretrain_steps"] = iters // 20
        return StageConfig(pseudo=pseudo, virtual=virtual, seed=self.seed, **kw)

    @property
    def seeds(self) -> Tuple[int, ...]:
        return tuple(self.get("seeds", (0, 1, 2)))

    def validate(self) -> None:
        """Build every sub-config so bad values fail before any work starts."""
        self.bench()
        self.stage()
        for t in self.get("tau1_values", ()):
            if not 0.0 < t < 1.0:
                raise ValidationError(f"tau1 value {t} outside (0, 1)")
        if self.get("sweep_pipeline", "baseline") not in ("baseline", "sats"):
            raise ValidationError("sweep_pipeline must be 'baseline' or 'sats'")

    def with_values(self, **kw) -> "ExperimentConfig":
        vals = dict(self.values)
        vals.update(kw)
        return replace(self, values=vals)
