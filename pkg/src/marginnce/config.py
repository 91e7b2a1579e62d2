"""One JSON document drives every command; defaults are explicit and dumpable.

Under-specified experiment knobs (weight decay value, batch size, learning
rate, binarization rule, ...) all live here with their declared defaults, so
`marginnce print-config` shows exactly what a run used and the config hash
embedded in every CSV pins it.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from . import fileio
from .metrics import EvalConfig
from .numerics import ConfigError, coerce
from .synthdata import SynthConfig
from .trainer import TrainConfig

_RUN_FIELDS = ("synth", "train", "eval", "margins", "seeds", "heard_classes",
               "unheard_classes", "test_samples_per_class", "output_dir")

# Table-style margin grid: positive, zero, and a descending negative ramp.
DEFAULT_MARGINS = (0.2, 0.0, -0.1, -0.2, -0.3, -0.4)
DEFAULT_SEEDS = (0, 1, 2)


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    margins: tuple = DEFAULT_MARGINS
    seeds: tuple = DEFAULT_SEEDS
    heard_classes: tuple | None = None
    unheard_classes: tuple | None = None
    test_samples_per_class: int | None = None
    output_dir: str = "out"

    def validate(self) -> None:
        self.synth.validate()
        self.train.validate()
        self.eval.validate()
        if not self.margins:
            raise ConfigError("margins must be non-empty")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if any(s < 0 for s in self.seeds):
            raise ConfigError(f"seeds must be >= 0, got {list(self.seeds)}")
        if (self.heard_classes is None) != (self.unheard_classes is None):
            raise ConfigError(
                "heard_classes and unheard_classes must be set together (or both omitted)")
        if self.test_samples_per_class is not None and self.test_samples_per_class < 1:
            raise ConfigError(
                f"test_samples_per_class must be >= 1, got {self.test_samples_per_class}")
        if not self.output_dir:
            raise ConfigError("output_dir must be non-empty")

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "synth": self.synth.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
            "margins": list(self.margins),
            "seeds": list(self.seeds),
            "heard_classes": None if self.heard_classes is None else list(self.heard_classes),
            "unheard_classes": None if self.unheard_classes is None else list(self.unheard_classes),
            "test_samples_per_class": self.test_samples_per_class,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config document must be a JSON object")
        d = dict(d)
        unknown = set(d) - set(_RUN_FIELDS)
        if unknown:
            raise ConfigError(f"unknown top-level field(s) {sorted(unknown)}")
        for section in ("synth", "train", "eval"):
            if section in d and not isinstance(d[section], dict):
                raise ConfigError(f"{section} must be an object")

        def int_list(name, value):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{name} must be a list of integers")
            return tuple(coerce("", f"{name}[{i}]", v, int) for i, v in enumerate(value))

        def float_list(name, value):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{name} must be a list of numbers")
            return tuple(coerce("", f"{name}[{i}]", v, float) for i, v in enumerate(value))

        heard = d.get("heard_classes")
        unheard = d.get("unheard_classes")
        tspc = d.get("test_samples_per_class")
        cfg = cls(
            synth=SynthConfig.from_dict(d.get("synth", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            eval=EvalConfig.from_dict(d.get("eval", {})),
            margins=float_list("margins", d.get("margins", list(DEFAULT_MARGINS))),
            seeds=int_list("seeds", d.get("seeds", list(DEFAULT_SEEDS))),
            heard_classes=None if heard is None else int_list("heard_classes", heard),
            unheard_classes=None if unheard is None else int_list("unheard_classes", unheard),
            test_samples_per_class=None if tspc is None
            else coerce("", "test_samples_per_class", tspc, int),
            output_dir=coerce("", "output_dir", d.get("output_dir", cls.output_dir), str),
        )
        cfg.validate()
        return cfg


def load_run_config(path: str | None) -> RunConfig:
    """Defaults when path is None; otherwise defaults overlaid with the file."""
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})")
    return RunConfig.from_dict(doc)


def config_hash(cfg: RunConfig) -> str:
    """sha256 over the fully resolved config document.

    output_dir is excluded so the hash identifies the experiment, not where
    its files happen to be written.
    """
    doc = cfg.to_dict()
    doc.pop("output_dir")
    return fileio.sha256_hex(fileio.canonical_json(doc))


def resolve_open_set(cfg: RunConfig):
    """Configured heard/unheard classes, defaulting to a half/half split."""
    if cfg.heard_classes is not None:
        return tuple(cfg.heard_classes), tuple(cfg.unheard_classes)
    k = cfg.synth.num_classes
    return tuple(range(k // 2)), tuple(range(k // 2, k))
