"""Deterministic synthetic audio-visual scenes with controllable noisy pairing.

A scene is a feature-space stand-in for a clip: a (latent_dim, h, w) image
grid whose planted rectangular source region carries the class prototype over
per-scene random unit background columns, paired with an audio vector built
from the same prototype. Two noise forms are independently controllable:
faulty positives (paired audio swapped for another class's, at a configured
rate) and faulty negatives (same-class collisions inside a batch, governed by
class count versus batch size).
"""
from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .numerics import ConfigError, DataError, RngStream, coerce

MAX_PROTOTYPE_COS = 0.3
_REJECTION_CAP = 100_000

# substream tags; per-scene streams make generation order-independent
_PROTO_STREAM = 0x50524F54
_TRAIN_STREAM = 0x545249
_HEARD_STREAM = 0x484541
_UNHEARD_STREAM = 0x554E48

DATASET_FORMAT = "marginnce-dataset"
DATASET_VERSION = 1

_SYNTH_FIELDS = ("num_classes", "latent_dim", "grid_h", "grid_w",
                 "source_region_frac", "faulty_positive_rate",
                 "feature_noise_std", "samples_per_class", "seed")


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 10
    latent_dim: int = 16
    grid_h: int = 8
    grid_w: int = 8
    source_region_frac: float = 0.5
    faulty_positive_rate: float = 0.0
    feature_noise_std: float = 0.25
    samples_per_class: int = 20
    seed: int = 0

    def validate(self, prefix: str = "synth") -> None:
        if self.num_classes < 2:
            raise ConfigError(f"{prefix}.num_classes must be >= 2, got {self.num_classes}")
        if self.latent_dim < 1:
            raise ConfigError(f"{prefix}.latent_dim must be >= 1, got {self.latent_dim}")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError(
                f"{prefix}.grid_h/grid_w must be >= 1, got {self.grid_h}x{self.grid_w}")
        if not 0.0 < self.source_region_frac <= 1.0:
            raise ConfigError(
                f"{prefix}.source_region_frac must lie in (0, 1], got {self.source_region_frac}")
        if not 0.0 <= self.faulty_positive_rate <= 1.0:
            raise ConfigError(
                f"{prefix}.faulty_positive_rate must lie in [0, 1], got {self.faulty_positive_rate}")
        if self.feature_noise_std < 0.0:
            raise ConfigError(
                f"{prefix}.feature_noise_std must be >= 0, got {self.feature_noise_std}")
        if self.samples_per_class < 1:
            raise ConfigError(
                f"{prefix}.samples_per_class must be >= 1, got {self.samples_per_class}")
        if self.seed < 0:
            raise ConfigError(f"{prefix}.seed must be >= 0, got {self.seed}")

    def replace(self, **kw) -> "SynthConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _SYNTH_FIELDS}

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "synth") -> "SynthConfig":
        d = dict(d)
        unknown = set(d) - set(_SYNTH_FIELDS)
        if unknown:
            raise ConfigError(f"{prefix}: unknown field(s) {sorted(unknown)}")
        kinds = {"source_region_frac": float, "faulty_positive_rate": float,
                 "feature_noise_std": float}
        kw = {}
        for name in _SYNTH_FIELDS:
            default = getattr(cls, name)
            kw[name] = coerce(prefix, name, d.get(name, default), kinds.get(name, int))
        cfg = cls(**kw)
        cfg.validate(prefix)
        return cfg


@dataclass(frozen=True)
class SyntheticScene:
    image: np.ndarray        # (latent_dim, grid_h, grid_w)
    audio: np.ndarray        # (latent_dim,)
    gt_region: tuple[float, float, float, float]  # normalized (x0, y0, x1, y1)
    class_id: int
    is_faulty_positive: bool


def make_class_prototypes(cfg: SynthConfig, rng: RngStream) -> np.ndarray:
    """Unit-norm class prototypes with pairwise |cos| <= 0.3, rejection-sampled.

    Raises ConfigError when the global attempt budget runs out, which is the
    signal that latent_dim is too small for the requested class count.
    """
    cfg.validate()
    g = rng.generator()
    protos = np.empty((cfg.num_classes, cfg.latent_dim), dtype=np.float64)
    accepted = 0
    attempts = 0
    while accepted < cfg.num_classes:
        if attempts >= _REJECTION_CAP:
            raise ConfigError(
                f"synth.latent_dim={cfg.latent_dim} is too small to pack "
                f"{cfg.num_classes} prototypes with pairwise |cos| <= {MAX_PROTOTYPE_COS}")
        attempts += 1
        v = g.normal(size=cfg.latent_dim)
        v /= np.linalg.norm(v)
        if accepted and float(np.abs(protos[:accepted] @ v).max()) > MAX_PROTOTYPE_COS:
            continue
        protos[accepted] = v
        accepted += 1
    return protos


def class_prototypes(cfg: SynthConfig) -> np.ndarray:
    """Prototypes tied to cfg.seed; every split and scene of one config shares them."""
    return make_class_prototypes(cfg, RngStream(cfg.seed, _PROTO_STREAM))


def generate_scene(cfg: SynthConfig, class_id: int, rng: RngStream,
                   prototypes: np.ndarray | None = None) -> SyntheticScene:
    """One scene: planted rectangular source plus a paired (maybe corrupted) audio."""
    cfg.validate()
    if not 0 <= class_id < cfg.num_classes:
        raise ConfigError(
            f"class_id {class_id} out of range for {cfg.num_classes} classes")
    if prototypes is None:
        prototypes = class_prototypes(cfg)
    g = rng.generator()
    c, h, w = cfg.latent_dim, cfg.grid_h, cfg.grid_w
    side = np.sqrt(cfg.source_region_frac)
    rect_h = min(h, max(1, int(round(h * side))))
    rect_w = min(w, max(1, int(round(w * side))))
    top = int(g.integers(0, h - rect_h + 1))
    left = int(g.integers(0, w - rect_w + 1))

    background = g.normal(size=(c, h, w))
    background /= np.maximum(np.linalg.norm(background, axis=0, keepdims=True), 1e-12)
    image = background
    image[:, top:top + rect_h, left:left + rect_w] = \
        prototypes[class_id][:, None, None]
    image = image + g.normal(scale=cfg.feature_noise_std, size=(c, h, w))

    is_faulty = bool(g.uniform() < cfg.faulty_positive_rate)
    audio_class = class_id
    if is_faulty:
        other = int(g.integers(0, cfg.num_classes - 1))
        if other >= class_id:
            other += 1
        audio_class = other
    audio = prototypes[audio_class] + g.normal(scale=cfg.feature_noise_std, size=c)

    gt_region = (left / w, top / h, (left + rect_w) / w, (top + rect_h) / h)
    return SyntheticScene(image=image, audio=audio, gt_region=gt_region,
                          class_id=int(class_id), is_faulty_positive=is_faulty)


def validate_class_split(num_classes, heard_classes, unheard_classes):
    heard = sorted({int(c) for c in heard_classes})
    unheard = sorted({int(c) for c in unheard_classes})
    if not heard or not unheard:
        raise ConfigError("heard and unheard class sets must both be non-empty")
    overlap = sorted(set(heard) & set(unheard))
    if overlap:
        raise ConfigError(f"heard and unheard class sets overlap: {overlap}")
    bad = [c for c in heard + unheard if not 0 <= c < num_classes]
    if bad:
        raise ConfigError(f"class ids out of range for {num_classes} classes: {sorted(set(bad))}")
    return heard, unheard


def make_split(cfg: SynthConfig, heard_classes, unheard_classes, rng: RngStream,
               test_samples_per_class: int | None = None):
    """(train, heard_test, unheard_test): train carries the configured corruption,
    both test splits are clean."""
    cfg.validate()
    heard, unheard = validate_class_split(cfg.num_classes, heard_classes, unheard_classes)
    protos = class_prototypes(cfg)
    clean = cfg.replace(faulty_positive_rate=0.0)
    n_test = cfg.samples_per_class if test_samples_per_class is None else int(test_samples_per_class)
    if n_test < 1:
        raise ConfigError(f"test_samples_per_class must be >= 1, got {n_test}")
    train = [generate_scene(cfg, c, rng.derive(_TRAIN_STREAM, c, i), protos)
             for c in heard for i in range(cfg.samples_per_class)]
    heard_test = [generate_scene(clean, c, rng.derive(_HEARD_STREAM, c, i), protos)
                  for c in heard for i in range(n_test)]
    unheard_test = [generate_scene(clean, c, rng.derive(_UNHEARD_STREAM, c, i), protos)
                    for c in unheard for i in range(n_test)]
    return train, heard_test, unheard_test


def make_train_test(cfg: SynthConfig, rng: RngStream,
                    test_samples_per_class: int | None = None):
    """Corrupted train plus clean test over all classes (closed-set experiments)."""
    cfg.validate()
    protos = class_prototypes(cfg)
    clean = cfg.replace(faulty_positive_rate=0.0)
    n_test = cfg.samples_per_class if test_samples_per_class is None else int(test_samples_per_class)
    if n_test < 1:
        raise ConfigError(f"test_samples_per_class must be >= 1, got {n_test}")
    classes = range(cfg.num_classes)
    train = [generate_scene(cfg, c, rng.derive(_TRAIN_STREAM, c, i), protos)
             for c in classes for i in range(cfg.samples_per_class)]
    test = [generate_scene(clean, c, rng.derive(_HEARD_STREAM, c, i), protos)
            for c in classes for i in range(n_test)]
    return train, test


# ---------------------------------------------------------------------------
# dataset files


def _scenes_to_arrays(scenes):
    return {
        "images": np.stack([s.image for s in scenes]),
        "audios": np.stack([s.audio for s in scenes]),
        "gt": np.array([s.gt_region for s in scenes], dtype=np.float64),
        "class_ids": np.array([s.class_id for s in scenes], dtype=np.int64),
        "faulty": np.array([s.is_faulty_positive for s in scenes], dtype=np.bool_),
    }


def _arrays_to_scenes(arrays):
    n = arrays["images"].shape[0]
    return [SyntheticScene(
        image=arrays["images"][i],
        audio=arrays["audios"][i],
        gt_region=tuple(float(v) for v in arrays["gt"][i]),
        class_id=int(arrays["class_ids"][i]),
        is_faulty_positive=bool(arrays["faulty"][i]),
    ) for i in range(n)]


def save_dataset(path, splits, cfg: SynthConfig) -> None:
    """Write named scene splits plus their config as one .npz (deterministic bytes)."""
    for name, scenes in splits.items():
        if not scenes:
            raise DataError(f"split {name!r} is empty")
    meta = {"format": DATASET_FORMAT, "version": DATASET_VERSION,
            "config": cfg.to_dict(), "splits": sorted(splits)}
    arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    for name in sorted(splits):
        for key, arr in _scenes_to_arrays(splits[name]).items():
            arrays[f"{name}__{key}"] = arr
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".npz")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path):
    """Returns ({split_name: [scenes]}, SynthConfig)."""
    with np.load(path, allow_pickle=False) as data:
        try:
            meta = json.loads(str(data["meta"]))
        except (KeyError, json.JSONDecodeError):
            raise DataError(f"{path}: not a dataset file")
        if meta.get("format") != DATASET_FORMAT:
            raise DataError(f"{path}: not a dataset file")
        cfg = SynthConfig.from_dict(meta["config"])
        splits = {}
        for name in meta["splits"]:
            arrays = {key: data[f"{name}__{key}"]
                      for key in ("images", "audios", "gt", "class_ids", "faulty")}
            splits[name] = _arrays_to_scenes(arrays)
    return splits, cfg


def annotation_boxes(scenes, prefix: str):
    """Ground-truth rectangles keyed by stable per-split sample ids."""
    return {f"{prefix}_{i:05d}": [scenes[i].gt_region] for i in range(len(scenes))}


def corruption_fraction(scenes) -> float:
    if not scenes:
        raise DataError("corruption_fraction: empty scene list")
    return float(np.mean([s.is_faulty_positive for s in scenes]))
