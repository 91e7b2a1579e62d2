"""Audio-visual response maps and sigmoid-thresholded spatial pooling.

These are the single-pair reference implementations. Batched training goes
through kernels.pooled_similarity and is tested against the functions here,
so keep them straightforward.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    ConfigError,
    DimensionError,
    as_feature_grid,
    as_feature_vec,
    as_matrix,
    coerce,
    sigmoid,
)

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class PoolConfig:
    """Thresholded-pooling knobs: threshold epsilon, temperature beta.

    detach_weights=True treats the sigmoid weights as constants in the
    backward pass (pseudo-mask behaviour); the default differentiates the
    pooling expression in full.
    """

    epsilon: float = 0.65
    beta: float = 0.03
    detach_weights: bool = False

    def validate(self, prefix: str = "pool") -> None:
        if not np.isfinite(self.beta) or self.beta <= 0.0:
            raise ConfigError(f"{prefix}.beta must be > 0, got {self.beta}")
        if not np.isfinite(self.epsilon) or not -1.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"{prefix}.epsilon must lie in [-1, 1], got {self.epsilon}")

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "beta": self.beta,
                "detach_weights": self.detach_weights}

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "pool") -> "PoolConfig":
        d = dict(d)
        unknown = set(d) - {"epsilon", "beta", "detach_weights"}
        if unknown:
            raise ConfigError(f"{prefix}: unknown field(s) {sorted(unknown)}")
        cfg = cls(
            epsilon=coerce(prefix, "epsilon", d.get("epsilon", cls.epsilon), float),
            beta=coerce(prefix, "beta", d.get("beta", cls.beta), float),
            detach_weights=coerce(prefix, "detach_weights",
                                  d.get("detach_weights", cls.detach_weights), bool),
        )
        cfg.validate(prefix)
        return cfg


def cosine_response_map(image, audio):
    """Pixel-wise cosine similarity between feature columns and one vector.

    Denominators are clamped at NORM_FLOOR, so a zero column (or zero audio)
    yields similarity 0 instead of raising.
    """
    v = as_feature_grid(image, "image")
    a = as_feature_vec(audio, "audio")
    if v.shape[0] != a.shape[0]:
        raise DimensionError(
            f"channel mismatch: image has {v.shape[0]} channels, audio has {a.shape[0]}")
    c, h, w = v.shape
    cols = v.reshape(c, h * w)
    col_norms = np.maximum(np.sqrt((cols * cols).sum(axis=0)), NORM_FLOOR)
    a_norm = max(float(np.sqrt((a * a).sum())), NORM_FLOOR)
    sims = (cols * a[:, None]).sum(axis=0) / (col_norms * a_norm)
    return sims.reshape(h, w)


def soft_threshold_pool(response, cfg: PoolConfig = PoolConfig()):
    """Spatial average of the map weighted by sigmoid((map - epsilon)/beta).

    The weights are strictly positive, so the result is a convex combination
    of the map entries and always lies in [min(map), max(map)].
    """
    m = as_matrix(response, "response")
    cfg.validate()
    w = sigmoid((m - cfg.epsilon) / cfg.beta)
    return float((w * m).sum() / w.sum())


def soft_threshold_pool_grad(response, cfg: PoolConfig = PoolConfig()):
    """d(pooled score)/d(map entries), shaped like the input map."""
    m = as_matrix(response, "response")
    cfg.validate()
    w = sigmoid((m - cfg.epsilon) / cfg.beta)
    den = w.sum()
    grad = w / den
    if not cfg.detach_weights:
        s = float((w * m).sum() / den)
        wprime = w * (1.0 - w) / cfg.beta
        grad = grad + wprime * (m - s) / den
    return grad
