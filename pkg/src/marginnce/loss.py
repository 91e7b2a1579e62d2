"""Batch similarity matrices and the margin-shifted contrastive objective.

The loss is the standard softmax contrastive form with the diagonal (positive)
logit shifted by -margin/tau in both numerator and denominator; margin 0
reduces it exactly to the unshifted objective, a negative margin loosens the
decision boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .avmap import NORM_FLOOR, PoolConfig
from .numerics import (
    ConfigError,
    DimensionError,
    as_feature_grid,
    as_feature_vec,
    as_square_matrix,
    coerce,
)


@dataclass(frozen=True)
class LossConfig:
    """Contrastive temperature tau and diagonal margin (may be negative)."""

    tau: float = 0.07
    margin: float = -0.2
    pool: PoolConfig = field(default_factory=PoolConfig)
    symmetric: bool = False

    def validate(self, prefix: str = "loss") -> None:
        if not np.isfinite(self.tau) or self.tau <= 0.0:
            raise ConfigError(f"{prefix}.tau must be > 0, got {self.tau}")
        if not np.isfinite(self.margin):
            raise ConfigError(f"{prefix}.margin must be finite, got {self.margin}")
        self.pool.validate(f"{prefix}.pool")

    def to_dict(self) -> dict:
        return {"tau": self.tau, "margin": self.margin,
                "pool": self.pool.to_dict(), "symmetric": self.symmetric}

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "loss") -> "LossConfig":
        d = dict(d)
        unknown = set(d) - {"tau", "margin", "pool", "symmetric"}
        if unknown:
            raise ConfigError(f"{prefix}: unknown field(s) {sorted(unknown)}")
        pool_raw = d.get("pool", {})
        if not isinstance(pool_raw, dict):
            raise ConfigError(f"{prefix}.pool must be an object")
        cfg = cls(
            tau=coerce(prefix, "tau", d.get("tau", cls.tau), float),
            margin=coerce(prefix, "margin", d.get("margin", cls.margin), float),
            pool=PoolConfig.from_dict(pool_raw, prefix=f"{prefix}.pool"),
            symmetric=coerce(prefix, "symmetric", d.get("symmetric", cls.symmetric), bool),
        )
        cfg.validate(prefix)
        return cfg


def similarity_matrix(images, audios, pool: PoolConfig = PoolConfig(), use_numba=None):
    """Pooled pairwise scores: entry (i, j) pools the response of image i to audio j."""
    if len(images) != len(audios):
        raise DimensionError(
            f"batch mismatch: {len(images)} images vs {len(audios)} audios")
    if len(images) == 0:
        raise DimensionError("empty batch")
    pool.validate()
    grids = [as_feature_grid(v, f"images[{k}]") for k, v in enumerate(images)]
    vecs = [as_feature_vec(a, f"audios[{k}]") for k, a in enumerate(audios)]
    if len({g.shape for g in grids}) != 1 or len({v.shape for v in vecs}) != 1:
        raise DimensionError("inconsistent shapes within the batch")
    grids = np.stack(grids)
    vecs = np.stack(vecs)
    if grids.shape[1] != vecs.shape[1]:
        raise DimensionError(
            f"channel mismatch: images have {grids.shape[1]}, audios have {vecs.shape[1]}")
    n, c, h, w = grids.shape
    cols = grids.reshape(n, c, h * w)
    cols = cols / np.maximum(np.linalg.norm(cols, axis=1, keepdims=True), NORM_FLOOR)
    vecs = vecs / np.maximum(np.linalg.norm(vecs, axis=1, keepdims=True), NORM_FLOOR)
    return kernels.pooled_similarity(cols, vecs, pool.epsilon, pool.beta,
                                     use_numba=use_numba)


def _margin_logits(scores, tau, margin):
    n = scores.shape[0]
    logits = scores / tau
    idx = np.arange(n)
    logits[idx, idx] = (scores[idx, idx] - margin) / tau
    return logits


def _directional_loss(scores, tau, margin):
    # row-wise max subtraction keeps exp() in range for |scores| up to ~1e3/tau
    n = scores.shape[0]
    logits = _margin_logits(scores, tau, margin)
    idx = np.arange(n)
    row_max = logits.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.exp(logits - row_max).sum(axis=1))
    return float((lse - logits[idx, idx]).mean())


def _directional_grad(scores, tau, margin):
    n = scores.shape[0]
    logits = _margin_logits(scores, tau, margin)
    idx = np.arange(n)
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    p = z / z.sum(axis=1, keepdims=True)
    grad = p / (n * tau)
    grad[idx, idx] -= 1.0 / (n * tau)
    return grad


def margin_nce_loss(scores, cfg: LossConfig = LossConfig()):
    """Mean over anchors of -log softmax with the diagonal logit shifted by -margin.

    Anchors are rows (image against all audios). With symmetric=True the
    audio-anchored direction is averaged in as well.
    """
    s = as_square_matrix(scores, "scores")
    cfg.validate()
    loss = _directional_loss(s, cfg.tau, cfg.margin)
    if cfg.symmetric:
        loss = 0.5 * (loss + _directional_loss(s.T, cfg.tau, cfg.margin))
    return loss


def margin_nce_grad(scores, cfg: LossConfig = LossConfig()):
    """d(loss)/d(scores), shaped like the score matrix."""
    s = as_square_matrix(scores, "scores")
    cfg.validate()
    grad = _directional_grad(s, cfg.tau, cfg.margin)
    if cfg.symmetric:
        grad = 0.5 * (grad + _directional_grad(s.T, cfg.tau, cfg.margin).T)
    return grad
