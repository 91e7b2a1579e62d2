"""Dense-array kernel layer: stable scalars, gradient checking, seeded streams.

Everything downstream works on float64 numpy arrays. RngStream wraps a
counter-based generator so any (seed, stream_id) pair reproduces the same
sequence regardless of thread schedule or call order, and finite_diff_grad is
the one derivative oracle every analytic gradient is checked against.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "NumericalFailure",
    "RngStream",
    "as_feature_grid",
    "as_feature_vec",
    "as_matrix",
    "as_square_matrix",
    "coerce",
    "finite_diff_grad",
    "mix_seed",
    "relative_error",
    "sigmoid",
]

_MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class DimensionError(ValueError):
    """Array shape or dimension mismatch."""


class NumericalFailure(RuntimeError):
    """Non-finite value encountered where a finite one is required."""


class DataError(ValueError):
    """Malformed or inconsistent on-disk data."""


def sigmoid(x):
    """Stable logistic 1/(1+e^-x); saturates cleanly, no overflow for finite input."""
    arr = np.asarray(x, dtype=np.float64)
    t = np.exp(-np.abs(arr))
    out = np.where(arr >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))
    return float(out) if out.ndim == 0 else out


def finite_diff_grad(f, x, step=1e-5):
    """Central-difference gradient of a scalar function, coordinate by coordinate.

    Returns an array shaped like x. Raises NumericalFailure naming the first
    coordinate whose perturbed evaluation comes back non-finite.
    """
    x = np.array(x, dtype=np.float64)
    if step <= 0:
        raise ConfigError(f"finite_diff_grad step must be > 0, got {step}")
    grad = np.empty(x.size, dtype=np.float64)
    for k in range(x.size):
        xp = x.copy()
        xp.flat[k] += step
        xm = x.copy()
        xm.flat[k] -= step
        fp = float(f(xp))
        fm = float(f(xm))
        if not np.isfinite(fp) or not np.isfinite(fm):
            raise NumericalFailure(
                f"non-finite evaluation while perturbing coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * step)
    return grad.reshape(x.shape)


def relative_error(a, b, floor=1e-8):
    """max|a-b| scaled by the larger of the two infinity norms (floored)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(floor, float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    return float(np.abs(a - b).max(initial=0.0) / scale)


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def mix_seed(*parts: int) -> int:
    """Fold integers into one well-mixed 64-bit seed (order-sensitive)."""
    acc = 0x9E3779B97F4A7C15
    for p in parts:
        acc = _splitmix64(acc ^ _splitmix64(p & _MASK64))
    return acc


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream: (seed, stream_id) fully determines the draws.

    generator() always starts the stream from the beginning, so results never
    depend on sharing or call order; derive() yields collision-resistant
    substreams for parallel or per-item generation.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def derive(self, *ids: int) -> "RngStream":
        sid = self.stream_id & _MASK64
        for i in ids:
            sid = _splitmix64(sid ^ _splitmix64(i & _MASK64))
        return RngStream(self.seed, sid)


def as_feature_grid(x, name="image"):
    """Validate a (channels, height, width) float grid with finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise DimensionError(
            f"{name} must be a (channels, height, width) array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericalFailure(f"{name} contains non-finite entries")
    return arr


def as_feature_vec(x, name="audio"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise DimensionError(f"{name} must be a 1-d array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericalFailure(f"{name} contains non-finite entries")
    return arr


def as_matrix(x, name="matrix"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or min(arr.shape) < 1:
        raise DimensionError(f"{name} must be a 2-d array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericalFailure(f"{name} contains non-finite entries")
    return arr


def as_square_matrix(x, name="scores"):
    arr = as_matrix(x, name)
    if arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {arr.shape}")
    return arr


def coerce(prefix: str, name: str, value, kind):
    """Convert a raw config value, raising ConfigError that names the field."""
    label = f"{prefix}.{name}" if prefix else name
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{label} must be a boolean, got {value!r}")
    if kind is int:
        if isinstance(value, bool):
            raise ConfigError(f"{label} must be an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"{label} must be an integer, got {value!r}")
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{label} must be a number, got {value!r}")
        return float(value)
    if kind is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{label} must be a string, got {value!r}")
    raise TypeError(f"unsupported coercion kind {kind!r}")
