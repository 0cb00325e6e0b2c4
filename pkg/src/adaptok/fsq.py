"""Finite scalar quantization on a linear grid over [-1, 1].

Each latent dimension i is clamped to [-1, 1] and snapped to one of
``levels[i]`` evenly spaced values ``2 c / (L - 1) - 1``.  The implicit
codebook is the product grid; a code is packed into a single integer with
mixed-radix digits, first dimension most significant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError

DEFAULT_LEVELS = (8, 8, 8, 5, 5, 5)


@dataclass(frozen=True)
class FsqConfig:
    levels: tuple[int, ...] = DEFAULT_LEVELS

    def __post_init__(self):
        levels = tuple(int(l) for l in self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise ValidationError("FSQ needs at least one dimension")
        if any(l < 2 for l in levels):
            raise ValidationError("every FSQ level count must be >= 2")
        if any(l > 255 for l in levels):
            raise ValidationError("level counts above 255 cannot be serialized")

    @property
    def dim(self) -> int:
        return len(self.levels)

    @property
    def codebook_size(self) -> int:
        return math.prod(self.levels)

    @property
    def bits_exact(self) -> float:
        return math.log2(self.codebook_size)

    @property
    def bits_serialized(self) -> int:
        return max(1, math.ceil(self.bits_exact - 1e-12))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=np.int64)


@dataclass(frozen=True)
class TokenCode:
    digits: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "digits", tuple(int(d) for d in self.digits))


def _check_digits(digits: np.ndarray, config: FsqConfig) -> None:
    if digits.shape[-1] != config.dim:
        raise ValidationError(f"expected {config.dim} digits, got {digits.shape[-1]}")
    if np.any(digits < 0) or np.any(digits >= config.as_array()):
        raise ValidationError("digit out of range for the configured levels")


def quantize_digits(latent, config: FsqConfig) -> np.ndarray:
    """Vectorised quantizer: (..., dim) reals -> (..., dim) integer digits.

    Exact midpoints between grid values go to the higher digit.
    """
    z = np.asarray(latent, dtype=np.float64)
    if z.shape[-1] != config.dim:
        raise ValidationError(f"latent has dimension {z.shape[-1]}, config expects {config.dim}")
    half = (config.as_array() - 1) / 2.0
    pos = (np.clip(z, -1.0, 1.0) + 1.0) * half
    digits = np.floor(pos + 0.5).astype(np.int64)
    return np.minimum(digits, config.as_array() - 1)


def dequantize_digits(digits, config: FsqConfig) -> np.ndarray:
    d = np.asarray(digits, dtype=np.int64)
    _check_digits(d, config)
    return 2.0 * d / (config.as_array() - 1) - 1.0


def quantize(latent, config: FsqConfig) -> TokenCode:
    z = np.asarray(latent, dtype=np.float64)
    if z.ndim != 1:
        raise ValidationError("quantize expects a single latent vector")
    return TokenCode(tuple(quantize_digits(z, config)))


def dequantize(code: TokenCode, config: FsqConfig) -> np.ndarray:
    return dequantize_digits(np.asarray(code.digits), config)


def round_trip(latent, config: FsqConfig) -> np.ndarray:
    """quantize followed by dequantize, vectorised."""
    return dequantize_digits(quantize_digits(latent, config), config)


def ste_mask(latent) -> np.ndarray:
    """Straight-through Jacobian diagonal: 1 strictly inside (-1, 1), else 0."""
    z = np.asarray(latent)
    return ((z > -1.0) & (z < 1.0)).astype(np.float64)


def digits_to_index(digits, config: FsqConfig) -> np.ndarray:
    d = np.asarray(digits, dtype=np.int64)
    _check_digits(d, config)
    idx = np.zeros(d.shape[:-1], dtype=np.int64)
    for i, level in enumerate(config.levels):
        idx = idx * level + d[..., i]
    return idx


def index_to_digits(index, config: FsqConfig) -> np.ndarray:
    idx = np.asarray(index, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= config.codebook_size):
        raise ValidationError(f"index out of range [0, {config.codebook_size})")
    out = np.empty(idx.shape + (config.dim,), dtype=np.int64)
    rest = idx.copy()
    for i in range(config.dim - 1, -1, -1):
        out[..., i] = rest % config.levels[i]
        rest //= config.levels[i]
    return out


def index_encode(code: TokenCode, config: FsqConfig) -> int:
    return int(digits_to_index(np.asarray(code.digits), config))


def index_decode(index: int, config: FsqConfig) -> TokenCode:
    if isinstance(index, bool) or not isinstance(index, (int, np.integer)):
        raise ValidationError("index must be an integer")
    return TokenCode(tuple(index_to_digits(int(index), config)))
