"""Keep-mask construction and gather/scatter between full and compressed sequences.

Tokens whose patches reconstruct worst (highest squared error, i.e. lowest
likelihood) carry the most information and are kept; the rest are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError


@dataclass(frozen=True)
class TokenMask:
    kept: np.ndarray

    def __post_init__(self):
        kept = np.asarray(self.kept).astype(bool)
        if kept.ndim != 1 or kept.size == 0:
            raise ValidationError("mask must be a nonempty bit vector")
        kept.setflags(write=False)
        object.__setattr__(self, "kept", kept)

    @property
    def n_max(self) -> int:
        return int(self.kept.size)

    @property
    def n_x(self) -> int:
        return int(self.kept.sum())

    def positions(self) -> np.ndarray:
        return np.flatnonzero(self.kept)

    def to_bytes(self) -> bytes:
        return np.packbits(self.kept.astype(np.uint8), bitorder="little").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, n_max: int) -> "TokenMask":
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
        if bits.size < n_max or bits[n_max:].any():
            raise ValidationError("mask bytes do not match n_max")
        return cls(bits[:n_max])

    def __eq__(self, other):
        return isinstance(other, TokenMask) and np.array_equal(self.kept, other.kept)

    def __hash__(self):
        return hash(self.kept.tobytes())


def per_token_scores(per_element_sq_errors, patch_map) -> np.ndarray:
    """Sum element errors into the token each element maps to.

    ``patch_map[e]`` is the token position of element ``e``; every token
    position in ``0..max`` must receive at least one element.
    """
    err = np.asarray(per_element_sq_errors, dtype=np.float64)
    pm = np.asarray(patch_map)
    if err.shape != pm.shape or err.ndim != 1:
        raise ValidationError("errors and patch_map must be equal-length vectors")
    if pm.size == 0 or pm.min() < 0:
        raise ValidationError("every element must map to a token position")
    n_tokens = int(pm.max()) + 1
    counts = np.bincount(pm, minlength=n_tokens)
    if np.any(counts == 0):
        raise ValidationError("patch_map is not surjective onto token positions")
    return np.bincount(pm, weights=err, minlength=n_tokens)


def patch_scores(sq_errors: np.ndarray, patch: int) -> np.ndarray:
    """Batched ``per_token_scores`` for contiguous patches: (B, L) -> (B, L // patch)."""
    b, length = sq_errors.shape
    return sq_errors.reshape(b, length // patch, patch).sum(axis=-1)


def keep_top(scores: np.ndarray, n_x) -> np.ndarray:
    """Boolean keep-mask per row: the ``n_x`` highest scores, ties to lower index.

    ``scores`` is (B, N) and ``n_x`` a scalar or length-B vector.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    b, n = scores.shape
    n_x = np.broadcast_to(np.asarray(n_x, dtype=np.int64), (b,))
    if np.any(n_x < 1) or np.any(n_x > n):
        raise ValidationError(f"N_x must lie in [1, {n}]")
    order = np.argsort(-scores, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(n)[None, :].repeat(b, axis=0), axis=1)
    return rank < n_x[:, None]


def build_mask(scores, n_x: int, n_min: int = 1) -> TokenMask:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValidationError("scores must be a vector")
    if not n_min <= n_x <= scores.size:
        raise ValidationError(f"N_x={n_x} outside [{n_min}, {scores.size}]")
    return TokenMask(keep_top(scores[None, :], n_x)[0])


def gather(latents, mask: TokenMask) -> np.ndarray:
    x = np.asarray(latents)
    if x.shape[0] != mask.n_max:
        raise ValidationError(f"expected {mask.n_max} rows, got {x.shape[0]}")
    return x[mask.kept]


def scatter(compressed, mask: TokenMask, fill) -> np.ndarray:
    c = np.asarray(compressed, dtype=np.float64)
    if c.ndim == 1:
        c = c[:, None]
    if c.shape[0] != mask.n_x:
        raise ValidationError(f"{c.shape[0]} compressed rows for a mask keeping {mask.n_x}")
    fill = np.asarray(fill, dtype=np.float64)
    out = np.empty((mask.n_max, c.shape[1]))
    out[:] = fill
    out[mask.kept] = c
    return out
