"""Token stream wire format, BPP16 accounting and fidelity metrics.

Stream layout (``.itk``)::

    offset  size              field
    0       4                 magic b"ITK1"
    4       1                 version (1)
    5       2                 n_max, uint16 little-endian
    7       2                 n_x, uint16 little-endian
    9       1                 FSQ dimension count k
    10      k                 FSQ level per dimension, one byte each
    10+k    ceil(n_max/8)     keep-mask, token 0 = least significant bit of byte 0
    ...     ceil(n_x*w/8)     codebook indices, w = ceil(log2 codebook) bits each,
                              packed MSB-first, zero-padded to a byte boundary
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .compressor import TokenMask
from .exceptions import (BadMagicError, PopcountMismatchError, StreamError, TruncatedStreamError,
                         ValidationError, VersionError)
from .fsq import FsqConfig, TokenCode, digits_to_index, index_to_digits

MAGIC = b"ITK1"
VERSION = 1
PSNR_INF = float("inf")


@dataclass(frozen=True)
class TokenStream:
    codes: tuple[TokenCode, ...]
    mask: TokenMask
    config: FsqConfig

    @property
    def indices(self) -> np.ndarray:
        if not self.codes:
            return np.zeros(0, dtype=np.int64)
        return digits_to_index(np.array([c.digits for c in self.codes]), self.config)


def header_size(config: FsqConfig) -> int:
    return 10 + config.dim


def stream_size(n_max: int, n_x: int, config: FsqConfig) -> int:
    return header_size(config) + math.ceil(n_max / 8) + math.ceil(n_x * config.bits_serialized / 8)


def pack_indices(indices: np.ndarray, width: int) -> bytes:
    idx = np.asarray(indices, dtype=np.uint64)
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    bits = ((idx[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8).ravel()
    return np.packbits(bits, bitorder="big").tobytes()


def unpack_indices(data: bytes, count: int, width: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="big")[: count * width]
    bits = bits.reshape(count, width).astype(np.uint64)
    weights = np.uint64(1) << np.arange(width - 1, -1, -1, dtype=np.uint64)
    return (bits * weights).sum(axis=1).astype(np.int64)


def serialize_indices(indices: Sequence[int], mask: TokenMask, config: FsqConfig) -> bytes:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size != mask.n_x:
        raise ValidationError(f"{idx.size} codes for a mask keeping {mask.n_x} tokens")
    if mask.n_x < 1:
        raise ValidationError("a stream must keep at least one token")
    if mask.n_max > 0xFFFF:
        raise ValidationError("n_max does not fit in 16 bits")
    if np.any(idx < 0) or np.any(idx >= config.codebook_size):
        raise ValidationError("codebook index out of range")
    head = MAGIC + struct.pack("<BHHB", VERSION, mask.n_max, mask.n_x, config.dim)
    head += bytes(config.levels)
    return head + mask.to_bytes() + pack_indices(idx, config.bits_serialized)


def serialize(codes: Sequence[TokenCode], mask: TokenMask, config: FsqConfig) -> bytes:
    if len(codes) != mask.n_x:
        raise ValidationError(f"{len(codes)} codes for a mask keeping {mask.n_x} tokens")
    digits = np.array([c.digits for c in codes], dtype=np.int64).reshape(len(codes), config.dim)
    return serialize_indices(digits_to_index(digits, config), mask, config)


def deserialize(data: bytes) -> TokenStream:
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 10:
        raise TruncatedStreamError(f"stream header truncated: need at least 10 bytes, got {len(data)}")
    version, n_max, n_x, dim = struct.unpack_from("<BHHB", data, 4)
    if version != VERSION:
        raise VersionError(f"unsupported stream version {version}")
    if dim < 1:
        raise StreamError("stream declares zero FSQ dimensions")
    if len(data) < 10 + dim:
        raise TruncatedStreamError(f"stream header truncated: need {10 + dim} bytes, got {len(data)}")
    try:
        config = FsqConfig(tuple(data[10:10 + dim]))
    except ValidationError as exc:
        raise StreamError(f"invalid FSQ levels in header: {exc}") from exc
    expected = stream_size(n_max, n_x, config)
    if len(data) < expected:
        raise TruncatedStreamError(f"stream truncated: expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise StreamError(f"{len(data) - expected} trailing bytes after a {expected}-byte stream")
    off = 10 + dim
    mask_len = math.ceil(n_max / 8)
    try:
        mask = TokenMask.from_bytes(data[off:off + mask_len], n_max)
    except ValidationError as exc:
        raise StreamError(str(exc)) from exc
    if mask.n_x != n_x:
        raise PopcountMismatchError(f"mask keeps {mask.n_x} tokens but header says n_x={n_x}")
    if n_x < 1:
        raise StreamError("stream keeps no tokens")
    indices = unpack_indices(data[off + mask_len:], n_x, config.bits_serialized)
    if np.any(indices >= config.codebook_size):
        raise StreamError("codebook index out of range")
    digits = index_to_digits(indices, config)
    return TokenStream(tuple(TokenCode(tuple(d)) for d in digits), mask, config)


def bpp16(n_x: float, n_max: int, bits_per_token: float = 16.0, include_mask: bool = True) -> float:
    """Bits per 16 pixels under the 256-pixels-per-token convention."""
    if n_max < 1 or not 0 <= n_x <= n_max:
        raise ValidationError("need 0 <= n_x <= n_max and n_max >= 1")
    if bits_per_token <= 0:
        raise ValidationError("bits_per_token must be positive")
    return (n_x / n_max) * (bits_per_token / 16.0) + (1.0 / 16.0 if include_mask else 0.0)


def mse(x, x_hat) -> float:
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValidationError("length mismatch")
    return float(np.mean((x - x_hat) ** 2))


def psnr(x, x_hat, max_val: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for an exact reconstruction.

    The default peak of 2.0 is the full range of signals in [-1, 1].
    """
    if max_val <= 0:
        raise ValidationError("max_val must be positive")
    err = mse(x, x_hat)
    if err == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(max_val**2 / err)
