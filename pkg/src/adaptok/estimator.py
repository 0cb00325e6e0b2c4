"""Batch tokenization pipeline and a scikit-learn style wrapper around it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .codec import TokenStream, deserialize, serialize_indices
from .compressor import TokenMask, keep_top, patch_scores
from .exceptions import RouterStateError, ValidationError
from .fsq import digits_to_index, index_to_digits
from .model import (N_TOKENS, PATCH, ModelParams, NfeCounter, decode_tokens, encode_tokens,
                    forward_full)
from .router import RouterState, beta_from_bpp16, route_many
from .source import SIGNAL_LENGTH, SignalSet


@dataclass
class Tokenized:
    n_x: np.ndarray
    masks: np.ndarray
    digits: np.ndarray
    recon: np.ndarray
    nll: np.ndarray
    beta: float
    normalizer: float

    def indices(self, params: ModelParams) -> np.ndarray:
        """(B, 16) codebook indices with -1 at dropped positions."""
        idx = digits_to_index(self.digits, params.fsq)
        return np.where(self.masks, idx, -1)

    def streams(self, params: ModelParams) -> list[bytes]:
        idx = digits_to_index(self.digits, params.fsq)
        return [serialize_indices(idx[i][self.masks[i]], TokenMask(self.masks[i]), params.fsq)
                for i in range(len(self.masks))]


def resolve_beta(state: RouterState, beta: float | None = None, bpp16: float | None = None) -> float:
    if bpp16 is not None:
        return beta_from_bpp16(bpp16, state.n_max)
    return state.beta if beta is None else float(beta)


def tokenize(params: ModelParams, state: RouterState, x, *, beta: float | None = None,
             bpp16: float | None = None, normalizer: float | None = None,
             counter: NfeCounter | None = None) -> Tokenized:
    """Route, mask, quantize and reconstruct a batch of signals.

    The normalizer defaults to the router's training EMA so that a signal's
    length does not depend on what else is in the batch.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, SIGNAL_LENGTH)
    norm = state.ema_nll if normalizer is None else float(normalizer)
    if norm is None:
        raise RouterStateError("router has no EMA; pass a normalizer")
    b = resolve_beta(state, beta, bpp16)
    full = forward_full(x, params, counter)
    n_x = route_many(b, full.nll, norm, state.n_min, state.n_max)
    masks = keep_top(patch_scores(full.sq_errors, PATCH), n_x)
    digits = encode_tokens(x, masks, params, latents=full.latents)
    recon = decode_tokens(digits, masks, params)
    if counter is not None:
        counter.add(compressor=len(x), decompressor=len(x), decoder=len(x))
    return Tokenized(n_x, masks, digits, recon, full.nll, b, norm)


def streams_to_arrays(streams, params: ModelParams):
    """Parse token streams into (digits, masks) batches, checking the quantizer matches."""
    digits = np.zeros((len(streams), N_TOKENS, params.fsq.dim), dtype=np.int64)
    masks = np.zeros((len(streams), N_TOKENS), dtype=bool)
    for i, data in enumerate(streams):
        ts = data if isinstance(data, TokenStream) else deserialize(data)
        if ts.config != params.fsq:
            raise ValidationError(f"stream {i} uses FSQ levels {ts.config.levels}, model has {params.fsq.levels}")
        if ts.mask.n_max != N_TOKENS:
            raise ValidationError(f"stream {i} has n_max={ts.mask.n_max}, model expects {N_TOKENS}")
        masks[i] = ts.mask.kept
        digits[i, ts.mask.kept] = index_to_digits(ts.indices, params.fsq)
    return digits, masks


def detokenize(params: ModelParams, streams) -> np.ndarray:
    digits, masks = streams_to_arrays(streams, params)
    return decode_tokens(digits, masks, params)


class AdaptiveTokenizer(TransformerMixin, BaseEstimator):
    """Variable-length tokenizer for length-64 signals.

    ``transform`` returns a (n, 16) array of codebook indices with -1 at
    dropped positions; ``inverse_transform`` reconstructs signals from it.
    Lengths follow ``beta`` (or ``bpp16`` when given), normalized by the
    error average tracked during training.
    """

    def __init__(self, steps=12000, batch=64, lr_start=3e-3, lr_end=3e-4, router_mode="fixed_beta",
                 beta=8.0, bpp16=None, seed=0, noise_sigma=0.01):
        self.steps = steps
        self.batch = batch
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.router_mode = router_mode
        self.beta = beta
        self.bpp16 = bpp16
        self.seed = seed
        self.noise_sigma = noise_sigma

    def _check_X(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != SIGNAL_LENGTH:
            raise ValueError(f"expected {SIGNAL_LENGTH} features, got {X.shape[1]}")
        return X

    def fit(self, X, y=None):
        from .trainer import TrainConfig, train

        X = self._check_X(X)
        # segment labels only matter for evaluation, so a constant stands in
        data = SignalSet(X, np.ones(len(X), dtype=np.int64), np.zeros(len(X), dtype=np.uint64))
        config = TrainConfig(steps=self.steps, batch=self.batch, lr_start=self.lr_start,
                             lr_end=self.lr_end, router_mode=self.router_mode, beta=self.beta,
                             seed=self.seed, noise_sigma=self.noise_sigma, train_size=max(len(X), 1))
        result = train(config, data)
        self.params_ = result.params
        self.router_state_ = result.router_state
        self.logs_ = result.logs
        self.n_features_in_ = SIGNAL_LENGTH
        return self

    def _tokenize(self, X) -> Tokenized:
        check_is_fitted(self, "params_")
        return tokenize(self.params_, self.router_state_, self._check_X(X), bpp16=self.bpp16,
                        beta=None if self.bpp16 is not None or self.router_mode == "flex" else self.beta)

    def transform(self, X):
        tok = self._tokenize(X)
        return tok.indices(self.params_)

    def inverse_transform(self, Z):
        check_is_fitted(self, "params_")
        Z = check_array(Z, dtype=np.int64)
        if Z.shape[1] != N_TOKENS:
            raise ValueError(f"expected {N_TOKENS} token columns, got {Z.shape[1]}")
        masks = Z >= 0
        if np.any(masks.sum(axis=1) < 1):
            raise ValueError("every row must keep at least one token")
        digits = index_to_digits(np.where(masks, Z, 0), self.params_.fsq)
        return decode_tokens(digits, masks, self.params_)

    def route_lengths(self, X) -> np.ndarray:
        return self._tokenize(X).n_x

    def score(self, X, y=None) -> float:
        """Negative mean squared reconstruction error."""
        X = self._check_X(X)
        return -float(np.mean((self._tokenize(X).recon - X) ** 2))
