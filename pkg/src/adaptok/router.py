"""Token-length routing.

The ELBO-proxy router assigns ``N_x = clamp(round(beta * nll_x / E[nll]), n_min, n_max)``
where ``nll_x`` is the total squared reconstruction error of a full-length
encode/decode pass and ``E[nll]`` is tracked by an exponential moving average
during training (or an evaluation-set mean at inference).  The Flex variant
draws ``beta`` from a fixed set per sample.  ``route_by_search`` is the
threshold/bisection baseline used for evaluation-count comparisons.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .exceptions import BudgetTooSmallError, ConfigurationError, RouterStateError, ValidationError

EMA_DECAY = 0.99
MASK_BPP16 = 1.0 / 16.0
FLEX_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


def default_n_min(n_max: int) -> int:
    return max(1, math.ceil(n_max / 16))


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


@dataclass(frozen=True)
class RouterState:
    beta: float
    n_max: int
    n_min: int | None = None
    ema_nll: float | None = None
    ema_decay: float = EMA_DECAY
    flex_betas: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.n_min is None:
            object.__setattr__(self, "n_min", default_n_min(self.n_max))
        object.__setattr__(self, "flex_betas", tuple(float(b) for b in self.flex_betas))
        if not 1 <= self.n_min <= self.n_max:
            raise ValidationError("need 1 <= n_min <= n_max")
        if not self.beta > 0 or any(b <= 0 for b in self.flex_betas):
            raise ValidationError("beta values must be positive")
        if self.ema_nll is not None and not (self.ema_nll > 0 and math.isfinite(self.ema_nll)):
            raise ValidationError("ema_nll must be positive once set")
        if not 0 < self.ema_decay < 1:
            raise ValidationError("ema_decay must lie in (0, 1)")

    @classmethod
    def flex(cls, n_max: int, fractions: Sequence[float] = FLEX_FRACTIONS, **kw) -> "RouterState":
        betas = tuple(f * n_max for f in fractions)
        return cls(beta=max(betas), n_max=n_max, flex_betas=betas, **kw)

    def to_dict(self) -> dict:
        return {"beta": self.beta, "ema_nll": self.ema_nll, "n_max": self.n_max,
                "n_min": self.n_min, "flex_betas": list(self.flex_betas), "ema_decay": self.ema_decay}

    @classmethod
    def from_dict(cls, d: dict) -> "RouterState":
        return cls(beta=d["beta"], n_max=d["n_max"], n_min=d.get("n_min"), ema_nll=d.get("ema_nll"),
                   ema_decay=d.get("ema_decay", EMA_DECAY), flex_betas=tuple(d.get("flex_betas", ())))


def update_ema(state: RouterState, nll: float) -> RouterState:
    if not nll > 0 or not math.isfinite(nll):
        raise ValidationError(f"nll must be positive and finite, got {nll!r}")
    if state.ema_nll is None:
        return replace(state, ema_nll=float(nll))
    a = state.ema_decay
    return replace(state, ema_nll=a * state.ema_nll + (1.0 - a) * float(nll))


def _route(beta: float, nll_x: float, norm: float, n_min: int, n_max: int) -> int:
    if nll_x < 0 or not math.isfinite(nll_x):
        raise ValidationError("nll_x must be finite and nonnegative")
    n = round_half_away(beta * nll_x / norm)
    return min(max(n, n_min), n_max)


def route(state: RouterState, nll_x: float, *, beta: float | None = None,
          normalizer: float | None = None) -> int:
    """Deterministic ELBO-proxy router.

    ``normalizer`` overrides the EMA (for instance with an evaluation-set mean).
    """
    norm = state.ema_nll if normalizer is None else normalizer
    if norm is None:
        raise RouterStateError("router normalizer unset: update the EMA or pass a normalizer")
    if not norm > 0:
        raise ValidationError("normalizer must be positive")
    return _route(state.beta if beta is None else beta, nll_x, norm, state.n_min, state.n_max)


def draw_flex_beta(state: RouterState, rng_seed: int) -> float:
    if not state.flex_betas:
        raise ConfigurationError("flex routing needs a nonempty flex_betas set")
    return state.flex_betas[random.Random(rng_seed).randrange(len(state.flex_betas))]


def route_flex(state: RouterState, nll_x: float, rng_seed: int, *,
               normalizer: float | None = None) -> int:
    return route(state, nll_x, beta=draw_flex_beta(state, rng_seed), normalizer=normalizer)


def beta_from_bpp16(bpp16: float, n_max: int, bits_per_token: float = 16.0) -> float:
    """Average token budget for a BPP16 target after paying the 1/16 mask cost."""
    if bpp16 <= MASK_BPP16:
        raise BudgetTooSmallError(f"BPP16 {bpp16!r} does not exceed the mask overhead 1/16")
    if bits_per_token <= 0 or n_max < 1:
        raise ValidationError("n_max and bits_per_token must be positive")
    return n_max * (bpp16 - MASK_BPP16) * (16.0 / bits_per_token)


@dataclass(frozen=True)
class SearchResult:
    n_x: int
    probes: int
    extra_nfes: int
    reached: bool
    violations: int = 0


def route_by_search(target_loss: float, probe: Callable[[int], float], n_max: int,
                    block: int | None = None, n_min: int = 1) -> SearchResult:
    """Smallest length in [n_min, n_max] whose probed loss meets ``target_loss``.

    Lengths are processed in blocks of ``block`` tokens (default: one block of
    ``n_max``).  Earlier blocks are checked at their end point; the first block
    that can meet the target is bisected, its upper end taken as feasible
    without a probe.  ``n_max`` is the fallback and is never probed, so a
    single block of a power-of-two ``n_max`` costs exactly ``log2(n_max)``
    probes.  A probed loss above one seen at a shorter length is a
    monotonicity violation and is clamped down to it.

    ``probes`` counts decoder evaluations made by the search.  When the
    selected length was probed its decode doubles as the final
    reconstruction, so the count beyond a fixed-length tokenizer's single
    decode is ``extra_nfes = probes - 1``.  ``reached`` is False when the
    selected length is the unprobed fallback.
    """
    block = n_max if block is None else block
    if not 1 <= n_min <= n_max or block < 1:
        raise ValidationError("need 1 <= n_min <= n_max and block >= 1")
    seen: dict[int, float] = {}
    violations = 0

    def ask(n: int) -> float:
        nonlocal violations
        raw = float(probe(n))
        shorter = [v for m, v in seen.items() if m < n]
        best_shorter = min(shorter) if shorter else math.inf
        if raw > best_shorter:
            violations += 1
            raw = best_shorter
        seen[n] = raw
        return raw

    lo = n_min
    hi = n_max
    start = ((n_min - 1) // block) * block
    for end in range(start + block, n_max, block):
        if ask(end) <= target_loss:
            hi = end
            break
        lo = end + 1
    while lo < hi:
        mid = (lo + hi) // 2
        if ask(mid) <= target_loss:
            hi = mid
        else:
            lo = mid + 1
    reached = lo in seen and seen[lo] <= target_loss
    probes = len(seen)
    return SearchResult(lo, probes, probes - 1, reached, violations)


def route_many(beta, nll, normalizer, n_min: int, n_max: int):
    """Vectorised ``route``; ``beta`` and ``normalizer`` may be per-sample arrays."""
    nll = np.asarray(nll, dtype=np.float64)
    if np.any(nll < 0) or not np.all(np.isfinite(nll)):
        raise ValidationError("nll values must be finite and nonnegative")
    if not np.all(np.asarray(normalizer) > 0):
        raise ValidationError("normalizer must be positive")
    v = np.asarray(beta, dtype=np.float64) * nll / normalizer
    n = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(n, n_min, n_max).astype(np.int64)


def ema_trace(ema: float | None, nll, decay: float = EMA_DECAY):
    """EMA value after each successive update, as an array."""
    out = np.empty(len(nll))
    for i, v in enumerate(nll):
        v = float(v)
        if not v > 0 or not math.isfinite(v):
            raise ValidationError(f"nll must be positive and finite, got {v!r}")
        ema = v if ema is None else decay * ema + (1.0 - decay) * v
        out[i] = ema
    return out
