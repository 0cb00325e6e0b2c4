"""Finite sources for the coding-theory side and a synthetic signal generator.

The generator produces piecewise-constant signals of length 64 whose number of
segments acts as a ground-truth complexity label.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ValidationError

SIGNAL_LENGTH = 64
MAX_SEGMENTS = 8
DEFAULT_NOISE_SIGMA = 0.01


@dataclass(frozen=True)
class DiscreteSource:
    """Finite probability distribution with strictly positive masses.

    ``exact`` optionally carries the same masses as exact fractions so that
    dyadic theorem demos never accumulate rounding drift.
    """

    probs: tuple[float, ...]
    exact: tuple[Fraction, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "probs", probs)
        if len(probs) < 2:
            raise ValidationError("a source needs at least 2 items")
        if not all(math.isfinite(p) and p > 0 for p in probs):
            raise ValidationError("probabilities must be finite and strictly positive")
        if abs(math.fsum(probs) - 1.0) > 1e-9:
            raise ValidationError(f"probabilities sum to {math.fsum(probs)!r}, expected 1")
        if self.exact is not None:
            if len(self.exact) != len(probs) or sum(self.exact) != 1:
                raise ValidationError("exact masses must match probs and sum to 1")

    def __len__(self) -> int:
        return len(self.probs)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=np.float64)

    @classmethod
    def from_counts(cls, counts: Sequence[float]) -> "DiscreteSource":
        total = math.fsum(counts)
        return cls(tuple(c / total for c in counts))

    @classmethod
    def parse(cls, text: str) -> "DiscreteSource":
        """Parse ``"0.5,0.25,0.25"`` or ``"geometric:M"``."""
        text = text.strip()
        if text.startswith("geometric:"):
            try:
                m = int(text.split(":", 1)[1])
            except ValueError as exc:
                raise ValidationError(f"bad geometric spec {text!r}") from exc
            return geometric_source(m)
        try:
            values = [float(tok) for tok in text.split(",") if tok.strip()]
        except ValueError as exc:
            raise ValidationError(f"cannot parse probabilities {text!r}") from exc
        return cls(tuple(values))


def entropy(src: DiscreteSource, base: int = 2) -> float:
    """Shannon entropy of ``src`` measured in base-``base`` symbols."""
    if not isinstance(src, DiscreteSource):
        src = DiscreteSource(tuple(src))
    if base < 2:
        raise ValidationError("entropy base must be >= 2")
    log_base = math.log(base)
    return math.fsum(-p * math.log(p) for p in src.probs) / log_base


def geometric_source(m: int) -> DiscreteSource:
    """2**m items with p(j) = 2**-j, the last mass duplicated to close the sum."""
    if not 1 <= m <= 20:
        raise ValidationError("geometric_source requires 1 <= M <= 20")
    n = 2**m
    exact = [Fraction(1, 2**j) for j in range(1, n)]
    exact.append(exact[-1])
    return DiscreteSource(tuple(float(f) for f in exact), exact=tuple(exact))


@dataclass(frozen=True)
class ToySignal:
    values: np.ndarray
    segment_count: int
    seed: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (SIGNAL_LENGTH,):
            raise ValidationError(f"signal must have length {SIGNAL_LENGTH}")
        if np.any(np.abs(values) > 1.0):
            raise ValidationError("signal values must lie in [-1, 1]")
        if not 1 <= self.segment_count <= MAX_SEGMENTS:
            raise ValidationError("segment_count must be in [1, 8]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def to_record(self) -> dict:
        return {"seed": int(self.seed), "segment_count": int(self.segment_count),
                "values": [float(v) for v in self.values]}


def clean_signal(rng: np.random.Generator, segment_count: int | None = None):
    """Noise-free piecewise-constant signal and its segment count."""
    if segment_count is None:
        segment_count = int(rng.integers(1, MAX_SEGMENTS + 1))
    elif not 1 <= segment_count <= MAX_SEGMENTS:
        raise ValidationError("segment_count must be in [1, 8]")
    cuts = np.sort(rng.choice(np.arange(1, SIGNAL_LENGTH), size=segment_count - 1, replace=False))
    levels = rng.uniform(-1.0, 1.0, size=segment_count)
    bounds = np.concatenate(([0], cuts, [SIGNAL_LENGTH]))
    values = np.repeat(levels, np.diff(bounds))
    return values, segment_count


def sample_signal(rng_seed: int, noise_sigma: float = DEFAULT_NOISE_SIGMA,
                  segment_count: int | None = None) -> ToySignal:
    if noise_sigma < 0:
        raise ValidationError("noise_sigma must be >= 0")
    rng = np.random.default_rng(rng_seed)
    values, k = clean_signal(rng, segment_count)
    if noise_sigma > 0:
        values = values + rng.normal(0.0, noise_sigma, size=SIGNAL_LENGTH)
    return ToySignal(np.clip(values, -1.0, 1.0), k, int(rng_seed))


def derive_seeds(seed: int, n: int) -> np.ndarray:
    """``n`` independent 64-bit seeds derived from one master seed."""
    return np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)


@dataclass
class SignalSet:
    """Column view over many signals: ``values`` is (n, 64)."""

    values: np.ndarray
    segment_counts: np.ndarray
    seeds: np.ndarray

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, idx) -> "SignalSet":
        return SignalSet(self.values[idx], self.segment_counts[idx], self.seeds[idx])

    @classmethod
    def from_signals(cls, signals: Iterable[ToySignal]) -> "SignalSet":
        signals = list(signals)
        return cls(np.stack([s.values for s in signals]) if signals else np.zeros((0, SIGNAL_LENGTH)),
                   np.array([s.segment_count for s in signals], dtype=np.int64),
                   np.array([s.seed for s in signals], dtype=np.uint64))


def make_dataset(n: int, seed: int, noise_sigma: float = DEFAULT_NOISE_SIGMA) -> SignalSet:
    return SignalSet.from_signals(sample_signal(int(s), noise_sigma) for s in derive_seeds(seed, n))


def write_jsonl(path, signals: SignalSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for values, k, s in zip(signals.values, signals.segment_counts, signals.seeds):
            fh.write(json.dumps({"seed": int(s), "segment_count": int(k),
                                 "values": [float(v) for v in values]}) + "\n")


def read_jsonl(path) -> SignalSet:
    signals = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                signals.append(ToySignal(np.asarray(rec["values"], dtype=np.float64),
                                         int(rec["segment_count"]), int(rec["seed"])))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad signal record ({exc})") from exc
    return SignalSet.from_signals(signals)
