"""Two-phase training of the toy tokenizer, evaluation sweeps and the oracle allocator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.stats import spearmanr

from .compressor import keep_top, patch_scores
from .exceptions import ConfigurationError, DivergenceError, ValidationError
from .model import (BASE_PARAMS, N_TOKENS, PATCH, ModelParams, NfeCounter, backward, backward_full,
                    fit_decoder, forward_adaptive, forward_full, init_params,
                    transform_encoder)
from .router import (RouterState, beta_from_bpp16, default_n_min, draw_flex_beta, ema_trace,
                     route_by_search, route_many, EMA_DECAY, FLEX_FRACTIONS)
from .source import SignalSet, make_dataset

ROUTER_MODES = ("fixed_beta", "flex", "uniform_baseline", "full_length")
ORACLE_GRID = (1, 2, 4, 6, 8, 10, 12, 14, 16)
DIVERGENCE_LOSS = 1e3
DECODER_FIT_SIZE = 2048


@dataclass
class TrainConfig:
    steps: int = 12000
    batch: int = 64
    lr_start: float = 3e-3
    lr_end: float = 3e-4
    router_mode: str = "fixed_beta"
    beta: float = 8.0
    flex_fractions: tuple = FLEX_FRACTIONS
    seed: int = 0
    noise_sigma: float = 0.01
    train_size: int = 20000
    phase1_fraction: float = 0.25
    finetune_base: bool = False
    encoder_init: str = "transform"
    train_encoder: bool = False
    mean_gain: float = 0.95
    detail_gain: float = 1.0
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    ema_decay: float = EMA_DECAY

    def __post_init__(self):
        self.flex_fractions = tuple(float(f) for f in self.flex_fractions)
        if self.steps <= 0 or self.batch <= 0 or self.train_size <= 0:
            raise ConfigurationError("steps, batch and train_size must be positive")
        if not 0 < self.lr_end <= self.lr_start:
            raise ConfigurationError("need 0 < lr_end <= lr_start")
        if self.router_mode not in ROUTER_MODES:
            raise ConfigurationError(f"router_mode must be one of {ROUTER_MODES}")
        if not self.beta > 0:
            raise ConfigurationError("beta must be positive")
        if self.encoder_init not in ("transform", "random"):
            raise ConfigurationError("encoder_init must be 'transform' or 'random'")
        if not 0 < self.ema_decay < 1:
            raise ConfigurationError("ema_decay must lie in (0, 1)")
        if not 0 <= self.phase1_fraction <= 1:
            raise ConfigurationError("phase1_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flex_fractions"] = list(self.flex_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def cosine_lr(step: int, total: int, lr_start: float, lr_end: float) -> float:
    frac = step / max(total - 1, 1)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * frac))


class RmsProp:
    """Momentumless adaptive step: per-parameter running second moment."""

    def __init__(self, params: ModelParams, decay: float = 0.99, eps: float = 1e-8):
        self.decay, self.eps = decay, eps
        self.v = {k: np.zeros_like(a) for k, a in params.arrays.items()}

    def step(self, params: ModelParams, grads: dict, lr: float, names=None) -> None:
        for k in sorted(grads) if names is None else names:
            g = grads[k]
            self.v[k] *= self.decay
            self.v[k] += (1.0 - self.decay) * g * g
            params.arrays[k] -= lr * g / (np.sqrt(self.v[k]) + self.eps)
        params.touch()


@dataclass
class TrainResult:
    params: ModelParams
    router_state: RouterState
    logs: list = field(default_factory=list)
    config: TrainConfig | None = None

    def write_logs(self, path) -> None:
        write_log_csv(path, self.logs)


def write_log_csv(path, logs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "n_x", "ema", "lr"])
        for row in logs:
            w.writerow([row["step"], repr(row["loss"]), repr(row["n_x"]), repr(row["ema"]), repr(row["lr"])])


def _flex_seed(seed: int, step: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, step, i]).generate_state(1, dtype=np.uint64)[0])


def train(config: TrainConfig, data: SignalSet | None = None, callback=None) -> TrainResult:
    """Algorithm-style loop: sample, route from the full-length error, mask,
    tokenize adaptively, reconstruct and take an optimizer step.

    The first ``phase1_fraction`` of steps use the full mask.  ``callback``
    (step, params) is called after every step when given.
    """
    if data is None:
        data = make_dataset(config.train_size, config.seed, config.noise_sigma)
    if len(data) == 0:
        raise ValidationError("training data is empty")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7A11]))
    params = init_params(config.seed)
    if config.encoder_init == "transform":
        transform_encoder(params, config.mean_gain, config.detail_gain)
        fit_decoder(params, data.values[:DECODER_FIT_SIZE])
    opt = RmsProp(params, config.rms_decay, config.rms_eps)
    if config.router_mode == "flex":
        state = RouterState.flex(N_TOKENS, config.flex_fractions, ema_decay=config.ema_decay)
    else:
        state = RouterState(beta=config.beta, n_max=N_TOKENS, ema_decay=config.ema_decay)
    n_min, n_max = state.n_min, state.n_max
    phase1_steps = int(round(config.phase1_fraction * config.steps))
    ema = None
    logs = []

    for step in range(config.steps):
        lr = cosine_lr(step, config.steps, config.lr_start, config.lr_end)
        x = data.values[rng.integers(0, len(data), size=config.batch)]
        full = forward_full(x, params)
        nll = np.maximum(full.nll, 1e-300)
        trace = ema_trace(ema, nll, state.ema_decay)
        ema = float(trace[-1])

        routed = step >= phase1_steps and config.router_mode != "full_length"
        if not routed:
            # phase 1 trains only the fixed-length path, so the residual
            # branches stay at zero and the full-mask identity survives
            loss, grads = backward_full(x, params)
            n_x = np.full(config.batch, n_max)
        else:
            if config.router_mode == "uniform_baseline":
                n_x = rng.integers(n_min, n_max + 1, size=config.batch)
            elif config.router_mode == "flex":
                betas = np.array([draw_flex_beta(state, _flex_seed(config.seed, step, i))
                                  for i in range(config.batch)])
                n_x = route_many(betas, nll, trace, n_min, n_max)
            else:
                n_x = route_many(config.beta, nll, trace, n_min, n_max)
            mask = keep_top(patch_scores(full.sq_errors, PATCH), n_x)
            out = forward_adaptive(x, mask, params, latents=full.latents)
            loss = out.loss
            grads = backward(out.trace, params)

        if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise DivergenceError(f"loss {loss!r} at step {step} (lr {lr:.3g}); training aborted")
        base = [k for k in BASE_PARAMS if config.train_encoder or not k.startswith("enc_")]
        if not routed:
            names = base
        elif config.finetune_base:
            names = sorted(set(grads) - set(BASE_PARAMS)) + base
        else:
            names = sorted(set(grads) - set(BASE_PARAMS))
        opt.step(params, grads, lr, names)
        logs.append({"step": step, "loss": float(loss), "n_x": float(n_x.mean()), "ema": ema, "lr": lr})
        if callback is not None:
            callback(step, params)

    state = RouterState(beta=state.beta, n_max=n_max, n_min=n_min, ema_nll=ema,
                        ema_decay=state.ema_decay, flex_betas=state.flex_betas)
    return TrainResult(params, state, logs, config)


# -- evaluation ---------------------------------------------------------------------

@dataclass
class EvalRow:
    target_bpp16: float
    beta: float
    mean_n_x: float
    realized_bpp16: float
    mse: float
    psnr: float
    spearman: float
    clamp_fraction: float
    decoder_nfe: float
    extra_nfe: float
    router: str = "elbo"


def per_sample_psnr(x: np.ndarray, recon: np.ndarray, max_val: float = 2.0) -> np.ndarray:
    err = ((x - recon) ** 2).mean(axis=1)
    with np.errstate(divide="ignore"):
        return np.where(err > 0, 10.0 * np.log10(max_val**2 / np.where(err > 0, err, 1.0)), np.inf)


def _spearman(a, b) -> float:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    return float(spearmanr(a, b).statistic)


def calibrate_beta(nll: np.ndarray, normalizer: float, target_mean: float, n_min: int, n_max: int,
                   iters: int = 60) -> float:
    """Beta whose routed mean length is closest to ``target_mean``.

    Clamping biases the realized mean away from beta, so beta is adjusted by
    bisection on the (monotone) mean routed length.
    """
    if not n_min <= target_mean <= n_max:
        raise ValidationError(f"target mean length {target_mean} outside [{n_min}, {n_max}]")
    mean_at = lambda b: route_many(b, nll, normalizer, n_min, n_max).mean()  # noqa: E731
    lo, hi = 1e-9, float(target_mean)
    while mean_at(hi) < target_mean and hi < 1e9:
        hi *= 2.0
    best = min((lo, hi), key=lambda b: abs(mean_at(b) - target_mean))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        m = mean_at(mid)
        if abs(m - target_mean) < abs(mean_at(best) - target_mean):
            best = mid
        if m < target_mean:
            lo = mid
        else:
            hi = mid
    return best


def adaptive_mse_at(x, params: ModelParams, full, n_x) -> np.ndarray:
    """Per-sample adaptive MSE for per-sample lengths ``n_x``."""
    mask = keep_top(patch_scores(full.sq_errors, PATCH), n_x)
    return forward_adaptive(x, mask, params, latents=full.latents).per_sample_mse


def evaluate(params: ModelParams, router_state: RouterState, eval_set: SignalSet, bpp16_targets,
             calibrate: bool = True, normalizer: str = "dataset", bits_per_token: float = 16.0):
    """Metrics per BPP16 target for the ELBO-proxy router.

    ``normalizer`` is ``"dataset"`` (eval-set mean error) or ``"ema"``.
    """
    if len(eval_set) == 0:
        raise ValidationError("evaluation set is empty")
    x = eval_set.values
    counter = NfeCounter()
    full = forward_full(x, params, counter)
    if normalizer == "dataset":
        norm = float(full.nll.mean())
    elif normalizer == "ema":
        if router_state.ema_nll is None:
            raise ValidationError("router state has no EMA")
        norm = router_state.ema_nll
    else:
        raise ValidationError("normalizer must be 'dataset' or 'ema'")
    n_min, n_max = router_state.n_min, router_state.n_max
    rows = []
    for target in bpp16_targets:
        beta = beta_from_bpp16(float(target), n_max, bits_per_token)
        if calibrate and n_min <= beta <= n_max:
            beta = calibrate_beta(full.nll, norm, beta, n_min, n_max)
        n_x = route_many(beta, full.nll, norm, n_min, n_max)
        c = NfeCounter(counter.encoder, counter.decoder)
        mask = keep_top(patch_scores(full.sq_errors, PATCH), n_x)
        out = forward_adaptive(x, mask, params, c, latents=full.latents)
        raw = beta * full.nll / norm
        clamp = float(np.mean((raw < n_min - 0.5) | (raw >= n_max + 0.5)))
        dec = c.decoder / len(x)
        rows.append(EvalRow(
            target_bpp16=float(target), beta=float(beta), mean_n_x=float(n_x.mean()),
            realized_bpp16=float(np.mean((n_x / n_max) * (bits_per_token / 16.0) + 1.0 / 16.0)),
            mse=float(out.per_sample_mse.mean()),
            psnr=float(np.mean(per_sample_psnr(x, out.recon))),
            spearman=_spearman(eval_set.segment_counts, n_x),
            clamp_fraction=clamp, decoder_nfe=dec, extra_nfe=dec - 1.0))
    return rows


def evaluate_fixed(params: ModelParams, eval_set: SignalSet, n_x: int):
    """Same length for every sample (the data-agnostic inference setting)."""
    x = eval_set.values
    full = forward_full(x, params)
    mse = adaptive_mse_at(x, params, full, np.full(len(x), n_x))
    return float(mse.mean())


def full_length_mse(params: ModelParams, eval_set: SignalSet) -> float:
    return float(forward_full(eval_set.values, params).sq_errors.mean())


def evaluate_search(params: ModelParams, eval_set: SignalSet, threshold: float, n_max: int = N_TOKENS,
                    block: int | None = None, n_min: int = 1) -> EvalRow:
    """Threshold-driven length search per sample with instrumented decoder counts.

    Each sample pays one full-length pass for the token scores plus one
    decoder evaluation per probe.  When the search falls back to ``n_max``
    unprobed, nothing is dropped and the full-length pass is the output.
    """
    if len(eval_set) == 0:
        raise ValidationError("evaluation set is empty")
    x = eval_set.values
    counter = NfeCounter()
    full = forward_full(x, params, counter)
    n_x = np.empty(len(x), dtype=np.int64)
    err = np.empty(len(x))
    recon = np.empty_like(x)
    for i in range(len(x)):
        cache = {}

        def probe(n, i=i, cache=cache):
            mask = keep_top(patch_scores(full.sq_errors[i:i + 1], PATCH), n)
            out = forward_adaptive(x[i:i + 1], mask, params, counter, latents=full.latents[i:i + 1])
            cache[n] = out
            return out.loss

        res = route_by_search(threshold, probe, n_max, block, n_min)
        n_x[i] = res.n_x
        if res.n_x in cache:
            err[i] = cache[res.n_x].loss
            recon[i] = cache[res.n_x].recon[0]
        else:
            err[i] = full.sq_errors[i].mean()
            recon[i] = full.recon[i]
    dec = counter.decoder / len(x)
    return EvalRow(target_bpp16=float("nan"), beta=float("nan"), mean_n_x=float(n_x.mean()),
                   realized_bpp16=float(np.mean(n_x / n_max + 1.0 / 16.0)), mse=float(err.mean()),
                   psnr=float(np.mean(per_sample_psnr(x, recon))),
                   spearman=_spearman(eval_set.segment_counts, n_x), clamp_fraction=0.0,
                   decoder_nfe=dec, extra_nfe=dec - 1.0, router="search")


def loss_curves(params: ModelParams, eval_set: SignalSet, grid=ORACLE_GRID) -> np.ndarray:
    """(n_samples, len(grid)) adaptive MSE at each grid length."""
    x = eval_set.values
    full = forward_full(x, params)
    return np.stack([adaptive_mse_at(x, params, full, np.full(len(x), n)) for n in grid], axis=1)


def _lower_hull(grid, curve):
    """Indices of the lower convex hull of (grid, curve), left to right."""
    hull = []
    for j in range(len(grid)):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = (grid[b] - grid[a]) * (curve[j] - curve[a]) - (curve[b] - curve[a]) * (grid[j] - grid[a])
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(j)
    return hull


def oracle_allocate(curves, budget: float, grid=ORACLE_GRID) -> np.ndarray:
    """Per-sample lengths minimizing total loss with mean length <= budget.

    Each curve is replaced by its lower convex hull over ``grid``; hull
    segments from all samples are then bought greedily in order of loss
    decrease per token, starting from the smallest grid length.  A segment
    that does not fit the remaining budget is skipped.
    """
    curves = np.atleast_2d(np.asarray(curves, dtype=np.float64))
    grid = np.asarray(grid, dtype=np.int64)
    if curves.shape[1] != grid.size:
        raise ValidationError("curves must be sampled on the grid")
    if np.any(np.diff(grid) <= 0):
        raise ValidationError("grid must be increasing")
    n = len(curves)
    if budget < grid[0]:
        raise ValidationError(f"budget {budget} below the minimum length {grid[0]}")
    segments = []
    for i, curve in enumerate(curves):
        hull = _lower_hull(grid, curve)
        for a, b in zip(hull, hull[1:]):
            gain = (curve[a] - curve[b]) / (grid[b] - grid[a])
            segments.append((-gain, i, a, b))
    segments.sort()
    alloc = np.full(n, grid[0], dtype=np.int64)
    pos = np.zeros(n, dtype=np.int64)
    remaining = budget * n - alloc.sum()
    # a sample's hull segments have decreasing gains, so they come out in order
    for neg_gain, i, a, b in segments:
        if neg_gain >= 0:
            break
        if pos[i] != a:
            continue
        cost = grid[b] - grid[a]
        if cost <= remaining + 1e-9:
            alloc[i] = grid[b]
            pos[i] = b
            remaining -= cost
    return alloc


def oracle_mse(curves, budget: float, grid=ORACLE_GRID) -> float:
    curves = np.atleast_2d(curves)
    alloc = oracle_allocate(curves, budget, grid)
    col = np.searchsorted(np.asarray(grid), alloc)
    return float(curves[np.arange(len(curves)), col].mean())
