"""Toy adaptive tokenizer networks with hand-written backpropagation.

Shapes (batch-first): a signal of 64 samples is cut into 16 patches of 4.

* encoder: per-patch affine 4 -> 6 followed by ``tanh``
* compressor: masked positional mixing that lets each kept token read the
  dropped tokens, then a per-token residual MLP on ``[h, mix, mask]``
* FSQ on kept tokens (straight-through gradient), learned ``fill`` latent at
  dropped positions
* decompressor: masked positional mixing that lets each dropped position read
  the kept tokens, then a per-token residual MLP
* decoder: per-token affine 6 -> 4

Mixing has two heads, each a learned 16x16 logit matrix whose softmax is
restricted to the source positions chosen by the mask and lying strictly to
the left (or right) of the target.  A single position-only head cannot tell a
dropped token on which side its source lies, so it cannot place the two levels
of a kept step patch.  Residual branches start at zero so the
adaptive path with a full mask reproduces the fixed-length path exactly at
initialisation.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ValidationError
from .fsq import FsqConfig, quantize_digits, dequantize_digits, ste_mask
from .source import SIGNAL_LENGTH

PATCH = 4
N_TOKENS = SIGNAL_LENGTH // PATCH
LATENT = 6
HIDDEN = 32
MIX_HEADS = ("left", "right")
MLP_IN = (1 + len(MIX_HEADS)) * LATENT + 1
# a head only reads sources strictly on its side of the target position
_SIDE = {
    "left": np.tril(np.ones((N_TOKENS, N_TOKENS), dtype=bool), k=-1),
    "right": np.triu(np.ones((N_TOKENS, N_TOKENS), dtype=bool), k=1),
}

PARAM_SHAPES = {
    "enc_w": (PATCH, LATENT), "enc_b": (LATENT,),
    "cmp_logits_left": (N_TOKENS, N_TOKENS), "cmp_logits_right": (N_TOKENS, N_TOKENS),
    "cmp_w1": (MLP_IN, HIDDEN), "cmp_b1": (HIDDEN,), "cmp_w2": (HIDDEN, LATENT), "cmp_b2": (LATENT,),
    "fill": (LATENT,),
    "dcm_logits_left": (N_TOKENS, N_TOKENS), "dcm_logits_right": (N_TOKENS, N_TOKENS),
    "dcm_w1": (MLP_IN, HIDDEN), "dcm_b1": (HIDDEN,), "dcm_w2": (HIDDEN, LATENT), "dcm_b2": (LATENT,),
    "dec_w": (LATENT, PATCH), "dec_b": (PATCH,),
}
BASE_PARAMS = ("enc_w", "enc_b", "dec_w", "dec_b")
MIXING_PARAMS = tuple(k for k in PARAM_SHAPES if k not in BASE_PARAMS)

CHECKPOINT_MAGIC = b"ITKM"
CHECKPOINT_VERSION = 1

_version_counter = itertools.count(1)


class ModelParams:
    """Named float64 arrays plus a version stamp bumped on every in-place update."""

    def __init__(self, arrays: dict[str, np.ndarray], levels=FsqConfig().levels):
        missing = set(PARAM_SHAPES) - set(arrays)
        if missing:
            raise ValidationError(f"missing parameters: {sorted(missing)}")
        self.arrays = {}
        for name, shape in PARAM_SHAPES.items():
            arr = np.array(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValidationError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
            self.arrays[name] = arr
        self.fsq = FsqConfig(tuple(levels))
        if self.fsq.dim != LATENT:
            raise ValidationError(f"FSQ must have {LATENT} dimensions")
        self.version = next(_version_counter)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def touch(self) -> None:
        self.version = next(_version_counter)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.fsq.levels)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_SHAPES])

    @classmethod
    def from_flat(cls, vec: np.ndarray, levels=FsqConfig().levels) -> "ModelParams":
        arrays, off = {}, 0
        for name, shape in PARAM_SHAPES.items():
            size = int(np.prod(shape))
            arrays[name] = vec[off:off + size].reshape(shape)
            off += size
        if off != vec.size:
            raise ValidationError("flat parameter vector has the wrong length")
        return cls(arrays, levels)


def n_parameters() -> int:
    return sum(int(np.prod(s)) for s in PARAM_SHAPES.values())


def init_params(seed: int = 0, levels=FsqConfig().levels, scale: float = 1.0,
                identity_mixing: bool = True) -> ModelParams:
    """Fan-in uniform initialisation.

    With ``identity_mixing`` the residual outputs, mixing logits and fill
    start at zero; otherwise every tensor is random (used by gradient checks).
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in PARAM_SHAPES.items():
        fan_in = shape[0] if len(shape) == 2 else shape[0]
        bound = scale / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    arrays["enc_w"] *= 2.0
    arrays["enc_b"][:] = 0.0
    arrays["dec_b"][:] = 0.0
    if identity_mixing:
        for name in ("cmp_w2", "cmp_b2", "dcm_w2", "dcm_b2", "fill") + tuple(
                k for k in PARAM_SHAPES if "_logits_" in k):
            arrays[name][:] = 0.0
        arrays["cmp_b1"][:] = 0.0
        arrays["dcm_b1"][:] = 0.0
    return ModelParams(arrays, levels)


def transform_encoder(params: ModelParams, mean_gain: float = 0.95, detail_gain: float = 1.0) -> None:
    """Overwrite the encoder with a fixed analysis transform, in place.

    The first three latent dimensions all carry the patch mean, with biases
    staggered by a third of a quantization step so their rounding errors do
    not coincide; the other three carry Haar-style differences.  A flat patch
    has zero detail coefficients, which sit exactly on the grid when the level
    count is odd, so flat patches cost only the (finer, dithered) mean error.
    """
    lv = params.fsq.as_array()
    w = np.zeros((PATCH, LATENT))
    w[:, 0:3] = mean_gain / PATCH
    w[:, 3] = detail_gain * np.array([1.0, 1.0, -1.0, -1.0]) / 2.0
    w[:, 4] = detail_gain * np.array([1.0, -1.0, 0.0, 0.0]) / 2.0
    w[:, 5] = detail_gain * np.array([0.0, 0.0, 1.0, -1.0]) / 2.0
    step = 2.0 / (lv[:3] - 1)
    b = np.zeros(LATENT)
    b[:3] = (np.arange(3) / 3.0 - 0.5) * step
    params.arrays["enc_w"][:] = w
    params.arrays["enc_b"][:] = b
    params.touch()


def fit_decoder(params: ModelParams, x) -> None:
    """Least-squares decoder for the current encoder and quantizer, in place."""
    patches = to_patches(x).reshape(-1, PATCH)
    h = np.tanh(patches @ params["enc_w"] + params["enc_b"])
    q = dequantize_digits(quantize_digits(h, params.fsq), params.fsq)
    design = np.hstack([q, np.ones((len(q), 1))])
    sol = np.linalg.lstsq(design, patches, rcond=None)[0]
    params.arrays["dec_w"][:] = sol[:LATENT]
    params.arrays["dec_b"][:] = sol[LATENT]
    params.touch()


@dataclass
class NfeCounter:
    """Per-sample network evaluation counts."""

    encoder: int = 0
    decoder: int = 0
    compressor: int = 0
    decompressor: int = 0

    def add(self, **kw) -> None:
        for k, v in kw.items():
            setattr(self, k, getattr(self, k) + v)


def to_patches(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != SIGNAL_LENGTH:
        raise ValidationError(f"signals must have length {SIGNAL_LENGTH}")
    return x.reshape(x.shape[0], N_TOKENS, PATCH)


def encode(x, params: ModelParams) -> np.ndarray:
    """(B, 64) signals -> (B, 16, 6) latents in (-1, 1)."""
    return np.tanh(to_patches(x) @ params["enc_w"] + params["enc_b"])


def decode(latents: np.ndarray, params: ModelParams) -> np.ndarray:
    out = latents @ params["dec_w"] + params["dec_b"]
    return out.reshape(out.shape[0], SIGNAL_LENGTH)


@dataclass
class FullPass:
    recon: np.ndarray
    sq_errors: np.ndarray
    nll: np.ndarray
    latents: np.ndarray


def forward_full(x, params: ModelParams, counter: NfeCounter | None = None) -> FullPass:
    """Fixed-length encode/quantize/decode; the router's error pass."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, SIGNAL_LENGTH)
    h = encode(x, params)
    recon = decode(dequantize_digits(quantize_digits(h, params.fsq), params.fsq), params)
    sq = (recon - x) ** 2
    if counter is not None:
        counter.add(encoder=len(x), decoder=len(x))
    return FullPass(recon, sq, sq.sum(axis=1), h)


def _masked_mix(x: np.ndarray, logits: np.ndarray, src: np.ndarray, gate: np.ndarray, side=None):
    """out[b,t] = gate[b,t] * sum_s softmax_{s in src_b}(logits[t,s]) * x[b,s].

    ``side`` further restricts which sources each target may read; a target
    with no admissible source gets zero.
    """
    allowed = src[:, None, :] if side is None else src[:, None, :] & side[None, :, :]
    lg = np.where(allowed, logits[None, :, :], -np.inf)
    peak = lg.max(axis=2, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(lg - peak)
    denom = e.sum(axis=2, keepdims=True)
    w = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    y = w @ x
    return gate[:, :, None] * y, w, y


def _masked_mix_backward(d_out, x, w, y, gate):
    dy = gate[:, :, None] * d_out
    dw = dy @ np.swapaxes(x, 1, 2)
    dx = np.swapaxes(w, 1, 2) @ dy
    dlogit = w * (dw - (w * dw).sum(axis=2, keepdims=True))
    return dx, dlogit.sum(axis=0)


@dataclass
class ForwardTrace:
    version: int
    x: np.ndarray
    patches: np.ndarray
    mask: np.ndarray
    h: np.ndarray
    cmp: tuple
    u1: np.ndarray
    a1: np.ndarray
    hp: np.ndarray
    q: np.ndarray
    hq: np.ndarray
    dcm: tuple
    u2: np.ndarray
    a2: np.ndarray
    hh: np.ndarray
    recon: np.ndarray
    surrogate: bool
    codes: np.ndarray = field(repr=False, default=None)


@dataclass
class AdaptivePass:
    recon: np.ndarray
    loss: float
    per_sample_mse: np.ndarray
    trace: ForwardTrace


def _as_mask(mask, batch: int) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 1:
        m = np.broadcast_to(m, (batch, m.size))
    if m.shape != (batch, N_TOKENS):
        raise ValidationError(f"mask must have {N_TOKENS} positions per sample")
    m = m.astype(bool)
    if np.any(m.sum(axis=1) < 1):
        raise ValidationError("every mask must keep at least one token")
    return m


def _mix_heads(x, m_src, gate, params, prefix):
    return [_masked_mix(x, params[f"{prefix}_logits_{hd}"], m_src, gate, _SIDE[hd]) for hd in MIX_HEADS]


def _mix_heads_backward(du, x, heads, gate, prefix, g):
    dx = np.zeros_like(x)
    for i, (hd, (_, w, y)) in enumerate(zip(MIX_HEADS, heads)):
        part = du[:, :, (1 + i) * LATENT:(2 + i) * LATENT]
        d, g[f"{prefix}_logits_{hd}"] = _masked_mix_backward(part, x, w, y, gate)
        dx += d
    return dx


def compress(h, m, params: ModelParams):
    mf = m.astype(np.float64)
    cmp = _mix_heads(h, ~m, mf, params, "cmp")
    u1 = np.concatenate([h] + [c[0] for c in cmp] + [mf[:, :, None]], axis=2)
    a1 = np.tanh(u1 @ params["cmp_w1"] + params["cmp_b1"])
    hp = h + a1 @ params["cmp_w2"] + params["cmp_b2"]
    return hp, (cmp, u1, a1)


def decompress(hq, m, params: ModelParams):
    mf = m.astype(np.float64)
    dcm = _mix_heads(hq, m, 1.0 - mf, params, "dcm")
    u2 = np.concatenate([hq] + [c[0] for c in dcm] + [mf[:, :, None]], axis=2)
    a2 = np.tanh(u2 @ params["dcm_w1"] + params["dcm_b1"])
    hh = hq + a2 @ params["dcm_w2"] + params["dcm_b2"]
    return hh, (dcm, u2, a2)


def forward_adaptive(x, mask, params: ModelParams, counter: NfeCounter | None = None,
                     surrogate: bool = False, latents: np.ndarray | None = None) -> AdaptivePass:
    """Masked tokenization and reconstruction; loss is the mean squared error.

    ``surrogate=True`` replaces quantization by clamping to [-1, 1] (the
    function whose gradient the straight-through backward pass computes).
    ``latents`` reuses an encoder output, e.g. from the router pass.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, SIGNAL_LENGTH)
    m = _as_mask(mask, len(x))
    patches = to_patches(x)
    if latents is None:
        h = np.tanh(patches @ params["enc_w"] + params["enc_b"])
        if counter is not None:
            counter.add(encoder=len(x))
    else:
        h = latents
    hp, (cmp, u1, a1) = compress(h, m, params)
    codes = None
    if surrogate:
        q = np.clip(hp, -1.0, 1.0)
    else:
        codes = quantize_digits(hp, params.fsq)
        q = dequantize_digits(codes, params.fsq)
    mf = m[:, :, None].astype(np.float64)
    hq = mf * q + (1.0 - mf) * params["fill"]
    hh, (dcm, u2, a2) = decompress(hq, m, params)
    recon = decode(hh, params)
    if counter is not None:
        counter.add(compressor=len(x), decompressor=len(x), decoder=len(x))
    per_sample = ((recon - x) ** 2).mean(axis=1)
    trace = ForwardTrace(params.version, x, patches, m, h, cmp, u1, a1, hp, q, hq, dcm, u2, a2, hh,
                         recon, surrogate, codes)
    return AdaptivePass(recon, float(per_sample.mean()), per_sample, trace)


def backward(trace: ForwardTrace, params: ModelParams, d_recon: np.ndarray | None = None) -> dict:
    """Reverse-mode gradients of the trace's mean squared error (or of
    ``sum(d_recon * recon)`` when an upstream gradient is supplied)."""
    if trace.version != params.version:
        raise ValidationError("stale trace: parameters changed after the forward pass")
    b = trace.x.shape[0]
    if d_recon is None:
        d_recon = 2.0 * (trace.recon - trace.x) / (b * SIGNAL_LENGTH)
    dy = np.asarray(d_recon, dtype=np.float64).reshape(b, N_TOKENS, PATCH)
    g = {}
    flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731

    g["dec_w"] = flat(trace.hh).T @ flat(dy)
    g["dec_b"] = dy.sum(axis=(0, 1))
    dhh = dy @ params["dec_w"].T

    # decompressor
    g["dcm_w2"] = flat(trace.a2).T @ flat(dhh)
    g["dcm_b2"] = dhh.sum(axis=(0, 1))
    dz2 = (dhh @ params["dcm_w2"].T) * (1.0 - trace.a2**2)
    g["dcm_w1"] = flat(trace.u2).T @ flat(dz2)
    g["dcm_b1"] = dz2.sum(axis=(0, 1))
    du2 = dz2 @ params["dcm_w1"].T
    dhq = dhh + du2[:, :, :LATENT]
    dhq = dhq + _mix_heads_backward(du2, trace.hq, trace.dcm, 1.0 - trace.mask.astype(np.float64),
                                    "dcm", g)

    mf = trace.mask[:, :, None].astype(np.float64)
    g["fill"] = ((1.0 - mf) * dhq).sum(axis=(0, 1))
    dhp = mf * dhq * ste_mask(trace.hp)

    # compressor
    g["cmp_w2"] = flat(trace.a1).T @ flat(dhp)
    g["cmp_b2"] = dhp.sum(axis=(0, 1))
    dz1 = (dhp @ params["cmp_w2"].T) * (1.0 - trace.a1**2)
    g["cmp_w1"] = flat(trace.u1).T @ flat(dz1)
    g["cmp_b1"] = dz1.sum(axis=(0, 1))
    du1 = dz1 @ params["cmp_w1"].T
    dh = dhp + du1[:, :, :LATENT]
    dh = dh + _mix_heads_backward(du1, trace.h, trace.cmp, trace.mask.astype(np.float64), "cmp", g)

    dpre = dh * (1.0 - trace.h**2)
    g["enc_w"] = flat(trace.patches).T @ flat(dpre)
    g["enc_b"] = dpre.sum(axis=(0, 1))
    return g


def backward_full(x, params: ModelParams, surrogate: bool = False):
    """Loss and gradients of the fixed-length path (encoder/decoder only)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, SIGNAL_LENGTH)
    patches = to_patches(x)
    h = np.tanh(patches @ params["enc_w"] + params["enc_b"])
    q = np.clip(h, -1.0, 1.0) if surrogate else dequantize_digits(quantize_digits(h, params.fsq), params.fsq)
    recon = decode(q, params)
    b = len(x)
    dy = (2.0 * (recon - x) / (b * SIGNAL_LENGTH)).reshape(b, N_TOKENS, PATCH)
    g = {"dec_w": q.reshape(-1, LATENT).T @ dy.reshape(-1, PATCH), "dec_b": dy.sum(axis=(0, 1))}
    dpre = (dy @ params["dec_w"].T) * ste_mask(h) * (1.0 - h**2)
    g["enc_w"] = patches.reshape(-1, PATCH).T @ dpre.reshape(-1, LATENT)
    g["enc_b"] = dpre.sum(axis=(0, 1))
    return float(((recon - x) ** 2).mean()), g


# -- gradient verification ------------------------------------------------------

def _rel_err(a: np.ndarray, n: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(params_scale: float = 1.0, seeds=range(10), step: float = 1e-5,
               subnetwork: str = "full", batch: int = 4, boundary: float = 1e-3,
               floor: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Runs on the clamp surrogate of the quantizer.  Samples whose
    pre-quantization latents come within ``boundary`` of the clamp edges are
    excluded.  ``subnetwork="linear"`` checks only the decoder affine map,
    where central differences are exact up to rounding.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    from .source import sample_signal

    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        params = init_params(seed, scale=params_scale, identity_mixing=False)
        x = np.stack([sample_signal(int(s)).values for s in rng.integers(0, 2**32, size=batch)])
        n_x = rng.integers(1, N_TOKENS + 1, size=batch)
        mask = np.zeros((batch, N_TOKENS), dtype=bool)
        for i, k in enumerate(n_x):
            mask[i, rng.choice(N_TOKENS, size=k, replace=False)] = True
        hp = forward_adaptive(x, mask, params, surrogate=True).trace.hp
        near = (np.abs(np.abs(hp) - 1.0) < boundary) & mask[:, :, None]
        keep = ~near.any(axis=(1, 2))
        if not keep.any():
            continue
        x, mask = x[keep], mask[keep]

        names = ("dec_w", "dec_b") if subnetwork == "linear" else tuple(PARAM_SHAPES)
        fwd = forward_adaptive(x, mask, params, surrogate=True)
        grads = backward(fwd.trace, params)
        for name in names:
            arr = params.arrays[name]
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + step
                lp = forward_adaptive(x, mask, params, surrogate=True).loss
                arr[idx] = orig - step
                lm = forward_adaptive(x, mask, params, surrogate=True).loss
                arr[idx] = orig
                num[idx] = (lp - lm) / (2 * step)
            worst = max(worst, float(_rel_err(grads[name], num, floor).max()))
    return worst


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, router_state: dict | None = None,
                    extra: dict | None = None) -> None:
    header = {
        "format": "ITKM",
        "version": CHECKPOINT_VERSION,
        "shapes": {k: list(v) for k, v in PARAM_SHAPES.items()},
        "fsq_levels": list(params.fsq.levels),
        "router": router_state,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = params.flat().astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<BI", CHECKPOINT_VERSION, len(blob)) + blob + body)


def load_checkpoint(path):
    """Returns (params, header dict)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<BI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[9:9 + hlen].decode("utf-8"))
    if header.get("shapes") != {k: list(v) for k, v in PARAM_SHAPES.items()}:
        raise ValidationError(f"{path}: parameter shapes do not match this model")
    vec = np.frombuffer(data[9 + hlen:], dtype="<f8").astype(np.float64)
    return ModelParams.from_flat(vec, header["fsq_levels"]), header


# -- token-level entry points ----------------------------------------------------

def encode_tokens(x, mask, params: ModelParams, latents: np.ndarray | None = None) -> np.ndarray:
    """FSQ digits (B, 16, dim) of the compressed latents; rows at dropped positions are zero."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, SIGNAL_LENGTH)
    m = _as_mask(mask, len(x))
    h = encode(x, params) if latents is None else latents
    hp, _ = compress(h, m, params)
    digits = quantize_digits(hp, params.fsq)
    digits[~m] = 0
    return digits


def decode_tokens(digits, mask, params: ModelParams) -> np.ndarray:
    """Reconstruct (B, 64) signals from kept-token digits and masks."""
    digits = np.asarray(digits, dtype=np.int64)
    m = _as_mask(mask, digits.shape[0])
    q = dequantize_digits(digits, params.fsq)
    mf = m[:, :, None].astype(np.float64)
    hq = mf * q + (1.0 - mf) * params["fill"]
    hh, _ = decompress(hq, m, params)
    return decode(hh, params)
