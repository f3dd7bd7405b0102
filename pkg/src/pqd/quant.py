"""Uniform affine fake quantization and the fake-quantized denoiser.

The quantize-dequantize map is

    x_sim = s * (clamp(round(x / s) + z, q_min, q_max) - z)

with rounding half away from zero. Rounding is what makes the bitwidth
meaningful; without it the map is only a clamp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .denoiser import Denoiser, run_layers

FULL_PRECISION = 32
WEIGHT_STRATEGIES = ("minmax", "l2")


def round_half_away(v):
    a = np.abs(v)
    f = np.floor(a)
    return np.copysign(f + (a - f >= 0.5), v)


def _qrange(bits, signed):
    if signed:
        return -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return 0, (1 << bits) - 1


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int
    signed: bool = False

    def __post_init__(self):
        if isinstance(self.bits, bool) or not 2 <= self.bits <= 16:
            raise ValueError(f"bitwidth must be in [2, 16], got {self.bits}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not self.q_min <= self.zero_point <= self.q_max:
            raise ValueError(f"zero point {self.zero_point} outside [{self.q_min}, {self.q_max}]")

    @property
    def q_min(self) -> int:
        return _qrange(self.bits, self.signed)[0]

    @property
    def q_max(self) -> int:
        return _qrange(self.bits, self.signed)[1]

    @property
    def bounds(self) -> tuple[float, float]:
        """Smallest and largest representable values."""
        return self.scale * (self.q_min - self.zero_point), self.scale * (self.q_max - self.zero_point)


def fake_quant(x, scale, zero_point, q_min, q_max):
    """Vectorized quantize-dequantize; arguments broadcast against ``x``."""
    q = np.clip(round_half_away(x / scale) + zero_point, q_min, q_max)
    return scale * (q - zero_point)


def quant_dequant(x, qp: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("quant_dequant input contains non-finite values")
    return fake_quant(x, qp.scale, qp.zero_point, qp.q_min, qp.q_max)


def _affine_params(lo, hi, bits, signed) -> QuantParams:
    # lo <= 0 <= hi and lo < hi.
    q_min, q_max = _qrange(bits, signed)
    s = (hi - lo) / (q_max - q_min)
    z = int(q_min - round_half_away(lo / s))
    return QuantParams(s, min(max(z, q_min), q_max), bits, signed)


def _symmetric_params(m, bits, signed) -> QuantParams:
    # Grid centred on zero; signed ranges use z = 0.
    q_min, q_max = _qrange(bits, signed)
    z = 0 if signed else (q_min + q_max + 1) // 2
    return QuantParams(m / (q_max - z), z, bits, signed)


def _degenerate_params(c, bits, signed) -> QuantParams:
    q_min, q_max = _qrange(bits, signed)
    z = int(((q_min + q_max + 1) // 2) - round_half_away(c))
    return QuantParams(1.0, min(max(z, q_min), q_max), bits, signed)


def minmax_params(x, bits: int, signed: bool = False) -> QuantParams:
    """Map the observed range (extended to contain zero) onto the full grid.

    A constant tensor gets scale 1 and a zero point that centres the
    constant on the grid.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot calibrate on an empty tensor")
    if not np.all(np.isfinite(x)):
        raise ValueError("calibration tensor contains non-finite values")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return _degenerate_params(lo, bits, signed)
    return _affine_params(min(lo, 0.0), max(hi, 0.0), bits, signed)


def l2_error(x, qp: QuantParams) -> float:
    d = x - fake_quant(x, qp.scale, qp.zero_point, qp.q_min, qp.q_max)
    return float(np.dot(d, d))


EXACT_LIMIT = 1 << 15
HIST_BINS = 1 << 14
SCALE_OVERSHOOT = 2
FULL_ZERO_SWEEP = 16
REFINE_TOP = 4


def _compress(x):
    """(values, counts) standing in for ``x`` when scoring candidates."""
    if x.size <= EXACT_LIMIT:
        return x, None
    counts, edges = np.histogram(x, bins=HIST_BINS)
    keep = counts > 0
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers[keep], counts[keep].astype(np.float64)


def _weighted_errors(v, w, scales, zps, q_min, q_max):
    # scales: (S, 1, 1); zps: (S, Z, 1) or (1, Z, 1) -> errors (S, Z)
    S, Z = scales.shape[0], zps.shape[1]
    out = np.empty((S, Z))
    step = max(1, (1 << 22) // (Z * v.size))
    for a in range(0, S, step):
        sc = scales[a:a + step]
        zc = zps if zps.shape[0] == 1 else zps[a:a + step]
        d = v - fake_quant(v, sc, zc, q_min, q_max)
        d = d * d
        out[a:a + step] = d.sum(-1) if w is None else d @ w
    return out


def _zero_candidates(scales, lo, hi, q_min, q_max):
    if q_max - q_min + 1 <= FULL_ZERO_SWEEP:
        return np.arange(q_min, q_max + 1)[None, :, None]
    s = scales[:, 0, 0]
    z_lo = q_min - round_half_away(lo / s)
    z_mid = round_half_away(0.5 * (q_min + q_max) - 0.5 * (lo + hi) / s)
    cols = [z_lo + k for k in (-1, 0, 1)] + [z_mid + k for k in (-1, 0, 1)]
    return np.clip(np.stack(cols, axis=1), q_min, q_max)[:, :, None]


def _refit(x, qp):
    """Least-squares scale for fixed integer codes, repeated while it helps."""
    best, err = qp, l2_error(x, qp)
    for _ in range(10):
        k = np.clip(round_half_away(x / best.scale) + best.zero_point, best.q_min, best.q_max) - best.zero_point
        kk = float(k @ k)
        if kk == 0.0:
            break
        s = float(x @ k) / kk
        if not (s > 0 and math.isfinite(s)):
            break
        cand = QuantParams(s, best.zero_point, best.bits, best.signed)
        e = l2_error(x, cand)
        if not e < err:
            break
        best, err = cand, e
    return best, err


def l2_optimal_params(samples: Sequence, bits: int, signed: bool = False,
                      grid_size: int = 100, symmetric: bool = False) -> QuantParams:
    """Scale/zero-point search minimizing the summed squared quantization error.

    Asymmetric mode scans scales ``rho * s_mm`` for ``rho = k / grid_size``
    up to ``SCALE_OVERSHOOT`` (``s_mm`` is the min-max scale), pairs each
    with a sweep of zero points, polishes the best few by a least-squares
    scale refit and finally compares against ``minmax_params`` on the exact
    data, so the result is never worse than min-max. Large inputs are
    scored on a fine histogram.

    Symmetric mode keeps the zero point centred and only shrinks the
    max-abs range (``rho <= 1``); ``grid_size=1`` is plain max-abs.
    Ties go to the smallest ratio.
    """
    if len(samples) == 0:
        raise ValueError("need at least one calibration tensor")
    if grid_size < 1:
        raise ValueError("grid_size must be >= 1")
    x = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in samples])
    if x.size == 0:
        raise ValueError("calibration tensors are empty")
    if not np.all(np.isfinite(x)):
        raise ValueError("calibration tensors contain non-finite values")
    lo, hi = min(float(x.min()), 0.0), max(float(x.max()), 0.0)
    if lo == hi:
        return minmax_params(x, bits, signed)
    q_min, q_max = _qrange(bits, signed)
    v, w = _compress(x)
    ratios = np.arange(1, grid_size + 1) / grid_size

    if symmetric:
        cands = [_symmetric_params(r * max(-lo, hi), bits, signed) for r in ratios]
        scales = np.array([c.scale for c in cands])[:, None, None]
        zps = np.array([[c.zero_point] for c in cands])[:, :, None]
        errs = _weighted_errors(v, w, scales, zps, q_min, q_max)[:, 0]
        return cands[int(np.argmin(errs))]

    s_mm = (hi - lo) / (q_max - q_min)
    ratios = np.arange(1, SCALE_OVERSHOOT * grid_size + 1) / grid_size
    scales = (ratios * s_mm)[:, None, None]
    zps = _zero_candidates(scales, lo, hi, q_min, q_max)
    errs = _weighted_errors(v, w, scales, zps, q_min, q_max)
    zgrid = np.broadcast_to(zps[..., 0], errs.shape)
    order = np.argsort(errs, axis=None, kind="stable")[:REFINE_TOP]

    best = minmax_params(x, bits, signed)
    best_err = l2_error(x, best)
    for flat in order:
        i, j = np.unravel_index(flat, errs.shape)
        qp = QuantParams(float(scales[i, 0, 0]), int(zgrid[i, j]), bits, signed)
        qp, err = _refit(x, qp)
        if err < best_err:
            best, best_err = qp, err
    return best


def parse_bits(tag: str) -> tuple[int, int]:
    """``"W8A8"`` -> ``(8, 8)``."""
    t = tag.strip().upper()
    if not t.startswith("W") or "A" not in t:
        raise ValueError(f"bit tag must look like W8A8, got {tag!r}")
    w, a = t[1:].split("A", 1)
    wb, ab = int(w), int(a)
    for b in (wb, ab):
        if b != FULL_PRECISION and not 2 <= b <= 16:
            raise ValueError(f"bitwidth {b} must be 32 or in [2, 16]")
    return wb, ab


def format_bits(weight_bits: int, act_bits: int) -> str:
    return f"W{weight_bits}A{act_bits}"


@dataclass(frozen=True)
class QuantizedModel:
    """A denoiser with fake-quantized weights and layer-input activations.

    ``weight_params[l]`` holds one QuantParams per output channel of layer l
    (empty at 32 bits); ``act_params[l]`` quantizes the input of layer l
    (empty at 32 bits).
    """

    base: Denoiser
    weight_params: tuple
    act_params: tuple
    weight_bits: int
    act_bits: int
    weights: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = self.base.num_layers
        if self.weight_bits == FULL_PRECISION:
            if self.weight_params:
                raise ValueError("W32 takes no weight params")
            weights = self.base.weights
        else:
            if len(self.weight_params) != n:
                raise ValueError(f"need weight params for all {n} layers")
            weights = tuple(_quantize_columns(w, ps) for w, ps in zip(self.base.weights, self.weight_params))
        if self.act_bits == FULL_PRECISION:
            if self.act_params:
                raise ValueError("A32 takes no activation params")
        elif len(self.act_params) != n:
            raise ValueError(f"need activation params for all {n} layers")
        object.__setattr__(self, "weights", weights)

    @property
    def bit_config(self) -> tuple[int, int]:
        return self.weight_bits, self.act_bits

    @property
    def num_layers(self) -> int:
        return self.base.num_layers

    def __call__(self, x, t, condition=None):
        return quantized_forward(self, x, t, condition)


def _channel_arrays(params):
    return (np.array([p.scale for p in params]), np.array([p.zero_point for p in params]),
            params[0].q_min, params[0].q_max)


def _quantize_columns(w, params):
    if len(params) != w.shape[1]:
        raise ValueError(f"need {w.shape[1]} channel params, got {len(params)}")
    s, z, lo, hi = _channel_arrays(params)
    out = fake_quant(w, s[None, :], z[None, :], lo, hi)
    out.setflags(write=False)
    return out


def weight_channel_params(w, bits: int, strategy: str = "l2", grid_size: int = 100) -> tuple:
    """Per-output-channel symmetric params for a ``(fan_in, fan_out)`` matrix."""
    if strategy not in WEIGHT_STRATEGIES:
        raise ValueError(f"unknown weight strategy {strategy!r}")
    g = grid_size if strategy == "l2" else 1
    return tuple(l2_optimal_params([w[:, j]], bits, True, g, symmetric=True) for j in range(w.shape[1]))


def build_quantized_model(model: Denoiser, weight_bits: int = 8, act_bits: int = 8,
                          weight_strategy: str = "l2", act_params=None,
                          grid_size: int = 100) -> QuantizedModel:
    """Quantize every affine layer's weights; attach calibrated activation params."""
    if act_bits != FULL_PRECISION and act_params is None:
        raise ValueError(f"A{act_bits} needs calibrated activation params")
    if act_bits == FULL_PRECISION:
        act_params = ()
    wparams = ()
    if weight_bits != FULL_PRECISION:
        wparams = tuple(weight_channel_params(w, weight_bits, weight_strategy, grid_size)
                        for w in model.weights)
    return QuantizedModel(model, wparams, tuple(act_params), weight_bits, act_bits)


def make_act_hook(act_params, drop_mask=None):
    """Layer-input hook; ``None`` entries leave that layer unquantized.

    ``drop_mask`` is ``(layers,)`` or ``(batch, layers)``; True bypasses
    quantization for that layer (and row).
    """
    if not act_params:
        return None

    def hook(l, h):
        qp = act_params[l]
        if qp is None:
            return h
        q = fake_quant(h, qp.scale, qp.zero_point, qp.q_min, qp.q_max)
        if drop_mask is None:
            return q
        m = drop_mask[..., l]
        if np.ndim(m) == 0:
            return h if m else q
        return np.where(m[:, None], h, q)

    return hook


def quantized_forward(qmodel: QuantizedModel, x_t, t, condition=None, act_drop_mask=None):
    """Noise prediction through the fake-quantized network."""
    if act_drop_mask is not None:
        act_drop_mask = np.asarray(act_drop_mask, dtype=bool)
        if act_drop_mask.shape[-1] != qmodel.num_layers or act_drop_mask.ndim > 2:
            raise ValueError(f"drop mask must have {qmodel.num_layers} layer entries")
    h = qmodel.base.embed_inputs(x_t, t, condition)
    return run_layers(qmodel.weights, qmodel.base.biases, h,
                      make_act_hook(qmodel.act_params, act_drop_mask))
