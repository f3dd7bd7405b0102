"""Sample-quality distances and size/BOPs cost accounting."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import NumericalError
from .quant import FULL_PRECISION, QuantizedModel
from .schedule import DDIM, NoiseSchedule, forward_diffuse, generate

SCALE_BITS = 32
ZERO_POINT_BITS = 16
BIAS_BITS = 32


def _pair(A, B):
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("both sample sets must be nonempty")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    return A, B


def wasserstein_1d(a, b) -> float:
    """2-Wasserstein distance between two 1-D empirical distributions.

    Integrates the squared gap between the quantile functions over the
    merged breakpoints, so unequal sample counts are handled exactly.
    """
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if len(a) == len(b):
        d = a - b
        return math.sqrt(float(np.mean(d * d)))
    levels = np.union1d(np.arange(1, len(a) + 1) / len(a), np.arange(1, len(b) + 1) / len(b))
    widths = np.diff(np.concatenate([[0.0], levels]))
    mids = levels - widths / 2
    qa = a[np.minimum((mids * len(a)).astype(np.int64), len(a) - 1)]
    qb = b[np.minimum((mids * len(b)).astype(np.int64), len(b) - 1)]
    return math.sqrt(float(np.sum(widths * (qa - qb) ** 2)))


def random_directions(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.standard_normal((n, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _project(X, directions):
    # Elementwise sum rather than a BLAS product: each row's projection is
    # then independent of its position, so row order never changes a bit.
    return np.einsum("nd,pd->np", X, directions, optimize=False)


def sliced_wasserstein(A, B, n_projections: int = 256, rng=None, directions=None) -> float:
    """Mean over random unit directions of the projected 1-D W2 distance."""
    A, B = _pair(A, B)
    if directions is None:
        if n_projections < 1:
            raise ValueError("n_projections must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        directions = random_directions(n_projections, A.shape[1], rng)
    pa, pb = _project(A, directions), _project(B, directions)
    return float(np.mean([wasserstein_1d(pa[:, k], pb[:, k]) for k in range(len(directions))]))


def median_bandwidth(A, B) -> float:
    """Median pairwise distance over the pooled samples."""
    Z = np.concatenate(_pair(A, B))
    sq = np.sum(Z * Z, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * Z @ Z.T, 0.0)
    iu = np.triu_indices(len(Z), k=1)
    med = float(np.sqrt(np.median(d2[iu]))) if len(iu[0]) else 1.0
    return med if med > 0 else 1.0


def _kernel_sum(X, Y, bandwidth, exclude_diag=False):
    d2 = np.maximum(np.sum(X * X, 1)[:, None] + np.sum(Y * Y, 1)[None, :] - 2 * X @ Y.T, 0.0)
    K = np.exp(-d2 / (2.0 * bandwidth ** 2))
    if exclude_diag:
        np.fill_diagonal(K, 0.0)
    # Pairwise summation keeps the result independent of row order to rounding.
    return float(np.sort(K, axis=None).sum())


def mmd_rbf(A, B, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel, floored at zero."""
    A, B = _pair(A, B)
    if bandwidth is None:
        bandwidth = median_bandwidth(A, B)
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    m, n = len(A), len(B)
    if m < 2 or n < 2:
        raise ValueError("unbiased MMD needs at least two samples per set")
    kxx = _kernel_sum(A, A, bandwidth, True) / (m * (m - 1))
    kyy = _kernel_sum(B, B, bandwidth, True) / (n * (n - 1))
    kxy = _kernel_sum(A, B, bandwidth) / (m * n)
    return max(kxx + kyy - 2.0 * kxy, 0.0)


def _as_quantized(model) -> QuantizedModel:
    if isinstance(model, QuantizedModel):
        return model
    return QuantizedModel(model, (), (), FULL_PRECISION, FULL_PRECISION)


def model_size_bits(qmodel) -> int:
    """Weights at their bitwidth, biases and class table at 32 bits, plus
    per-channel scale/zero-point storage for quantized layers."""
    q = _as_quantized(qmodel)
    total = 0
    for w, b in zip(q.base.weights, q.base.biases):
        total += w.size * q.weight_bits + b.size * BIAS_BITS
        if q.weight_bits != FULL_PRECISION:
            total += w.shape[1] * (SCALE_BITS + ZERO_POINT_BITS)
    total += q.base.class_table.size * FULL_PRECISION
    return int(total)


def weight_bits_term(qmodel) -> int:
    q = _as_quantized(qmodel)
    return int(sum(w.size for w in q.base.weights) * q.weight_bits)


def bops_per_step(qmodel) -> int:
    """Bit operations for one denoiser evaluation on one sample."""
    q = _as_quantized(qmodel)
    macs = sum(w.size for w in q.base.weights)
    return int(macs * q.weight_bits * q.act_bits)


@dataclass
class EvalReport:
    bit_config: tuple
    size_bits: int
    bops_per_step: int
    sliced_wasserstein: float
    mmd: float
    mmd_bandwidth: float
    num_samples: int
    seed: int
    strategy: str = ""

    def __post_init__(self):
        for name in ("sliced_wasserstein", "mmd"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bit_config"] = list(self.bit_config)
        return d


def evaluate(qmodel, sched: NoiseSchedule, reference, n_samples: int = 2000, seed: int = 0,
             n_projections: int = 256, num_inference_steps: int | None = None,
             strategy: str = "", bandwidth: float | None = None) -> EvalReport:
    """Generate with DDIM under ``seed`` and score against ``reference``."""
    reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    if reference.shape[0] == 0:
        raise ValueError("reference set is empty")
    q = _as_quantized(qmodel)
    rng = np.random.default_rng([seed, 0])
    samples = generate(q, sched, n_samples, reference.shape[1], rng, DDIM, num_inference_steps)
    if not np.all(np.isfinite(samples)):
        raise NumericalError("generated samples contain non-finite values")
    dirs = random_directions(n_projections, reference.shape[1], np.random.default_rng([seed, 1]))
    sw = sliced_wasserstein(samples, reference, directions=dirs)
    bw = bandwidth if bandwidth is not None else median_bandwidth(samples, reference)
    return EvalReport(
        bit_config=q.bit_config,
        size_bits=model_size_bits(q),
        bops_per_step=bops_per_step(q),
        sliced_wasserstein=sw,
        mmd=mmd_rbf(samples, reference, bw),
        mmd_bandwidth=bw,
        num_samples=n_samples,
        seed=seed,
        strategy=strategy,
    )


def eps_prediction_gap(qmodel, fp_model, x0, sched: NoiseSchedule, rng: np.random.Generator,
                       condition=None) -> float:
    """Mean squared gap between quantized and full-precision noise
    predictions on ``x0`` diffused to uniformly random steps."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = rng.integers(0, sched.num_steps, len(x0))
    x_t = forward_diffuse(x0, t, rng.standard_normal(x0.shape), sched)
    d = qmodel(x_t, t, condition) - fp_model(x_t, t, condition)
    return float(np.mean(d * d))
