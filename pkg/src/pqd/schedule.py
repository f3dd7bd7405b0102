"""Noise schedules, the forward process and DDPM/DDIM reverse samplers.

Time indexing: t = 0 is the cleanest noisy state, t = T - 1 the noisiest.
A model (or any denoiser) is called as ``model(x, t, condition)`` and
returns the predicted noise with the same shape as ``x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError

DDPM = "ddpm"
DDIM = "ddim"
SAMPLERS = (DDPM, DDIM)


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        for arr in (self.betas, self.alphas, self.alpha_bars):
            arr.setflags(write=False)

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def check_step(self, t, name="t"):
        if not 0 <= int(t) < self.num_steps:
            raise ValueError(f"{name}={t} outside [0, {self.num_steps})")


def make_linear_schedule(T: int = 250, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas, both endpoints included."""
    if isinstance(T, bool) or int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (math.isfinite(beta_start) and math.isfinite(beta_end)):
        raise ValueError("beta endpoints must be finite")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas = 1.0 - betas
    # Sequential product so alpha_bars[t] == alpha_bars[t-1] * alphas[t] holds bitwise.
    alpha_bars = np.empty_like(alphas)
    acc = 1.0
    for i, a in enumerate(alphas):
        acc = acc * a
        alpha_bars[i] = acc
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_diffuse(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` may also be an integer array with one entry per row.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= sched.num_steps):
        raise ValueError(f"t outside [0, {sched.num_steps})")
    abar = sched.alpha_bars[t_arr]
    if abar.ndim:
        abar = abar.reshape(-1, *([1] * (x0.ndim - 1)))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def _checked(eps, t):
    eps = np.asarray(eps, dtype=np.float64)
    if not np.all(np.isfinite(eps)):
        raise NumericalError(f"non-finite noise prediction at step {t}")
    return eps


def standard_normal(rng, shape) -> np.ndarray:
    """Draw N(0, I) noise from one generator, or row-wise from a list of them."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    rows = list(rng)
    if len(rows) != shape[0]:
        raise ValueError(f"need one generator per row: {len(rows)} vs {shape[0]}")
    return np.stack([g.standard_normal(shape[1:]) for g in rows]) if rows else np.zeros(shape)


def ddpm_step(predict_eps: Callable, x_t, t: int, sched: NoiseSchedule, rng) -> np.ndarray:
    """Ancestral step x_t -> x_{t-1} with posterior variance beta_t.

    No noise is injected at t = 0.
    """
    sched.check_step(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = _checked(predict_eps(x_t, t), t)
    beta = sched.betas[t]
    mean = (x_t - beta / math.sqrt(1.0 - sched.alpha_bars[t]) * eps) / math.sqrt(sched.alphas[t])
    if t == 0:
        return mean
    return mean + math.sqrt(beta) * standard_normal(rng, x_t.shape)


def ddim_step(predict_eps: Callable, x_t, t: int, t_prev, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM jump from step t to t_prev.

    ``t_prev = -1`` returns the predicted clean sample. ``t_prev`` may be an
    integer array giving a separate target per row.
    """
    sched.check_step(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    tp = np.asarray(t_prev)
    if np.any(tp >= t) or np.any(tp < -1):
        raise ValueError(f"t_prev={t_prev} must satisfy -1 <= t_prev < t={t}")
    eps = _checked(predict_eps(x_t, t), t)
    abar = sched.alpha_bars[t]
    x0_hat = (x_t - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)
    if tp.ndim == 0:
        if int(tp) == -1:
            return x0_hat
        abar_prev = sched.alpha_bars[int(tp)]
        return math.sqrt(abar_prev) * x0_hat + math.sqrt(1.0 - abar_prev) * eps
    abar_prev = np.where(tp < 0, 1.0, sched.alpha_bars[np.maximum(tp, 0)])[:, None]
    return np.sqrt(abar_prev) * x0_hat + np.sqrt(1.0 - abar_prev) * eps


def ddim_timesteps(T: int, num_inference_steps: int) -> np.ndarray:
    """Evenly spaced descending steps from T - 1 down to 0."""
    if not 1 <= num_inference_steps <= T:
        raise ValueError(f"num_inference_steps={num_inference_steps} must be in [1, {T}]")
    if num_inference_steps == 1:
        return np.array([T - 1])
    steps = np.floor(np.linspace(0, T - 1, num_inference_steps) + 0.5).astype(np.int64)
    return steps[::-1].copy()


def _bind(model, condition):
    return lambda x, t: model(x, t, condition)


def _schedule_steps(sched, sampler, num_inference_steps):
    T = sched.num_steps
    if sampler == DDIM:
        return ddim_timesteps(T, num_inference_steps)
    if sampler == DDPM:
        if num_inference_steps != T:
            raise ValueError("the DDPM sampler visits every step; num_inference_steps must equal T")
        return np.arange(T - 1, -1, -1)
    raise ValueError(f"unknown sampler {sampler!r}")


def sample_trajectory(
    model,
    sched: NoiseSchedule,
    sampler: str = DDIM,
    num_inference_steps: int | None = None,
    condition=None,
    rng: np.random.Generator | Sequence[np.random.Generator] | None = None,
    record_until: int | None = None,
    num_samples: int = 1,
    dim: int = 2,
) -> list[tuple[np.ndarray, int]]:
    """Run the reverse process from Gaussian noise, recording network inputs.

    Each entry is ``(x_t, t)``: the state fed to the denoiser at step ``t``.
    Entries run in descending t; the last has ``t == record_until`` when
    given, else ``t == 0``. With DDIM and a target that is not on the
    inference grid, the final move is a direct jump to ``record_until``.
    """
    T = sched.num_steps
    if num_inference_steps is None:
        num_inference_steps = T
    if record_until is not None:
        sched.check_step(record_until, "record_until")
    steps = _schedule_steps(sched, sampler, num_inference_steps)
    if rng is None:
        rng = np.random.default_rng(0)
    stop = 0 if record_until is None else int(record_until)
    predict = _bind(model, condition)

    x = standard_normal(rng, (num_samples, dim))
    # x_T is recorded as the state at the noisiest step.
    t = int(steps[0])
    if t != T - 1:
        raise AssertionError("schedules start at T - 1")
    out = [(x, t)]
    for nxt in list(steps[1:]) + [None]:
        if t == stop:
            break
        target = stop if nxt is None or nxt < stop else int(nxt)
        if sampler == DDIM:
            x = ddim_step(predict, x, t, target, sched)
        else:
            x = ddpm_step(predict, x, t, sched, rng)
        t = target
        out.append((x, t))
    return out


def generate(
    model,
    sched: NoiseSchedule,
    num_samples: int,
    dim: int,
    rng,
    sampler: str = DDIM,
    num_inference_steps: int | None = None,
    condition=None,
) -> np.ndarray:
    """Full reverse process ending in a clean sample batch."""
    traj = sample_trajectory(
        model, sched, sampler, num_inference_steps, condition, rng,
        num_samples=num_samples, dim=dim,
    )
    x, t = traj[-1]
    predict = _bind(model, condition)
    if sampler == DDIM:
        return ddim_step(predict, x, t, -1, sched)
    return ddpm_step(predict, x, t, sched, rng)
