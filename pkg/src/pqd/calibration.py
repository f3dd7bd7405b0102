"""Time-aware calibration: normally distributed time steps plus QDrop-style fitting.

Calibration states are intermediate reverse-process states of the
full-precision model, recorded at time steps drawn as
``clamp(floor(Normal(mu, sigma) * T), 0, T - 1)``. Activation ranges are
then fitted layer by layer while predecessor layers run quantized, each
bypassed at random with probability ``drop_prob`` per sample.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np

from .denoiser import UNCONDITIONAL, Denoiser, silu
from .errors import NumericalError
from .quant import (
    FULL_PRECISION,
    QuantizedModel,
    build_quantized_model,
    l2_optimal_params,
    make_act_hook,
    minmax_params,
)
from .schedule import DDIM, SAMPLERS, NoiseSchedule, ddim_step, ddim_timesteps, ddpm_step

TIME_LAWS = ("normal", "uniform", "last")
RANGE_METHODS = ("l2", "minmax")
HIST_BINS = 25


@dataclass(frozen=True)
class CalibrationConfig:
    N: int = 5120
    mu: float = 0.4
    sigma: float = 0.4
    T: int = 250
    sampler: str = DDIM
    num_inference_steps: int = 250
    seed: int = 0
    time_law: str = "normal"
    drop_prob: float = 0.5
    grid_size: int = 100

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError("sigma must be positive")
        if not math.isfinite(self.mu):
            raise ValueError("mu must be finite")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if not 1 <= self.num_inference_steps <= self.T:
            raise ValueError("num_inference_steps must be in [1, T]")
        if self.time_law not in TIME_LAWS:
            raise ValueError(f"time_law must be one of {TIME_LAWS}")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must be in [0, 1]")
        if self.grid_size < 1:
            raise ValueError("grid_size must be >= 1")

    def replace(self, **kw) -> "CalibrationConfig":
        return CalibrationConfig(**{**asdict(self), **kw})


@dataclass(frozen=True)
class CalibrationSample:
    x: np.ndarray
    t: int
    condition: int


@dataclass(frozen=True)
class CalibrationSet:
    """Recorded states as parallel arrays; ``samples`` gives the row view."""

    x: np.ndarray
    t: np.ndarray
    condition: np.ndarray
    config: CalibrationConfig
    conditional: bool = False

    def __post_init__(self):
        if not (len(self.x) == len(self.t) == len(self.condition)):
            raise ValueError("calibration arrays differ in length")
        for a in (self.x, self.t, self.condition):
            a.setflags(write=False)

    def __len__(self):
        return len(self.t)

    @property
    def samples(self) -> list[CalibrationSample]:
        return [CalibrationSample(self.x[i], int(self.t[i]), int(self.condition[i]))
                for i in range(len(self))]

    def histogram(self, bins: int = HIST_BINS) -> np.ndarray:
        T = self.config.T
        edges = np.linspace(0, T, bins + 1)
        return np.histogram(self.t, bins=edges)[0]


def timestep_from_draw(n, T: int):
    """Scale a normalized draw to steps, round down, clamp into [0, T - 1]."""
    return np.clip(np.floor(np.asarray(n) * T), 0, T - 1).astype(np.int64)


def sample_timestep(rng: np.random.Generator, mu: float = 0.4, sigma: float = 0.4, T: int = 250) -> int:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if T < 1:
        raise ValueError("T must be >= 1")
    return int(timestep_from_draw(rng.normal(mu, sigma), T))


def timestep_probabilities(mu: float, sigma: float, T: int, cdf) -> np.ndarray:
    """P(t = k) for k in [0, T) under the clamped, floored law, given a normal CDF."""
    edges = np.arange(1, T) / T
    c = np.array([cdf((e - mu) / sigma) for e in edges])
    return np.diff(np.concatenate([[0.0], c, [1.0]]))


def _draw_t(rng, cfg: CalibrationConfig) -> int:
    if cfg.time_law == "normal":
        return sample_timestep(rng, cfg.mu, cfg.sigma, cfg.T)
    if cfg.time_law == "uniform":
        return int(rng.integers(0, cfg.T))
    return cfg.T - 1


def index_rng(seed: int, i: int) -> np.random.Generator:
    """Independent stream for calibration index ``i``."""
    return np.random.default_rng([seed, i])


def build_calibration_set(model, sched: NoiseSchedule, cfg: CalibrationConfig,
                          conditions=None) -> CalibrationSet:
    """Roll the full-precision model from fresh noise down to each drawn step.

    Every index ``i`` owns the generator ``index_rng(cfg.seed, i)``, which
    draws ``t_i``, then ``x_T``, then any DDPM noise, so the result does
    not depend on evaluation order. Rollouts are batched: all rows follow
    the shared inference schedule and leave it with a final DDIM jump to
    their own ``t_i``. With ``conditions`` each index is rolled out under
    ``conditions[i % len(conditions)]`` and recorded twice, once with that
    class and once as UNCONDITIONAL.
    """
    if sched.num_steps != cfg.T:
        raise ValueError(f"schedule has {sched.num_steps} steps but config says T={cfg.T}")
    if conditions is not None:
        conditions = [int(c) for c in conditions]
        if not conditions:
            raise ValueError("conditions must be nonempty when given")
        if getattr(model, "num_classes", 0) < 1:
            raise ValueError("conditional calibration needs a class-conditional model")
    D = model.input_dim
    N = cfg.N
    rngs = [index_rng(cfg.seed, i) for i in range(N)]
    t_target = np.array([_draw_t(g, cfg) for g in rngs])
    x = np.stack([g.standard_normal(D) for g in rngs])
    cond = (np.array([conditions[i % len(conditions)] for i in range(N)])
            if conditions is not None else np.full(N, UNCONDITIONAL))

    if cfg.sampler == DDIM:
        steps = ddim_timesteps(cfg.T, cfg.num_inference_steps)
    else:
        if cfg.num_inference_steps != cfg.T:
            raise ValueError("the DDPM sampler visits every step; num_inference_steps must equal T")
        steps = np.arange(cfg.T - 1, -1, -1)

    recorded = np.empty((N, D))
    active = np.arange(N)
    t = int(steps[0])
    done = t_target[active] == t
    recorded[active[done]] = x[done]
    active, x = active[~done], x[~done]

    for nxt in list(steps[1:]) + [None]:
        if not len(active):
            break
        rows = active
        predict = _row_checked(model, cond[rows] if conditions is not None else None, rows)
        target = t_target[rows] if nxt is None else np.maximum(int(nxt), t_target[rows])
        if cfg.sampler == DDIM:
            x = ddim_step(predict, x, t, target, sched)
        else:
            x = ddpm_step(predict, x, t, sched, [rngs[i] for i in rows])
        if nxt is None:
            t = -1
        else:
            t = int(nxt)
        done = target == t_target[rows]
        recorded[rows[done]] = x[done]
        active, x = rows[~done], x[~done]

    recorded = recorded.astype(np.float32).astype(np.float64)
    if conditions is None:
        return CalibrationSet(recorded, t_target, cond, cfg, False)
    M = 2 * N
    xs = np.repeat(recorded, 2, axis=0)
    ts = np.repeat(t_target, 2)
    cs = np.empty(M, dtype=np.int64)
    cs[0::2] = cond
    cs[1::2] = UNCONDITIONAL
    return CalibrationSet(xs, ts, cs, cfg, True)


def _row_checked(model, cond, rows):
    def predict(x, t):
        eps = model(x, t, cond)
        bad = ~np.all(np.isfinite(eps), axis=1)
        if np.any(bad):
            i = int(rows[np.argmax(bad)])
            raise NumericalError(f"calibration sample {i}: non-finite noise prediction at step {t}")
        return eps
    return predict


def _weights_of(model):
    if isinstance(model, QuantizedModel):
        return model.base, model.weights
    return model, model.weights


def calibrate_activations(model, calib: CalibrationSet, act_bits: int = 8, drop_prob: float = 0.5,
                          grid_size: int = 100, rng: np.random.Generator | None = None,
                          range_method: str = "l2") -> tuple:
    """Fit one per-tensor activation quantizer per layer input, in forward order.

    ``model`` is a Denoiser or a weight-quantized QuantizedModel; its
    weights are used as they will be deployed. For layer ``l`` every
    calibration row is pushed through layers ``< l`` with their already
    fitted activation quantizers, each bypassed independently per row with
    probability ``drop_prob`` (fresh draws for every ``l``). The collected
    layer-``l`` inputs are fitted with the L2 search (or plain min-max).
    """
    if act_bits == FULL_PRECISION:
        raise ValueError("A32 has no activation quantizers to calibrate")
    if len(calib) == 0:
        raise ValueError("empty calibration set")
    if range_method not in RANGE_METHODS:
        raise ValueError(f"range_method must be one of {RANGE_METHODS}")
    if not 0.0 <= drop_prob <= 1.0:
        raise ValueError("drop_prob must be in [0, 1]")
    if rng is None:
        rng = np.random.default_rng(0)
    base, weights = _weights_of(model)
    h0 = base.embed_inputs(calib.x, calib.t, calib.condition if calib.conditional else None)
    L = base.num_layers
    fitted: list = [None] * L
    for l in range(L):
        mask = rng.random((len(calib), L)) < drop_prob
        hook = make_act_hook(fitted, mask)
        h = h0
        for j in range(l):
            h = hook(j, h)
            h = silu(h @ weights[j] + base.biases[j])
        if range_method == "l2":
            fitted[l] = l2_optimal_params([h], act_bits, False, grid_size)
        else:
            fitted[l] = minmax_params(h, act_bits, False)
    return tuple(fitted)


@dataclass(frozen=True)
class Strategy:
    time_law: str
    weight_strategy: str
    range_method: str
    qdrop: bool


STRATEGIES = {
    "pqd-normal": Strategy("normal", "l2", "l2", True),
    "uniform-t": Strategy("uniform", "l2", "l2", True),
    "last-step-only": Strategy("last", "l2", "l2", True),
    "minmax-naive": Strategy("uniform", "minmax", "minmax", False),
}


def strategy_config(cfg: CalibrationConfig, strategy: str) -> CalibrationConfig:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {sorted(STRATEGIES)}")
    return cfg.replace(time_law=STRATEGIES[strategy].time_law)


@contextmanager
def stage(name: str):
    """Re-raise failures prefixed with the pipeline stage."""
    try:
        yield
    except (ValueError, NumericalError) as e:
        try:
            err = type(e)(f"[{name}] {e}")
        except TypeError:
            err = RuntimeError(f"[{name}] {e}")
        raise err from e


def pqd_quantize(model: Denoiser, sched: NoiseSchedule, cfg: CalibrationConfig | None = None,
                 weight_bits: int = 8, act_bits: int = 8, conditions=None,
                 strategy: str = "pqd-normal", calib: CalibrationSet | None = None,
                 manifest: dict | None = None) -> QuantizedModel:
    """Calibration set -> weight quantization -> activation calibration.

    ``strategy`` swaps the time law and range methods for the baselines.
    A prebuilt ``calib`` skips the first stage. When ``manifest`` is given
    it is filled with the seeds, config and calibration statistics.
    """
    cfg = cfg or CalibrationConfig(T=sched.num_steps, num_inference_steps=sched.num_steps)
    plan = STRATEGIES.get(strategy)
    if plan is None:
        raise ValueError(f"unknown strategy {strategy!r}")
    cfg = strategy_config(cfg, strategy)
    if act_bits != FULL_PRECISION and calib is None:
        with stage("calibration-set"):
            calib = build_calibration_set(model, sched, cfg, conditions)
    with stage("weight-quantization"):
        wq = build_quantized_model(model, weight_bits, FULL_PRECISION, plan.weight_strategy,
                                   grid_size=cfg.grid_size)
    act_params = None
    if act_bits != FULL_PRECISION:
        with stage("activation-calibration"):
            act_params = calibrate_activations(
                wq, calib, act_bits, cfg.drop_prob if plan.qdrop else 1.0, cfg.grid_size,
                np.random.default_rng([cfg.seed, 2]), plan.range_method)
    qmodel = QuantizedModel(model, wq.weight_params, act_params or (), weight_bits, act_bits)
    if manifest is not None:
        manifest.update(calibration_manifest(qmodel, cfg, strategy, calib))
    return qmodel


def calibration_manifest(qmodel: QuantizedModel, cfg: CalibrationConfig, strategy: str,
                         calib: CalibrationSet | None) -> dict:
    out = {
        "strategy": strategy,
        "bit_config": list(qmodel.bit_config),
        "calibration": asdict(cfg),
        "activation_scales": [p.scale for p in qmodel.act_params],
        "activation_zero_points": [p.zero_point for p in qmodel.act_params],
        "weight_scale_means": [float(np.mean([p.scale for p in ps])) for ps in qmodel.weight_params],
    }
    if calib is not None:
        out["calibration_size"] = len(calib)
        out["timestep_histogram"] = calib.histogram().tolist()
        out["timestep_mean"] = float(np.mean(calib.t))
    return out
