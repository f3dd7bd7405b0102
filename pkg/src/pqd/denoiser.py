"""Time-conditioned noise-prediction MLP, its trainer and activation probes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError
from .schedule import NoiseSchedule, forward_diffuse

UNCONDITIONAL = -1

HIDDEN_WIDTH = 128
NUM_HIDDEN = 3
TIME_EMBED_DIM = 32
CLASS_EMBED_DIM = 16


def silu(z):
    return z / (1.0 + np.exp(-z))


def _silu_grad(z):
    sig = 1.0 / (1.0 + np.exp(-z))
    return sig * (1.0 + z * (1.0 - sig))


def time_embedding(t, dim: int = TIME_EMBED_DIM, T: int = 250) -> np.ndarray:
    """Sinusoidal embedding with interleaved (sin, cos) pairs.

    ``t`` may be a scalar (returns shape ``(dim,)``) or an integer array
    (returns ``(len(t), dim)``).
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= T):
        raise ValueError(f"t outside [0, {T})")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t_arr.astype(np.float64)[..., None] * freqs
    emb = np.empty(angles.shape[:-1] + (dim,))
    emb[..., 0::2] = np.sin(angles)
    emb[..., 1::2] = np.cos(angles)
    return emb


@dataclass(frozen=True)
class Denoiser:
    """MLP over ``[x, time embedding, class embedding]``.

    ``weights[l]`` has shape ``(fan_in, fan_out)``; every layer but the last
    is followed by SiLU. ``class_table`` is ``(num_classes, CLASS_EMBED_DIM)``
    or empty for an unconditional-only model; UNCONDITIONAL maps to zeros.
    """

    weights: tuple
    biases: tuple
    class_table: np.ndarray
    input_dim: int
    time_embed_dim: int = TIME_EMBED_DIM
    num_steps: int = 250

    def __post_init__(self):
        widths = [w.shape for w in self.weights]
        if widths[0][0] != self.input_dim + self.time_embed_dim + self.class_embed_dim:
            raise ValueError(f"first layer fan-in {widths[0][0]} does not match input widths")
        for (a, b), (c, _) in zip(widths, widths[1:]):
            if b != c:
                raise ValueError(f"layer widths do not chain: {b} -> {c}")
        if widths[-1][1] != self.input_dim:
            raise ValueError("output width must equal input_dim")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shape mismatch")
        for arr in self.parameters():
            if not np.all(np.isfinite(arr)):
                raise NumericalError("non-finite model parameter")
            arr.setflags(write=False)

    @property
    def num_classes(self) -> int:
        return self.class_table.shape[0]

    @property
    def class_embed_dim(self) -> int:
        return self.class_table.shape[1] if self.class_table.size else 0

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in checkpoint declaration order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        if self.class_table.size:
            out.append(self.class_table)
        return out

    def replace_parameters(self, params: Sequence[np.ndarray]) -> "Denoiser":
        n = self.num_layers
        return Denoiser(
            weights=tuple(np.array(params[2 * i], dtype=np.float64) for i in range(n)),
            biases=tuple(np.array(params[2 * i + 1], dtype=np.float64) for i in range(n)),
            class_table=np.array(params[2 * n], dtype=np.float64) if self.class_table.size
            else self.class_table,
            input_dim=self.input_dim,
            time_embed_dim=self.time_embed_dim,
            num_steps=self.num_steps,
        )

    def embed_inputs(self, x, t, condition=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.input_dim:
            raise ValueError(f"expected width {self.input_dim}, got {x.shape[1]}")
        temb = time_embedding(t, self.time_embed_dim, self.num_steps)
        temb = np.broadcast_to(temb, (x.shape[0], self.time_embed_dim))
        parts = [x, temb]
        if self.class_embed_dim:
            parts.append(class_embedding(self.class_table, condition, x.shape[0]))
        elif condition is not None and np.any(np.asarray(condition) != UNCONDITIONAL):
            raise ValueError("model has no classes; only UNCONDITIONAL is accepted")
        return np.concatenate(parts, axis=1)

    def __call__(self, x, t, condition=None) -> np.ndarray:
        return denoiser_forward(self, x, t, condition)


def class_embedding(table, condition, batch) -> np.ndarray:
    if condition is None:
        return np.zeros((batch, table.shape[1]))
    cond = np.broadcast_to(np.asarray(condition, dtype=np.int64), (batch,))
    if np.any(cond >= table.shape[0]) or np.any(cond < UNCONDITIONAL):
        raise ValueError(f"unknown class id in {np.unique(cond).tolist()}")
    emb = table[np.maximum(cond, 0)]
    return np.where((cond == UNCONDITIONAL)[:, None], 0.0, emb)


def run_layers(weights, biases, h, act_hook: Callable | None = None, cache: list | None = None):
    """Shared MLP body. ``act_hook(l, h)`` may rewrite the input of layer l."""
    last = len(weights) - 1
    for l, (w, b) in enumerate(zip(weights, biases)):
        if act_hook is not None:
            h = act_hook(l, h)
        z = h @ w + b
        if cache is not None:
            cache.append((h, z))
        h = z if l == last else silu(z)
    return h


def denoiser_forward(model: Denoiser, x_t, t, condition=None) -> np.ndarray:
    """Predict the noise in ``x_t`` at step(s) ``t``."""
    h = model.embed_inputs(x_t, t, condition)
    return run_layers(model.weights, model.biases, h)


def init_denoiser(input_dim: int = 2, num_classes: int = 0, seed: int = 0,
                  num_steps: int = 250, width: int = HIDDEN_WIDTH) -> Denoiser:
    """Fan-in scaled Gaussian init, rounded to float32 precision."""
    rng = np.random.default_rng(seed)
    cdim = CLASS_EMBED_DIM if num_classes else 0
    dims = [input_dim + TIME_EMBED_DIM + cdim] + [width] * NUM_HIDDEN + [input_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        weights.append(_f32(rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)))
        biases.append(np.zeros(fan_out))
    table = _f32(rng.standard_normal((num_classes, cdim))) if num_classes else np.zeros((0, 0))
    return Denoiser(tuple(weights), tuple(biases), table, input_dim, TIME_EMBED_DIM, num_steps)


def zero_denoiser(input_dim: int = 2, num_classes: int = 0, num_steps: int = 250) -> Denoiser:
    m = init_denoiser(input_dim, num_classes, 0, num_steps)
    return m.replace_parameters([np.zeros_like(p) for p in m.parameters()])


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 256
    num_iterations: int = 8000
    seed: int = 0
    uncond_prob: float = 0.1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.num_iterations < 0:
            raise ValueError("num_iterations must be non-negative")
        if not 0.0 <= self.uncond_prob <= 1.0:
            raise ValueError("uncond_prob must be in [0, 1]")


def loss_and_grads(model: Denoiser, x_t, t, condition, eps):
    """Mean squared noise-prediction error and its parameter gradients."""
    h0 = model.embed_inputs(x_t, t, condition)
    cache: list = []
    pred = run_layers(model.weights, model.biases, h0, cache=cache)
    diff = pred - eps
    loss = float(np.mean(diff * diff))
    g = 2.0 * diff / diff.size
    grads_w = [None] * model.num_layers
    grads_b = [None] * model.num_layers
    last = model.num_layers - 1
    for l in range(last, -1, -1):
        h, z = cache[l]
        if l != last:
            g = g * _silu_grad(z)
        grads_w[l] = h.T @ g
        grads_b[l] = g.sum(axis=0)
        g = g @ model.weights[l].T
    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads += [gw, gb]
    if model.class_embed_dim:
        # g is now d loss / d h0; the class block sits after x and time.
        start = model.input_dim + model.time_embed_dim
        g_emb = g[:, start:]
        cond = np.broadcast_to(np.asarray(condition if condition is not None else UNCONDITIONAL),
                               (g.shape[0],))
        gt = np.zeros_like(model.class_table)
        mask = cond != UNCONDITIONAL
        np.add.at(gt, cond[mask], g_emb[mask])
        grads.append(gt)
    return loss, grads


def eps_mse(model, x0, t, eps, sched: NoiseSchedule, condition=None) -> float:
    x_t = forward_diffuse(x0, t, eps, sched)
    d = model(x_t, t, condition) - eps
    return float(np.mean(d * d))


def train_denoiser(data, sched: NoiseSchedule, cfg: TrainConfig, labels=None,
                   num_classes: int = 0, init: Denoiser | None = None,
                   history: list | None = None) -> Denoiser:
    """Plain SGD on the simple noise-prediction objective.

    ``labels`` enables class conditioning; each label is replaced by
    UNCONDITIONAL with probability ``cfg.uncond_prob`` so the model also
    learns the unconditional branch. Parameters are returned rounded to
    float32 precision so checkpoints round-trip exactly.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("training data must be a nonempty (N, D) array")
    if labels is not None and num_classes < 1:
        raise ValueError("labels given but num_classes is 0")
    model = init or init_denoiser(data.shape[1], num_classes, cfg.seed, sched.num_steps)
    if cfg.num_iterations == 0:
        return model
    rng = np.random.default_rng([cfg.seed, 1])
    params = [np.array(p) for p in model.parameters()]
    T = sched.num_steps
    for it in range(cfg.num_iterations):
        idx = rng.integers(0, len(data), cfg.batch_size)
        x0 = data[idx]
        t = rng.integers(0, T, cfg.batch_size)
        eps = rng.standard_normal(x0.shape)
        cond = None
        if labels is not None:
            cond = np.asarray(labels)[idx].copy()
            cond[rng.random(cfg.batch_size) < cfg.uncond_prob] = UNCONDITIONAL
        x_t = forward_diffuse(x0, t, eps, sched)
        loss, grads = loss_and_grads(model, x_t, t, cond, eps)
        if not math.isfinite(loss):
            raise NumericalError(f"training diverged at iteration {it} (loss={loss})")
        for p, g in zip(params, grads):
            p -= cfg.learning_rate * g
        model = _unfrozen(model, params)
        if history is not None:
            history.append(loss)
    return model.replace_parameters([_f32(p) for p in params])


def _unfrozen(model, params):
    # Cheap rebuild without validation; only used inside the training loop.
    obj = object.__new__(Denoiser)
    n = model.num_layers
    object.__setattr__(obj, "weights", tuple(params[2 * i] for i in range(n)))
    object.__setattr__(obj, "biases", tuple(params[2 * i + 1] for i in range(n)))
    object.__setattr__(obj, "class_table", params[2 * n] if model.class_table.size else model.class_table)
    for name in ("input_dim", "time_embed_dim", "num_steps"):
        object.__setattr__(obj, name, getattr(model, name))
    return obj


@dataclass(frozen=True)
class ActivationSummary:
    t: int
    min: float
    max: float
    mean: float
    std: float

    @property
    def range(self) -> float:
        return self.max - self.min


def layer_outputs(model: Denoiser, x, t, condition=None) -> list[np.ndarray]:
    """Post-nonlinearity output of every layer (raw output for the last)."""
    cache: list = []
    run_layers(model.weights, model.biases, model.embed_inputs(x, t, condition), cache=cache)
    last = model.num_layers - 1
    return [z if l == last else silu(z) for l, (_, z) in enumerate(cache)]


def record_activation_stats(model: Denoiser, trajectory, layer: int | None = None,
                            condition=None) -> list[ActivationSummary]:
    """Summarize one layer's output at every recorded step of a trajectory.

    Defaults to the last hidden layer.
    """
    if layer is None:
        layer = model.num_layers - 2
    if not 0 <= layer < model.num_layers:
        raise IndexError(f"layer {layer} outside [0, {model.num_layers})")
    rows = []
    for x, t in trajectory:
        a = layer_outputs(model, x, t, condition)[layer]
        rows.append(ActivationSummary(int(t), float(a.min()), float(a.max()),
                                      float(a.mean()), float(a.std())))
    return rows
