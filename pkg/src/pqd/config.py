"""Experiment configuration: one JSON document with every default embedded."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass

from .calibration import STRATEGIES, CalibrationConfig
from .denoiser import TrainConfig
from .errors import ConfigError
from .quant import parse_bits
from .schedule import SAMPLERS, make_linear_schedule

DEFAULTS = {
    "schedule": {"num_steps": 250, "beta_start": 1e-4, "beta_end": 0.02},
    "data": {"num_train": 20000, "num_heldout": 4000, "seed": 1},
    "train": {"learning_rate": 0.1, "batch_size": 256, "num_iterations": 8000,
              "seed": 0, "uncond_prob": 0.1, "num_classes": 0},
    "calibration": {"N": 5120, "mu": 0.4, "sigma": 0.4, "sampler": "ddim",
                    "num_inference_steps": 250, "seed": 0, "drop_prob": 0.5,
                    "grid_size": 100},
    "quantization": {"bit_grid": ["W32A32", "W4A32", "W8A8", "W4A8"],
                     "strategy": "pqd-normal",
                     "baselines": ["minmax-naive"], "baseline_bits": ["W8A8"]},
    "eval": {"n_samples": 2000, "n_reference": 2000, "n_projections": 256,
             "seed": 0, "num_inference_steps": 250},
}


def _int(lo=None, hi=None):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, int):
            return "must be an integer"
        if lo is not None and v < lo:
            return f"must be >= {lo}"
        if hi is not None and v > hi:
            return f"must be <= {hi}"
    return check


def _real(lo=None, hi=None, open_lo=False):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            return "must be a finite number"
        if lo is not None and (v <= lo if open_lo else v < lo):
            return f"must be {'>' if open_lo else '>='} {lo}"
        if hi is not None and v > hi:
            return f"must be <= {hi}"
    return check


def _choice(options):
    def check(v):
        if v not in options:
            return f"must be one of {sorted(options)}"
    return check


def _bits_list(allow_empty):
    def check(v):
        if not isinstance(v, list) or not all(isinstance(s, str) for s in v):
            return "must be a list of WxAy strings"
        if not v and not allow_empty:
            return "must be nonempty"
        if len(set(v)) != len(v):
            return "contains duplicates"
        for s in v:
            try:
                parse_bits(s)
            except ValueError as e:
                return str(e)
    return check


def _strategy_list(v):
    if not isinstance(v, list) or any(s not in STRATEGIES for s in v):
        return f"must be a list drawn from {sorted(STRATEGIES)}"


RULES = {
    "schedule": {"num_steps": _int(2, 100000), "beta_start": _real(0, 1, True),
                 "beta_end": _real(0, 1, True)},
    "data": {"num_train": _int(1), "num_heldout": _int(1), "seed": _int(0)},
    "train": {"learning_rate": _real(0, None, True), "batch_size": _int(1),
              "num_iterations": _int(0), "seed": _int(0), "uncond_prob": _real(0, 1),
              "num_classes": _int(0, 8)},
    "calibration": {"N": _int(1), "mu": _real(), "sigma": _real(0, None, True),
                    "sampler": _choice(SAMPLERS), "num_inference_steps": _int(1),
                    "seed": _int(0), "drop_prob": _real(0, 1), "grid_size": _int(1)},
    "quantization": {"bit_grid": _bits_list(False), "strategy": _choice(STRATEGIES),
                     "baselines": _strategy_list, "baseline_bits": _bits_list(True)},
    "eval": {"n_samples": _int(2), "n_reference": _int(2), "n_projections": _int(1),
             "seed": _int(0), "num_inference_steps": _int(1)},
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated view over the raw JSON document (kept in ``raw``)."""

    raw: dict

    def __getitem__(self, section):
        return self.raw[section]

    @property
    def schedule(self):
        s = self.raw["schedule"]
        return make_linear_schedule(s["num_steps"], s["beta_start"], s["beta_end"])

    @property
    def train(self) -> TrainConfig:
        t = dict(self.raw["train"])
        t.pop("num_classes")
        return TrainConfig(**t)

    @property
    def num_classes(self) -> int:
        return self.raw["train"]["num_classes"]

    @property
    def conditions(self):
        n = self.num_classes
        return list(range(n)) if n else None

    @property
    def calibration(self) -> CalibrationConfig:
        return CalibrationConfig(T=self.raw["schedule"]["num_steps"], **self.raw["calibration"])

    @property
    def bit_grid(self) -> list:
        return [parse_bits(s) for s in self.raw["quantization"]["bit_grid"]]

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_overrides(self, seed=None, bits=None) -> "ExperimentConfig":
        """``--seed`` sets every stage seed; ``--bits`` replaces the grid."""
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            for section in ("data", "train", "calibration", "eval"):
                raw[section]["seed"] = seed
        if bits is not None:
            raw["quantization"]["bit_grid"] = [bits] if isinstance(bits, str) else list(bits)
        return from_dict(raw)


def _merge(user, path=""):
    if not isinstance(user, dict):
        raise ConfigError(path or "<root>", "must be a JSON object")
    out = copy.deepcopy(DEFAULTS)
    for section, body in user.items():
        if section not in DEFAULTS:
            raise ConfigError(section, "unknown section")
        if not isinstance(body, dict):
            raise ConfigError(section, "must be a JSON object")
        for key, value in body.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{section}.{key}", "unknown field")
            out[section][key] = value
    return out


def from_dict(user: dict) -> ExperimentConfig:
    raw = _merge(user)
    for section, rules in RULES.items():
        for key, check in rules.items():
            msg = check(raw[section][key])
            if msg:
                raise ConfigError(f"{section}.{key}", msg)
    s, c, e = raw["schedule"], raw["calibration"], raw["eval"]
    if s["beta_end"] < s["beta_start"]:
        raise ConfigError("schedule.beta_end", "must be >= schedule.beta_start")
    for path, v in (("calibration.num_inference_steps", c["num_inference_steps"]),
                    ("eval.num_inference_steps", e["num_inference_steps"])):
        if v > s["num_steps"]:
            raise ConfigError(path, f"must be <= schedule.num_steps ({s['num_steps']})")
    if c["sampler"] == "ddpm" and c["num_inference_steps"] != s["num_steps"]:
        raise ConfigError("calibration.num_inference_steps", "ddpm runs every step; must equal schedule.num_steps")
    return ExperimentConfig(raw)


def default_config() -> ExperimentConfig:
    return from_dict({})


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(str(path), f"cannot read config file ({e.strerror})") from e
    try:
        user = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), f"invalid JSON: {e}") from e
    return from_dict(user)
