"""Command-line entry point: train, calibrate, quantize, evaluate, reproduce.

Exit codes: 0 success, 2 configuration or missing input, 3 malformed file,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io as _stdio
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .calibration import STRATEGIES, build_calibration_set, pqd_quantize, strategy_config
from .config import ExperimentConfig, default_config, load_config
from .denoiser import Denoiser, eps_mse, init_denoiser, train_denoiser
from .errors import ConfigError, FormatError, NumericalError
from .io import (CKPT_MAGIC, QMODEL_MAGIC, load_calibration_set, load_checkpoint,
                 load_quantized_model, save_calibration_set, save_checkpoint,
                 save_quantized_model, sniff)
from .metrics import evaluate
from .quant import FULL_PRECISION, format_bits, parse_bits
from .toy import eight_gaussians

log = logging.getLogger("pqd")

CSV_COLUMNS = ("strategy", "W", "A", "size_bits", "bops", "sw", "mmd", "seed")
FULL_PRECISION_LABEL = "full-precision"
EXIT_CODES = {ConfigError: 2, FormatError: 3, NumericalError: 4}


class StageError(Exception):
    """Wraps a failure with the pipeline stage it happened in."""

    def __init__(self, stage, cause):
        self.stage, self.cause = stage, cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _sha256(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _require_file(path, what):
    if not os.path.isfile(path):
        raise ConfigError(what, f"file not found: {path}")


def _prepare_out(out):
    os.makedirs(out, exist_ok=True)
    return out


# ---- data ---------------------------------------------------------------

def training_data(cfg: ExperimentConfig):
    d = cfg["data"]
    pts, comp = eight_gaussians(d["num_train"], np.random.default_rng([d["seed"], 0]))
    labels = comp % cfg.num_classes if cfg.num_classes else None
    return pts, labels


def heldout_pairs(cfg: ExperimentConfig):
    """Fixed held-out (x0, t, eps, label) quadruples for loss tracking."""
    d = cfg["data"]
    rng = np.random.default_rng([d["seed"], 1])
    x0, comp = eight_gaussians(d["num_heldout"], rng)
    t = rng.integers(0, cfg["schedule"]["num_steps"], len(x0))
    eps = rng.standard_normal(x0.shape)
    labels = comp % cfg.num_classes if cfg.num_classes else None
    return x0, t, eps, labels


def reference_samples(cfg: ExperimentConfig) -> np.ndarray:
    d = cfg["data"]
    return eight_gaussians(cfg["eval"]["n_reference"], np.random.default_rng([d["seed"], 2]))[0]


# ---- stages -------------------------------------------------------------

def run_train(cfg: ExperimentConfig, out: str) -> dict:
    """Train the toy denoiser; writes checkpoint, training log and reference set."""
    _prepare_out(out)
    sched, tcfg = cfg.schedule, cfg.train
    data, labels = training_data(cfg)
    x0, t, eps, hl = heldout_pairs(cfg)
    init = init_denoiser(data.shape[1], cfg.num_classes, tcfg.seed, sched.num_steps)
    history: list = []
    model = train_denoiser(data, sched, tcfg, labels, cfg.num_classes, init=init, history=history)
    ckpt = os.path.join(out, "checkpoint.bin")
    save_checkpoint(model, ckpt)
    np.save(os.path.join(out, "reference.npy"), reference_samples(cfg))
    tail = history[-100:]
    report = {
        "seed": tcfg.seed,
        "data_seed": cfg["data"]["seed"],
        "num_iterations": tcfg.num_iterations,
        "initial_heldout_loss": eps_mse(init, x0, t, eps, sched, hl),
        "final_heldout_loss": eps_mse(model, x0, t, eps, sched, hl),
        "final_train_loss": float(np.mean(tail)) if tail else None,
        "checkpoint_sha256": _sha256(ckpt),
    }
    _write_json(os.path.join(out, "train_log.json"), report)
    log.info("trained: held-out loss %.4f -> %.4f", report["initial_heldout_loss"],
             report["final_heldout_loss"])
    return report


def _load_model_file(path):
    _require_file(path, "model")
    magic = sniff(path)
    if magic == CKPT_MAGIC:
        return load_checkpoint(path)
    if magic == QMODEL_MAGIC:
        return load_quantized_model(path)
    raise FormatError(f"{path}: not a checkpoint or quantized model (magic {magic!r})")


def _checkpoint(path) -> Denoiser:
    _require_file(path, "checkpoint")
    return load_checkpoint(path)


def run_calibrate(cfg: ExperimentConfig, checkpoint: str, out: str, strategy: str | None = None) -> str:
    """Build the calibration set for ``strategy``; returns the file path."""
    strategy = strategy or cfg["quantization"]["strategy"]
    model = _checkpoint(checkpoint)
    ccfg = strategy_config(cfg.calibration, strategy)
    calib = build_calibration_set(model, cfg.schedule, ccfg, cfg.conditions)
    _prepare_out(out)
    path = os.path.join(out, f"calib-{strategy}.bin")
    save_calibration_set(calib, path)
    _write_json(path[:-4] + ".json", {
        "strategy": strategy,
        "records": len(calib),
        "conditional": calib.conditional,
        "seed": ccfg.seed,
        "calibration": asdict(ccfg),
        "timestep_histogram": calib.histogram().tolist(),
        "timestep_mean": float(np.mean(calib.t)),
        "checkpoint_sha256": _sha256(checkpoint),
    })
    return path


def run_quantize(cfg: ExperimentConfig, checkpoint: str, calib_path: str | None, bits: str,
                 out: str, strategy: str | None = None) -> str:
    """Quantize at ``bits``; returns the quantized model path."""
    strategy = strategy or cfg["quantization"]["strategy"]
    wbits, abits = parse_bits(bits)
    model = _checkpoint(checkpoint)
    ccfg = strategy_config(cfg.calibration, strategy)
    calib = None
    if abits != FULL_PRECISION:
        if not calib_path:
            raise ConfigError("--calib", f"{bits} quantizes activations and needs a calibration set; "
                              "run `pqd calibrate` first and pass its output with --calib")
        _require_file(calib_path, "--calib")
        calib = load_calibration_set(calib_path)
        if calib.x.shape[1] != model.input_dim or calib.config.T != cfg.schedule.num_steps:
            raise ConfigError("--calib", "calibration set does not match the checkpoint's dimensions")
        if calib.config.time_law != ccfg.time_law:
            raise ConfigError("--calib", f"calibration set uses time law {calib.config.time_law!r} "
                              f"but strategy {strategy!r} expects {ccfg.time_law!r}")
    manifest: dict = {}
    qmodel = pqd_quantize(model, cfg.schedule, ccfg, wbits, abits, cfg.conditions, strategy,
                          calib=calib, manifest=manifest)
    _prepare_out(out)
    path = os.path.join(out, f"{strategy}-{format_bits(wbits, abits)}.qmdl")
    save_quantized_model(qmodel, path, checkpoint)
    manifest["checkpoint_sha256"] = _sha256(checkpoint)
    if calib_path and calib is not None:
        manifest["calibration_sha256"] = _sha256(calib_path)
    _write_json(path[:-5] + ".json", manifest)
    return path


def _row_strategy(path, qmodel) -> str:
    if tuple(getattr(qmodel, "bit_config", (FULL_PRECISION, FULL_PRECISION))) == (FULL_PRECISION,) * 2:
        return FULL_PRECISION_LABEL
    side = os.path.splitext(path)[0] + ".json"
    if os.path.isfile(side):
        with open(side) as f:
            return json.load(f).get("strategy", "")
    return ""


def comparison_csv(reports) -> str:
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([r.strategy, r.bit_config[0], r.bit_config[1], r.size_bits, r.bops_per_step,
                    repr(r.sliced_wasserstein), repr(r.mmd), r.seed])
    return buf.getvalue()


def run_evaluate(cfg: ExperimentConfig, model_paths, reference: str, out: str) -> list:
    """Score each model file; writes comparison.csv and reports.json."""
    if not model_paths:
        raise ConfigError("models", "at least one model file is required")
    _require_file(reference, "--reference")
    try:
        ref = np.load(reference, allow_pickle=False)
    except ValueError as e:
        raise FormatError(f"{reference}: {e}") from e
    ev, sched = cfg["eval"], cfg.schedule
    reports = []
    for path in model_paths:
        qmodel = _load_model_file(path)
        reports.append(evaluate(qmodel, sched, ref, ev["n_samples"], ev["seed"], ev["n_projections"],
                                ev["num_inference_steps"], _row_strategy(path, qmodel)))
        log.info("%s: sw=%.4f", path, reports[-1].sliced_wasserstein)
    _prepare_out(out)
    with open(os.path.join(out, "comparison.csv"), "w", newline="") as f:
        f.write(comparison_csv(reports))
    _write_json(os.path.join(out, "reports.json"), [r.to_dict() for r in reports])
    return reports


def _run_stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ConfigError, FormatError, NumericalError, ValueError) as e:
        raise StageError(name, e) from e


def run_reproduce(cfg: ExperimentConfig, out: str) -> str:
    """train -> calibrate -> quantize x grid -> evaluate, into a clean directory."""
    if os.path.isdir(out) and os.listdir(out):
        raise ConfigError("--out", f"output directory {out} is not empty")
    _prepare_out(out)
    with open(os.path.join(out, "config.json"), "w") as f:
        f.write(cfg.to_json())
    q = cfg["quantization"]
    cells = [(q["strategy"], b) for b in q["bit_grid"]]
    cells += [(s, b) for s in q["baselines"] for b in q["baseline_bits"]
              if (s, b) not in cells]
    train_dir, calib_dir, model_dir = (os.path.join(out, d) for d in ("train", "calib", "models"))
    _run_stage("train", run_train, cfg, train_dir)
    ckpt = os.path.join(train_dir, "checkpoint.bin")
    calib_files = {}
    for strategy, bits in cells:
        if parse_bits(bits)[1] != FULL_PRECISION and strategy not in calib_files:
            calib_files[strategy] = _run_stage("calibrate", run_calibrate, cfg, ckpt, calib_dir, strategy)
    models = []
    for strategy, bits in cells:
        if parse_bits(bits) == (FULL_PRECISION, FULL_PRECISION):
            models.append(ckpt)
        else:
            models.append(_run_stage("quantize", run_quantize, cfg, ckpt, calib_files.get(strategy),
                                     bits, model_dir, strategy))
    _run_stage("evaluate", run_evaluate, cfg, models, os.path.join(train_dir, "reference.npy"), out)
    _write_json(os.path.join(out, "provenance.json"), {
        "config_sha256": cfg.digest(),
        "tool_version": __version__,
        "seeds": {s: cfg[s]["seed"] for s in ("data", "train", "calibration", "eval")},
        "cells": [{"strategy": s, "bits": b} for s, b in cells],
        "files": {os.path.relpath(p, out): _sha256(p) for p in [ckpt, *calib_files.values(), *models]},
    })
    return os.path.join(out, "comparison.csv")


# ---- argument handling --------------------------------------------------

def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    bits = getattr(args, "bits", None)
    if bits is not None:
        try:
            parse_bits(bits)
        except ValueError as e:
            raise ConfigError("--bits", str(e)) from e
    return cfg.with_overrides(seed=args.seed, bits=bits)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pqd", description="Time-aware post-training quantization "
                                "of a toy diffusion model.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON config; defaults apply to missing fields")
        sp.add_argument("--seed", type=int, help="override every stage seed")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        return sp

    common(sub.add_parser("train", help="train the toy denoiser"))
    sp = common(sub.add_parser("calibrate", help="record a calibration set"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--strategy", choices=sorted(STRATEGIES))
    sp = common(sub.add_parser("quantize", help="fit quantizers and write a quantized model"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--calib")
    sp.add_argument("--bits", help="WxAy; defaults to every cell of the configured grid")
    sp.add_argument("--strategy", choices=sorted(STRATEGIES))
    sp = common(sub.add_parser("evaluate", help="score model files against reference samples"))
    sp.add_argument("--reference", required=True, help=".npy array of reference samples")
    sp.add_argument("models", nargs="+")
    sp = common(sub.add_parser("reproduce", help="run the whole pipeline"))
    sp.add_argument("--bits", help="restrict the grid to one WxAy cell")
    sub.add_parser("defaults", help="print the default config")
    return p


def dispatch(args) -> int:
    if args.command == "defaults":
        sys.stdout.write(default_config().to_json())
        return 0
    cfg = _config(args)
    if args.command == "train":
        print(json.dumps(run_train(cfg, args.out), sort_keys=True))
    elif args.command == "calibrate":
        print(run_calibrate(cfg, args.checkpoint, args.out, args.strategy))
    elif args.command == "quantize":
        grid = [args.bits] if args.bits else cfg["quantization"]["bit_grid"]
        for bits in grid:
            print(run_quantize(cfg, args.checkpoint, args.calib, bits, args.out, args.strategy))
    elif args.command == "evaluate":
        run_evaluate(cfg, args.models, args.reference, args.out)
        with open(os.path.join(args.out, "comparison.csv")) as f:
            sys.stdout.write(f.read())
    elif args.command == "reproduce":
        path = run_reproduce(cfg, args.out)
        with open(path) as f:
            sys.stdout.write(f.read())
    return 0


def exit_code(err: BaseException) -> int:
    for cls, code in EXIT_CODES.items():
        if isinstance(err, cls):
            return code
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return dispatch(args)
    except StageError as e:
        print(f"pqd: error: {e}", file=sys.stderr)
        return exit_code(e.cause)
    except (ConfigError, FormatError, NumericalError) as e:
        print(f"pqd: error: {e}", file=sys.stderr)
        return exit_code(e)
    except ValueError as e:
        print(f"pqd: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
