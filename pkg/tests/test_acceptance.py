"""Acceptance criteria, one test each.

Every test registers itself through the ``criterion`` fixture, and the
terminal summary prints one PASS/FAIL line per criterion after the run.
"""
import csv
import filecmp
import math
import os
import time

import numpy as np
import pytest
from scipy import integrate, stats

from conftest import PIPELINE_SECONDS
from pqd.calibration import CalibrationConfig, build_calibration_set, pqd_quantize
from pqd.cli import heldout_pairs, run_reproduce
from pqd.config import default_config
from pqd.denoiser import UNCONDITIONAL, eps_mse, record_activation_stats
from pqd.io import load_quantized_model
from pqd.metrics import bops_per_step, weight_bits_term
from pqd.quant import fake_quant, l2_error, l2_optimal_params
from pqd.schedule import sample_trajectory


def _rows(pipeline_dir):
    with open(os.path.join(pipeline_dir, "comparison.csv")) as f:
        return {(r["strategy"], int(r["W"]), int(r["A"])): r for r in csv.DictReader(f)}


@pytest.mark.parametrize("bits", [2, 4, 8])
def test_c1_quantizer_properties(bits, criterion):
    done = criterion(f"1[b={bits}]", f"quantizer properties over 1e5 cases at b={bits}")
    start = time.perf_counter()
    rng = np.random.default_rng(bits)
    sets, per_set = 1000, 100
    signed = rng.random(sets) < 0.5
    q_min = np.where(signed, -(1 << (bits - 1)), 0)
    q_max = np.where(signed, (1 << (bits - 1)) - 1, (1 << bits) - 1)
    z = rng.integers(q_min, q_max + 1)
    s = np.exp(rng.uniform(-7, 3, sets))
    # Values spread well past both ends of each range so clipping is exercised.
    lo, hi = s * (q_min - z), s * (q_max - z)
    span = hi - lo
    x = rng.uniform(lo - span, hi + span, (per_set, sets)).T
    x[:, :10] = (rng.integers(q_min - z, q_max - z + 1, (10, sets)) + 0.5).T * s[:, None]  # exact ties
    col = lambda v: v[:, None]
    y = fake_quant(x, col(s), col(z), col(q_min), col(q_max))
    inside = (x >= col(lo)) & (x <= col(hi))
    bound = np.abs(x - y) <= col(s) / 2 * (1 + 1e-12)
    idem = fake_quant(y, col(s), col(z), col(q_min), col(q_max)) == y
    order = np.argsort(x, axis=1)
    mono = np.diff(np.take_along_axis(y, order, axis=1), axis=1) >= 0
    distinct = max(len(np.unique(row)) for row in y)
    violations = int((~bound[inside]).sum() + (~idem).sum() + (~mono).sum()) + (distinct > 2 ** bits)
    elapsed = time.perf_counter() - start
    done(f"{x.size} cases, {violations} violations, {elapsed:.1f}s")
    assert x.size >= 100_000 and violations == 0 and elapsed < 30


def _brute_force_error(x, bits, mesh=20000):
    """Best L2 error over a log mesh of scales and every zero point (unsigned)."""
    q_max = (1 << bits) - 1
    m = max(np.abs(x).max(), 1e-12)
    s = np.geomspace(m * 1e-4, 4 * m, mesh)[:, None, None]
    z = np.arange(q_max + 1)[None, :, None]
    q = np.clip(np.rint(x[None, None, :] / s) + z, 0, q_max)
    err = ((s * (q - z) - x) ** 2).sum(-1)
    return err.min()


def test_c2_l2_oracle(criterion):
    done = criterion(2, "L2 search within 5% of brute force on 500 small tensors")
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    worst, misses = 0.0, 0
    for _ in range(500):
        n, bits = int(rng.integers(1, 9)), int(rng.integers(2, 4))
        x = rng.standard_normal(n) * np.exp(rng.uniform(-3, 3))
        if rng.random() < 0.3:
            x = np.abs(x)
        got = l2_error(x, l2_optimal_params([x], bits))
        best = _brute_force_error(x, bits)
        ratio = got / best if best > 0 else (1.0 if got <= 1e-24 else math.inf)
        worst = max(worst, ratio)
        misses += ratio > 1.05
    elapsed = time.perf_counter() - start
    done(f"worst ratio {worst:.4f}, {misses} misses, {elapsed:.1f}s")
    assert misses == 0 and elapsed < 60


def _law_oracle(mu, sigma, T, bins):
    pdf = stats.norm(mu, sigma).pdf
    width = T // bins
    p = []
    for b in range(bins):
        lo = -np.inf if b == 0 else b * width / T
        hi = np.inf if b == bins - 1 else (b + 1) * width / T
        p.append(integrate.quad(pdf, lo, hi)[0])
    return np.array(p)


def test_c3_time_step_law(trained, sched, criterion):
    done = criterion(3, "calibration time steps follow the clamped floored normal law")
    start = time.perf_counter()
    cfg = CalibrationConfig(N=5120, mu=0.4, sigma=0.4, T=250, seed=123)
    cal = build_calibration_set(trained, sched, cfg)
    observed = cal.histogram(25)
    p = _law_oracle(0.4, 0.4, 250, 25)
    chi2, p = stats.chisquare(observed, len(cal) * p / p.sum())
    elapsed = time.perf_counter() - start
    done(f"chi2={chi2:.1f}, p={p:.3f}, {elapsed:.1f}s")
    assert len(cal) == 5120 and p > 0.01 and elapsed < 120


def test_c4_activation_range_varies(trained, sched, criterion):
    done = criterion(4, "last hidden layer range varies >= 1.2x along a trajectory")
    start = time.perf_counter()
    traj = sample_trajectory(trained, sched, num_inference_steps=50, num_samples=256,
                             rng=np.random.default_rng(0))
    ranges = np.array([r.max - r.min for r in record_activation_stats(trained, traj)])
    ratio = ranges.max() / ranges.min()
    elapsed = time.perf_counter() - start
    done(f"range ratio {ratio:.2f}, {elapsed:.1f}s")
    assert ratio >= 1.2 and elapsed < 30


def test_c5_directional_reproduction(pipeline_dir, criterion):
    done = criterion(5, "SW ordering: PQD W8A8 near FP, not worse than naive, W4A8 worse")
    rows = _rows(pipeline_dir)
    sw = lambda key: float(rows[key]["sw"])
    fp, pqd = sw(("full-precision", 32, 32)), sw(("pqd-normal", 8, 8))
    naive, w4 = sw(("minmax-naive", 8, 8)), sw(("pqd-normal", 4, 8))
    finite = all(math.isfinite(float(r[k])) for r in rows.values() for k in ("sw", "mmd"))
    seconds = PIPELINE_SECONDS[0] if PIPELINE_SECONDS else float("nan")
    done(f"FP {fp:.4f}, PQD {pqd:.4f}, naive {naive:.4f}, W4A8 {w4:.4f}, {seconds:.0f}s")
    assert pqd <= 1.25 * fp
    assert pqd <= naive
    assert w4 > pqd and finite
    assert not seconds > 600


def test_c6_time_aware_beats_last_step(trained, sched, criterion):
    done = criterion(6, "normal-time calibration beats last-step calibration at W8A8")
    start = time.perf_counter()
    cfg = default_config()
    x0, t, eps, _ = heldout_pairs(cfg)
    wins, detail = 0, []
    for seed in range(3):
        c = cfg.calibration.replace(seed=seed)
        normal = eps_mse(pqd_quantize(trained, sched, c, 8, 8, strategy="pqd-normal"), x0, t, eps, sched)
        last = eps_mse(pqd_quantize(trained, sched, c, 8, 8, strategy="last-step-only"), x0, t, eps, sched)
        wins += normal < last
        detail.append(f"{normal:.4f}<{last:.4f}" if normal < last else f"{normal:.4f}>={last:.4f}")
    elapsed = time.perf_counter() - start
    done(f"{wins}/3 seeds [{', '.join(detail)}], {elapsed:.0f}s")
    assert wins >= 2 and elapsed < 300


def test_c7_cost_accounting(pipeline_dir, trained, criterion):
    done = criterion(7, "size 8:2:1 and BOPs 16:1, 2:1 exactly")
    models = os.path.join(pipeline_dir, "models")
    q = {b: load_quantized_model(os.path.join(models, f"pqd-normal-{b}.qmdl"))
         for b in ("W4A32", "W8A8", "W4A8")}
    start = time.perf_counter()
    w32, w8, w4 = weight_bits_term(trained), weight_bits_term(q["W8A8"]), weight_bits_term(q["W4A32"])
    b32, b88, b48 = bops_per_step(trained), bops_per_step(q["W8A8"]), bops_per_step(q["W4A8"])
    elapsed = time.perf_counter() - start
    done(f"size {w32}:{w8}:{w4}, bops {b32}:{b88}:{b48}")
    assert w32 == 4 * w8 == 8 * w4
    assert b32 == 16 * b88 and b88 == 2 * b48
    assert elapsed < 1


def test_c8_reproduce_is_deterministic(pipeline_dir, tmp_path, criterion):
    done = criterion(8, "two reproduce runs give byte-identical CSVs")
    start = time.perf_counter()
    run_reproduce(default_config(), str(tmp_path / "again"))
    same = filecmp.cmp(os.path.join(pipeline_dir, "comparison.csv"),
                       str(tmp_path / "again" / "comparison.csv"), shallow=False)
    done(f"identical={same}, {time.perf_counter() - start:.0f}s")
    assert same


def test_c9_conditional_pairing(quick_cond_model, sched, criterion):
    done = criterion(9, "conditional sets hold exactly two entries per index")
    start = time.perf_counter()
    cal = build_calibration_set(quick_cond_model, sched, CalibrationConfig(N=300, num_inference_steps=25),
                                conditions=[0, 1])
    assert len(cal) == 600 and cal.conditional
    x, t, c = cal.x.reshape(300, 2, -1), cal.t.reshape(300, 2), cal.condition.reshape(300, 2)
    bitwise = np.all(x[:, 0].view(np.uint64) == x[:, 1].view(np.uint64))
    same_t = np.all(t[:, 0] == t[:, 1])
    roles = np.all(c[:, 0] != UNCONDITIONAL) and np.all(c[:, 1] == UNCONDITIONAL)
    # no other row may duplicate a pair's sample
    keys = {(row.tobytes(), int(tt)) for row, tt in zip(x[:, 0], t[:, 0])}
    elapsed = time.perf_counter() - start
    done(f"{len(cal)} rows, {len(keys)} distinct pairs, {elapsed:.1f}s")
    assert bitwise and same_t and roles and len(keys) == 300 and elapsed < 10
