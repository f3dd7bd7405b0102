import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from pqd.denoiser import Denoiser, init_denoiser
from pqd.metrics import (EvalReport, bops_per_step, evaluate, median_bandwidth, mmd_rbf,
                         model_size_bits, random_directions, sliced_wasserstein, wasserstein_1d,
                         weight_bits_term)
from pqd.quant import QuantizedModel, QuantParams, build_quantized_model
from pqd.toy import eight_gaussians


def ot_w2(a, b):
    """1-D W2 by solving the discrete transport linear program."""
    m, n = len(a), len(b)
    cost = (np.asarray(a)[:, None] - np.asarray(b)[None, :]) ** 2
    rows = np.kron(np.eye(m), np.ones(n))
    cols = np.kron(np.ones(m), np.eye(n))
    res = linprog(cost.ravel(), A_eq=np.vstack([rows, cols]),
                  b_eq=np.concatenate([np.full(m, 1 / m), np.full(n, 1 / n)]), bounds=(0, None),
                  method="highs")
    return math.sqrt(max(res.fun, 0.0))


def test_w1d_hand_example():
    assert wasserstein_1d([0.0], [1.0]) == 1.0
    assert sliced_wasserstein([[0.0]], [[1.0]], n_projections=5) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_w1d_matches_transport_lp(m, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(m), rng.standard_normal(n) * 2 + 1
    assert wasserstein_1d(a, b) == pytest.approx(ot_w2(a, b), rel=1e-7, abs=1e-9)


def test_sliced_matches_oracle_per_projection():
    rng = np.random.default_rng(0)
    A, B = rng.standard_normal((64, 2)), rng.standard_normal((48, 2)) + 0.5
    dirs = random_directions(6, 2, rng)
    per = [ot_w2(A @ u, B @ u) for u in dirs]
    assert sliced_wasserstein(A, B, directions=dirs) == pytest.approx(np.mean(per), rel=1e-7)


def test_sliced_basic_properties():
    rng = np.random.default_rng(1)
    A, B = rng.standard_normal((100, 2)), rng.standard_normal((80, 2))
    dirs = random_directions(32, 2, rng)
    assert sliced_wasserstein(A, A[::-1], directions=dirs) == 0.0
    assert sliced_wasserstein(A, B, directions=dirs) == sliced_wasserstein(B, A, directions=dirs)
    perm = rng.permutation(100)
    assert sliced_wasserstein(A[perm], B, directions=dirs) == sliced_wasserstein(A, B, directions=dirs)


def test_sliced_translation():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((200, 2))
    e = np.array([0.6, 0.8])
    delta = 3.0
    dirs = random_directions(64, 2, rng)
    expected = delta * np.mean(np.abs(dirs @ e))
    assert sliced_wasserstein(A, A + delta * e, directions=dirs) == pytest.approx(expected, rel=1e-12)


def test_input_validation():
    with pytest.raises(ValueError):
        sliced_wasserstein(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        sliced_wasserstein(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        mmd_rbf(np.zeros((3, 2)), np.ones((3, 2)), bandwidth=0.0)
    with pytest.raises(ValueError):
        mmd_rbf(np.zeros((1, 2)), np.ones((3, 2)), bandwidth=1.0)


def test_mmd_identical_and_separated():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((200, 2))
    assert mmd_rbf(A, A.copy(), bandwidth=1.0) < 1e-6
    far = mmd_rbf(A, A + 1000.0, bandwidth=1.0)
    # within-set kernel means are not 1, so the limit is kxx + kyy
    d2 = ((A[:, None] - A[None]) ** 2).sum(-1)
    K = np.exp(-d2 / 2)
    kxx = (K.sum() - 200) / (200 * 199)
    assert far == pytest.approx(2 * kxx, rel=1e-9)
    tight = rng.standard_normal((200, 2)) * 1e-3
    assert mmd_rbf(tight, tight + 50.0, bandwidth=1.0) == pytest.approx(2.0, abs=1e-3)


def test_mmd_permutation_and_symmetry():
    rng = np.random.default_rng(4)
    A, B = rng.standard_normal((150, 2)), rng.standard_normal((120, 2)) + 0.3
    p = rng.permutation(150)
    assert mmd_rbf(A[p], B, 0.8) == mmd_rbf(A, B, 0.8)
    assert mmd_rbf(A, B, 0.8) == pytest.approx(mmd_rbf(B, A, 0.8), rel=1e-12)
    assert median_bandwidth(A, B) > 0


def test_size_accounting():
    m = init_denoiser()
    P = sum(w.size for w in m.weights)
    biases = sum(b.size for b in m.biases)
    assert weight_bits_term(m) == 32 * P
    assert model_size_bits(m) == 32 * P + 32 * biases
    q8 = build_quantized_model(m, 8, 32)
    channels = sum(w.shape[1] for w in m.weights)
    assert model_size_bits(q8) == 8 * P + 32 * biases + channels * (32 + 16)
    q4 = build_quantized_model(m, 4, 32)
    assert weight_bits_term(m) == 4 * weight_bits_term(q8) == 8 * weight_bits_term(q4)


def _single_layer(macs_in=100, out=10):
    # one affine layer: fan_in = D + time embedding width
    D, tdim = out, macs_in - out
    w = np.zeros((macs_in, out))
    return Denoiser((w,), (np.zeros(out),), np.zeros((0, 0)), D, tdim)


def test_bops_hand_example():
    m = _single_layer()
    qp = QuantParams(1.0, 0, 8, True)
    q = QuantizedModel(m, ((qp,) * 10,), (QuantParams(1.0, 0, 8),), 8, 8)
    assert bops_per_step(q) == 1000 * 8 * 8 == 64000
    assert bops_per_step(m) == 1000 * 32 * 32


def test_report_validation():
    with pytest.raises(ValueError):
        EvalReport((8, 8), 1, 1, float("nan"), 0.0, 1.0, 10, 0)
    with pytest.raises(ValueError):
        EvalReport((8, 8), 1, 1, 0.1, -1.0, 1.0, 10, 0)


def test_evaluate_identity_and_determinism(quick_model, sched):
    ref, _ = eight_gaussians(100, np.random.default_rng(0))
    a = evaluate(quick_model, sched, ref, 100, 3, 16, 20)
    b = evaluate(build_quantized_model(quick_model, 32, 32), sched, ref, 100, 3, 16, 20)
    assert a == b
    assert a == evaluate(quick_model, sched, ref, 100, 3, 16, 20)
    assert a.to_dict()["bit_config"] == [32, 32]
    with pytest.raises(ValueError):
        evaluate(quick_model, sched, np.zeros((0, 2)), 10)
