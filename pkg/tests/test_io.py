import struct

import numpy as np
import pytest

from pqd.calibration import CalibrationConfig, build_calibration_set, pqd_quantize
from pqd.denoiser import init_denoiser
from pqd.errors import FormatError
from pqd.io import (calibration_set_bytes, checkpoint_bytes, load_checkpoint, load_quantized_model,
                    parse_calibration_set, parse_checkpoint, parse_quantized_model,
                    quantized_model_bytes, save_checkpoint, save_quantized_model)

SMALL = CalibrationConfig(N=12, num_inference_steps=10)


@pytest.mark.parametrize("classes", [0, 3])
def test_checkpoint_round_trip(classes):
    m = init_denoiser(num_classes=classes, seed=4)
    data = checkpoint_bytes(m)
    back = parse_checkpoint(data)
    assert checkpoint_bytes(back) == data
    for a, b in zip(m.parameters(), back.parameters()):
        np.testing.assert_array_equal(a, b)
    assert back.num_classes == classes and back.num_steps == m.num_steps


def test_checkpoint_header_layout():
    m = init_denoiser()
    data = checkpoint_bytes(m)
    assert data[:7] == b"DQCKPT1"
    D, L = struct.unpack_from("<II", data, 7)
    assert (D, L) == (2, 4)
    shapes = struct.unpack_from("<8I", data, 15)
    assert shapes == (34, 128, 128, 128, 128, 128, 128, 2)
    n_params = sum(p.size for p in m.parameters())
    assert len(data) == 7 + 4 * (2 + 8 + 3) + 4 * n_params


def test_checkpoint_corruption():
    data = checkpoint_bytes(init_denoiser())
    with pytest.raises(FormatError, match="magic"):
        parse_checkpoint(b"XXCKPT1" + data[7:])
    with pytest.raises(FormatError, match="truncated"):
        parse_checkpoint(data[:-3])
    with pytest.raises(FormatError, match="trailing"):
        parse_checkpoint(data + b"\0")
    with pytest.raises(FormatError):
        parse_checkpoint(b"DQ")


def test_calibration_round_trip(quick_cond_model, sched):
    cal = build_calibration_set(quick_cond_model, sched, SMALL, conditions=[0, 1])
    data = calibration_set_bytes(cal)
    back = parse_calibration_set(data)
    assert calibration_set_bytes(back) == data
    np.testing.assert_array_equal(back.x, cal.x)
    np.testing.assert_array_equal(back.t, cal.t)
    np.testing.assert_array_equal(back.condition, cal.condition)
    assert back.config == cal.config and back.conditional
    with pytest.raises(FormatError):
        parse_calibration_set(b"DQCKPT1" + data[7:])
    with pytest.raises(FormatError):
        parse_calibration_set(data[:-1])


@pytest.mark.parametrize("bits", [(8, 8), (4, 32), (32, 8)])
def test_quantized_model_round_trip(tmp_path, quick_model, sched, bits):
    q = pqd_quantize(quick_model, sched, SMALL, *bits)
    ckpt = tmp_path / "m.bin"
    save_checkpoint(quick_model, ckpt)
    path = tmp_path / "q.qmdl"
    save_quantized_model(q, path, ckpt)
    back = load_quantized_model(path)
    assert back.weight_params == q.weight_params and back.act_params == q.act_params
    raw = path.read_bytes()
    _, ref, digest = parse_quantized_model(raw, base=quick_model)
    assert ref == "m.bin"
    assert quantized_model_bytes(back, ref, digest) == raw
    x = np.random.default_rng(0).standard_normal((5, 2))
    np.testing.assert_array_equal(back(x, 30), q(x, 30))


def test_quantized_model_checks_checkpoint(tmp_path, quick_model, sched):
    q = pqd_quantize(quick_model, sched, SMALL, 8, 32)
    ckpt = tmp_path / "m.bin"
    save_checkpoint(quick_model, ckpt)
    save_quantized_model(q, tmp_path / "q.qmdl", ckpt)
    save_checkpoint(init_denoiser(seed=99), ckpt)
    with pytest.raises(FormatError, match="hash"):
        load_quantized_model(tmp_path / "q.qmdl")
    ckpt.unlink()
    with pytest.raises(FormatError, match="cannot read"):
        load_quantized_model(tmp_path / "q.qmdl")


def test_checkpoint_file_helpers(tmp_path):
    m = init_denoiser(seed=2)
    save_checkpoint(m, tmp_path / "a.bin")
    assert checkpoint_bytes(load_checkpoint(tmp_path / "a.bin")) == (tmp_path / "a.bin").read_bytes()
