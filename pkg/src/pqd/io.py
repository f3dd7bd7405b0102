"""Binary file formats. All integers and floats are little-endian.

Checkpoint (``DQCKPT1``)::

    magic   7 bytes  b"DQCKPT1"
    u32     D (data width)
    u32     L (affine layer count)
    u32[2L] (fan_in, fan_out) per layer
    u32     time_embed_dim
    u32     num_classes
    u32     num_steps (T the time embedding accepts)
    f32[]   W_0, b_0, ..., W_{L-1}, b_{L-1}, class table; row-major,
            W_l shaped (fan_in, fan_out)

Quantized model (``DQQMDL1``)::

    magic   7 bytes  b"DQQMDL1"
    u32     n, then n bytes UTF-8 checkpoint path (relative to this file)
    32 B    SHA-256 of the checkpoint bytes
    u32     weight_bits, act_bits, L
    per layer: u32 channel count C (0 at W32), then C weight records
    if act_bits < 32: L activation records
    record: f64 scale, i32 zero_point, u8 bits, u8 signed

Calibration set (``DQCALB1``)::

    magic   7 bytes  b"DQCALB1"
    u32     count, D, T
    u8      conditional flag
    u32     n, then n bytes UTF-8 JSON config echo (sorted keys)
    count records: u32 t, i32 condition (-1 = unconditional), f32[D] x
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict

import numpy as np

from .calibration import CalibrationConfig, CalibrationSet
from .denoiser import Denoiser
from .errors import FormatError
from .quant import FULL_PRECISION, QuantizedModel, QuantParams

CKPT_MAGIC = b"DQCKPT1"
QMODEL_MAGIC = b"DQQMDL1"
CALIB_MAGIC = b"DQCALB1"
_REC = struct.Struct("<diBB")


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else list(vals)

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(size * count), dtype=dtype).copy()

    def string(self) -> str:
        n = self.u32()
        return self.take(n).decode("utf-8")

    def magic(self, expected: bytes):
        got = self.take(len(expected)) if len(self.data) >= len(expected) else self.data
        if got != expected:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {expected!r}")

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


def _string(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def checkpoint_bytes(model: Denoiser) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", model.input_dim, model.num_layers)]
    for w in model.weights:
        parts.append(struct.pack("<II", *w.shape))
    parts.append(struct.pack("<III", model.time_embed_dim, model.num_classes, model.num_steps))
    for p in model.parameters():
        parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_checkpoint(data: bytes) -> Denoiser:
    r = _Reader(data, "checkpoint")
    r.magic(CKPT_MAGIC)
    D, L = r.u32(2)
    if L < 1:
        raise FormatError("checkpoint: no layers")
    shapes = [tuple(r.u32(2)) for _ in range(L)]
    tdim, ncls, nsteps = r.u32(3)
    cdim = shapes[0][0] - D - tdim
    if cdim < 0 or (ncls == 0) != (cdim == 0):
        raise FormatError("checkpoint: inconsistent class embedding width")
    weights, biases = [], []
    for fi, fo in shapes:
        weights.append(r.array("<f4", fi * fo).reshape(fi, fo).astype(np.float64))
        biases.append(r.array("<f4", fo).astype(np.float64))
    table = (r.array("<f4", ncls * cdim).reshape(ncls, cdim).astype(np.float64)
             if ncls else np.zeros((0, 0)))
    r.done()
    try:
        return Denoiser(tuple(weights), tuple(biases), table, D, tdim, nsteps)
    except ValueError as e:
        raise FormatError(f"checkpoint: {e}") from e


def save_checkpoint(model: Denoiser, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


def load_checkpoint(path) -> Denoiser:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())


def _record(qp: QuantParams) -> bytes:
    return _REC.pack(qp.scale, qp.zero_point, qp.bits, int(qp.signed))


def _read_record(r: _Reader) -> QuantParams:
    scale, zp, bits, signed = _REC.unpack(r.take(_REC.size))
    try:
        return QuantParams(scale, zp, bits, bool(signed))
    except ValueError as e:
        raise FormatError(f"quantized model: {e}") from e


def quantized_model_bytes(qmodel: QuantizedModel, checkpoint_ref: str, checkpoint_sha256: bytes) -> bytes:
    parts = [QMODEL_MAGIC, _string(checkpoint_ref), checkpoint_sha256,
             struct.pack("<III", qmodel.weight_bits, qmodel.act_bits, qmodel.num_layers)]
    for l in range(qmodel.num_layers):
        chans = qmodel.weight_params[l] if qmodel.weight_params else ()
        parts.append(struct.pack("<I", len(chans)))
        parts += [_record(p) for p in chans]
    parts += [_record(p) for p in qmodel.act_params]
    return b"".join(parts)


def save_quantized_model(qmodel: QuantizedModel, path, checkpoint_path) -> None:
    """Write ``qmodel`` referencing the checkpoint file it was built from."""
    with open(checkpoint_path, "rb") as f:
        digest = hashlib.sha256(f.read()).digest()
    ref = os.path.relpath(os.path.abspath(checkpoint_path), os.path.dirname(os.path.abspath(path)))
    with open(path, "wb") as f:
        f.write(quantized_model_bytes(qmodel, ref, digest))


def parse_quantized_model(data: bytes, base: Denoiser | None = None, resolve=None) -> tuple:
    """Returns ``(QuantizedModel, checkpoint_ref, sha256)``.

    Without ``base`` the checkpoint is loaded through ``resolve(ref)``,
    which returns the checkpoint bytes.
    """
    r = _Reader(data, "quantized model")
    r.magic(QMODEL_MAGIC)
    ref = r.string()
    digest = r.take(32)
    wbits, abits, L = r.u32(3)
    wparams = []
    for _ in range(L):
        wparams.append(tuple(_read_record(r) for _ in range(r.u32())))
    aparams = tuple(_read_record(r) for _ in range(L)) if abits != FULL_PRECISION else ()
    r.done()
    if base is None:
        ckpt = resolve(ref)
        if hashlib.sha256(ckpt).digest() != digest:
            raise FormatError(f"quantized model: checkpoint {ref!r} does not match its recorded hash")
        base = parse_checkpoint(ckpt)
    if base.num_layers != L:
        raise FormatError("quantized model: layer count differs from checkpoint")
    wparams = tuple(wparams) if wbits != FULL_PRECISION else ()
    try:
        q = QuantizedModel(base, wparams, aparams, wbits, abits)
    except ValueError as e:
        raise FormatError(f"quantized model: {e}") from e
    return q, ref, digest


def load_quantized_model(path) -> QuantizedModel:
    folder = os.path.dirname(os.path.abspath(path))

    def resolve(ref):
        full = ref if os.path.isabs(ref) else os.path.join(folder, ref)
        try:
            with open(full, "rb") as f:
                return f.read()
        except OSError as e:
            raise FormatError(f"quantized model: cannot read checkpoint {full}: {e}") from e

    with open(path, "rb") as f:
        return parse_quantized_model(f.read(), resolve=resolve)[0]


def calibration_set_bytes(calib: CalibrationSet) -> bytes:
    D = calib.x.shape[1]
    echo = json.dumps(asdict(calib.config), sort_keys=True)
    head = [CALIB_MAGIC, struct.pack("<IIIB", len(calib), D, calib.config.T, int(calib.conditional)),
            _string(echo)]
    rec = np.zeros(len(calib), dtype=[("t", "<u4"), ("c", "<i4"), ("x", "<f4", (D,))])
    rec["t"], rec["c"], rec["x"] = calib.t, calib.condition, calib.x
    return b"".join(head) + rec.tobytes()


def parse_calibration_set(data: bytes) -> CalibrationSet:
    r = _Reader(data, "calibration set")
    r.magic(CALIB_MAGIC)
    count, D, T = r.u32(3)
    conditional = bool(r.take(1)[0])
    try:
        cfg = CalibrationConfig(**json.loads(r.string()))
    except (ValueError, TypeError) as e:
        raise FormatError(f"calibration set: bad config echo: {e}") from e
    if cfg.T != T:
        raise FormatError("calibration set: header T disagrees with config echo")
    dt = np.dtype([("t", "<u4"), ("c", "<i4"), ("x", "<f4", (D,))])
    rec = np.frombuffer(r.take(dt.itemsize * count), dtype=dt)
    r.done()
    return CalibrationSet(rec["x"].astype(np.float64), rec["t"].astype(np.int64),
                          rec["c"].astype(np.int64), cfg, conditional)


def save_calibration_set(calib: CalibrationSet, path) -> None:
    with open(path, "wb") as f:
        f.write(calibration_set_bytes(calib))


def load_calibration_set(path) -> CalibrationSet:
    with open(path, "rb") as f:
        return parse_calibration_set(f.read())


def sniff(path) -> bytes:
    with open(path, "rb") as f:
        return f.read(7)
