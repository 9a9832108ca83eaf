"""``SPAE`` checkpoint files.

Layout (all integers and floats little-endian)::

    b"SPAE"  u32 version
    u32 len  architecture JSON (UTF-8): {"latent_index", "layers", "n_points"}
    u64 count  f64[count] parameters, per conv-type layer: weights (C order) then bias
    f64 lr, beta1, beta2, eps   u64 t   f64[count] first moments   f64[count] second moments
    u32 epochs  f64[epochs] train loss  f64[epochs] val loss  f64[epochs] lr
    u8 stop reason (0 none, 1 MaxEpochs, 2 EarlyStopped)  u32 best epoch
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import BadMagic, ChecksumMismatch, Truncated, VersionUnsupported
from .adam import AdamState
from .model import AutoencoderModel, layer_from_dict

MAGIC = b"SPAE"
VERSION = 1
_REASONS = [None, "MaxEpochs", "EarlyStopped"]


def _flatten(arrays) -> np.ndarray:
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.ravel(a) for a in arrays])


def checkpoint_bytes(model: AutoencoderModel, state: AdamState | None = None, history=None) -> bytes:
    from ..trainer import TrainHistory

    if state is None:
        state = AdamState.for_params(model.flat_params())
    if history is None:
        history = TrainHistory()
    arch = model.architecture()
    arch["n_points"] = model.n_points
    arch_json = json.dumps(arch, sort_keys=True).encode()
    values = _flatten(model.flat_params()).astype("<f8")
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(arch_json)) + arch_json
    out += struct.pack("<Q", values.size) + values.tobytes()
    out += struct.pack("<4dQ", state.lr, state.beta1, state.beta2, state.eps, state.t)
    for moments in (state.m, state.v):
        mv = _flatten(moments).astype("<f8")
        if mv.size != values.size:
            raise ValueError("optimizer state does not match parameters")
        out += mv.tobytes()
    n = len(history)
    out += struct.pack("<I", n)
    for series in (history.train_loss, history.val_loss, history.lr):
        out += np.asarray(series, dtype="<f8").tobytes()
    reason = history.stop_reason.value if history.stop_reason else None
    out += struct.pack("<BI", _REASONS.index(reason), history.best_epoch)
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise Truncated("checkpoint ends early")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def checkpoint_from_bytes(buf: bytes):
    """Inverse of :func:`checkpoint_bytes`; returns ``(model, state, history)``."""
    from ..trainer import StopReason, TrainHistory

    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic("not an SPAE checkpoint")
    if len(buf) < 12:
        raise Truncated("checkpoint shorter than its header")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise VersionUnsupported(f"checkpoint version {version} (supported: {VERSION})")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("checkpoint CRC32 mismatch")
    r = _Reader(buf[:-4])
    r.take(8)
    (alen,) = r.unpack("<I")
    arch = json.loads(r.take(alen).decode())
    specs = [layer_from_dict(d) for d in arch["layers"]]
    model = AutoencoderModel(specs, int(arch["latent_index"]), [], int(arch["n_points"]))
    (count,) = r.unpack("<Q")
    values = r.floats(count)

    def split(flat):
        out, pos = [], 0
        for wshape, bshape in model.param_shapes():
            nw, nb = int(np.prod(wshape)), int(np.prod(bshape))
            out.append((flat[pos:pos + nw].reshape(wshape).copy(), flat[pos + nw:pos + nw + nb].copy()))
            pos += nw + nb
        if pos != flat.size:
            raise ChecksumMismatch("parameter count does not match architecture")
        return out

    model.params = split(values)
    lr, b1, b2, eps, t = r.unpack("<4dQ")
    m = [a for pair in split(r.floats(count)) for a in pair]
    v = [a for pair in split(r.floats(count)) for a in pair]
    state = AdamState(lr, b1, b2, eps, t, m, v)
    (n,) = r.unpack("<I")
    tl, vl, lrs = r.floats(n), r.floats(n), r.floats(n)
    code, best_epoch = r.unpack("<BI")
    reason = _REASONS[code]
    hist = TrainHistory(tl.tolist(), vl.tolist(), lrs.tolist(), StopReason(reason) if reason else None, best_epoch)
    return model, state, hist


def save_checkpoint(model, state, history, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, state, history))
    os.replace(tmp, path)


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())
