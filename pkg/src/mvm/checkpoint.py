"""Versioned binary checkpoints.

Layout (little-endian): magic ``MVMC``, format version, the resolved model
config as JSON, step counter, generator state as JSON, the named parameter
arrays in declaration order, the optimizer hyperparameters and moment
buffers, and a trailing CRC32 of everything before it.  JSON blobs use
sorted keys so that save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import FormatError
from .model import LipReadingModel
from .optim import OptimizerState

MAGIC = b"MVMC"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: OptimizerState
    rng_state: dict
    step: int = 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return encode_checkpoint(self) == encode_checkpoint(other)


def capture(model: LipReadingModel, optimizer: OptimizerState, rng: np.random.Generator, step: int) -> Checkpoint:
    """Snapshot (copies) of the model, optimizer and generator state."""
    opt = OptimizerState(
        lr=optimizer.lr, beta1=optimizer.beta1, beta2=optimizer.beta2, eps=optimizer.eps,
        weight_decay=optimizer.weight_decay, step=optimizer.step,
        exp_avg=[m.copy() for m in optimizer.exp_avg], exp_avg_sq=[v.copy() for v in optimizer.exp_avg_sq],
    )
    return Checkpoint(
        config=model.config,
        params={name: t.data.copy() for name, t in model.named_parameters()},
        optimizer=opt,
        rng_state=rng.bit_generator.state,
        step=step,
    )


def restore_model(ckpt: Checkpoint) -> LipReadingModel:
    model = LipReadingModel(ckpt.config)
    names = [n for n, _ in model.named_parameters()]
    if names != list(ckpt.params):
        raise FormatError("checkpoint parameters do not match the model layout of its config")
    for name, t in model.named_parameters():
        if ckpt.params[name].shape != t.shape:
            raise FormatError(f"checkpoint parameter {name} has shape {ckpt.params[name].shape}, expected {t.shape}")
        t.data[...] = ckpt.params[name]
    return model


def restore_rng(ckpt: Checkpoint) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    return rng


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def _blob(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _array(arr: np.ndarray) -> bytes:
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported array dtype {arr.dtype}")
    head = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    opt = ckpt.optimizer
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        _blob(ckpt.config.to_json()),
        struct.pack("<Q", ckpt.step),
        _blob(json.dumps(ckpt.rng_state, sort_keys=True)),
        struct.pack("<I", len(ckpt.params)),
    ]
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(_array(arr))
    parts.append(struct.pack("<5dQ", opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay, opt.step))
    parts.append(struct.pack("<I", len(opt.exp_avg)))
    for m, v in zip(opt.exp_avg, opt.exp_avg_sq):
        parts.append(_array(m))
        parts.append(_array(v))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def array(self) -> np.ndarray:
        code, ndim = self.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"unknown array dtype code {code}")
        shape = self.unpack(f"<{ndim}I")
        dtype = _DTYPES[code]
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(shape)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 12:
        raise FormatError("checkpoint is truncated")
    if buf[:4] != MAGIC:
        raise FormatError(f"not a checkpoint file (magic {buf[:4]!r})")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {version}")
    try:
        config = ModelConfig.from_json(r.blob())
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid config in checkpoint: {exc}") from None
    (step,) = r.unpack("<Q")
    rng_state = json.loads(r.blob())
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        params[name] = r.array()
    lr, b1, b2, eps, wd, opt_step = r.unpack("<5dQ")
    (moments,) = r.unpack("<I")
    exp_avg, exp_avg_sq = [], []
    for _ in range(moments):
        exp_avg.append(r.array())
        exp_avg_sq.append(r.array())
    if r.pos != len(body):
        raise FormatError("trailing bytes in checkpoint")
    opt = OptimizerState(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd, step=opt_step,
                         exp_avg=exp_avg, exp_avg_sq=exp_avg_sq)
    return Checkpoint(config=config, params=params, optimizer=opt, rng_state=rng_state, step=step)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
