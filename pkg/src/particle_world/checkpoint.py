"""Binary checkpoint container for model parameters and optimizer state.

Layout (little-endian)::

    magic      8 bytes  b"PWCKPT\\0\\0"
    version    u32
    config     5 x u32  embed_dim, num_layers, num_heads, ff_hidden, decoder_hidden
               2 x f64  length_scale, motion_scale; u8 center_xy
    metadata   u32 length + UTF-8 JSON (training progress, configs, free-form)
    blocks     u32 count, then per block:
                 u16 name length, name (UTF-8), u8 ndim, ndim x u32 shape,
                 float64 data in C order

Optimizer moments are stored as extra blocks named ``adam.m/<block>`` and
``adam.v/<block>``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .episodes import atomic_write_bytes
from .errors import FormatError
from .model import ModelConfig, ModelParams

MAGIC = b"PWCKPT\0\0"
VERSION = 1
_CONFIG_FIELDS = ("embed_dim", "num_layers", "num_heads", "ff_hidden", "decoder_hidden")


@dataclass
class OptimizerState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.step, {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}
        )


@dataclass
class Checkpoint:
    params: ModelParams
    metadata: dict = field(default_factory=dict)
    optimizer: OptimizerState | None = None


def _write_block(buf, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = ckpt.params.config
    buf.write(struct.pack("<5I", *(getattr(cfg, f) for f in _CONFIG_FIELDS)))
    buf.write(struct.pack("<ddB", cfg.length_scale, cfg.motion_scale, int(cfg.center_xy)))
    meta = dict(ckpt.metadata)
    if ckpt.optimizer is not None:
        meta["optimizer_step"] = ckpt.optimizer.step
    raw = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    blocks = list(ckpt.params.arrays.items())
    if ckpt.optimizer is not None:
        blocks += [(f"adam.m/{k}", a) for k, a in ckpt.optimizer.m.items()]
        blocks += [(f"adam.v/{k}", a) for k, a in ckpt.optimizer.v.items()]
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        _write_block(buf, name, arr)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, encode_checkpoint(ckpt))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(data, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        fields = dict(zip(_CONFIG_FIELDS, r.unpack("<5I")))
        length_scale, motion_scale, center = r.unpack("<ddB")
        cfg = ModelConfig(**fields, length_scale=length_scale, motion_scale=motion_scale, center_xy=bool(center))
    except ValueError as exc:
        raise FormatError(f"{path}: invalid model config: {exc}") from exc
    (n_meta,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n_meta))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata") from exc
    (count,) = r.unpack("<I")
    blocks = {}
    for _ in range(count):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    m = {k[len("adam.m/") :]: a for k, a in blocks.items() if k.startswith("adam.m/")}
    v = {k[len("adam.v/") :]: a for k, a in blocks.items() if k.startswith("adam.v/")}
    arrays = {k: a for k, a in blocks.items() if not k.startswith("adam.")}
    try:
        params = ModelParams(cfg, arrays)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    optimizer = None
    if "optimizer_step" in meta:
        optimizer = OptimizerState(int(meta.pop("optimizer_step")), m, v)
    return Checkpoint(params, meta, optimizer)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"cannot open checkpoint {path}: {exc.strerror}") from exc
    return decode_checkpoint(data, path)
