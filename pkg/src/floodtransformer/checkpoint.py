"""Flat binary checkpoint container.

Layout (all integers little-endian uint32)::

    magic      8 bytes  b"FLOODTR\\x00"
    version    uint32
    kv_len     uint32, then kv_len bytes of UTF-8 ``key=value`` lines
    n_params   uint32
    per parameter:
        name_len uint32, name bytes (UTF-8)
        rank     uint32, then rank dims as uint32
        data     prod(dims) float64 little-endian

Model config keys are stored bare; trainer bookkeeping uses a ``train.``
prefix and optimizer moments are stored as extra ``optim.m.*`` /
``optim.v.*`` parameters.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import CheckpointError, FloodTransformerError
from .model import FloodTransformer, ModelConfig

MAGIC = b"FLOODTR\x00"
VERSION = 1
_U32 = struct.Struct("<I")


def encode(kv: Dict[str, str], arrays: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION)]
    for k, v in kv.items():
        if "\n" in k or "=" in k or "\n" in str(v):
            raise CheckpointError(f"config key/value not representable: {k!r}")
    text = "".join(f"{k}={v}\n" for k, v in kv.items()).encode("utf-8")
    parts += [_U32.pack(len(text)), text, _U32.pack(len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    def u32():
        return _U32.unpack(take(4))[0]

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        text = take(u32()).decode("utf-8")
    except UnicodeDecodeError as err:
        raise CheckpointError("config block is not UTF-8") from err
    kv = {}
    for line in text.splitlines():
        if line:
            k, _, v = line.partition("=")
            kv[k] = v
    arrays = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        dims = tuple(u32() for _ in range(u32()))
        n = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last parameter")
    return kv, arrays


def save(path, model: FloodTransformer, extra_kv: Dict[str, str] | None = None,
         extra_arrays: Dict[str, np.ndarray] | None = None) -> None:
    kv = model.config.to_kv()
    kv.update(extra_kv or {})
    arrays = model.state_dict()
    arrays.update(extra_arrays or {})
    Path(path).write_bytes(encode(kv, arrays))


def load(path) -> Tuple[FloodTransformer, Dict[str, str], Dict[str, np.ndarray]]:
    """Rebuild the model; returns it with the leftover (non-model) kv and arrays."""
    kv, arrays = decode(Path(path).read_bytes())
    try:
        config = ModelConfig.from_kv(kv)
        model = FloodTransformer(config)
        model_state = {k: arrays[k] for k in model.params if k in arrays}
        model.load_state_dict(model_state)
    except (FloodTransformerError, ValueError) as err:
        raise CheckpointError(f"checkpoint does not match its config: {err}") from err
    rest_kv = {k: v for k, v in kv.items() if k.startswith("train.")}
    rest_arrays = {k: v for k, v in arrays.items() if k not in model.params}
    return model, rest_kv, rest_arrays
