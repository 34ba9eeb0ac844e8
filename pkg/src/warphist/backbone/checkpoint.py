"""Model and adapter checkpoints.

Layout (little-endian)::

    magic[4] ("WAHM" model, "WAHL" adapter)  uint32 version
    uint32 json_len  json config
    uint32 n_tensors
    per tensor: uint16 name_len, name, uint8 ndim, uint32 dims[ndim]
    float32 data of every tensor, in table order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..formats import FormatError
from .lora import LoraAdapter
from .model import ModelConfig, ToyModel

MODEL_MAGIC = b"WAHM"
ADAPTER_MAGIC = b"WAHL"
VERSION = 1


def _encode(magic: bytes, config: dict, tensors: dict) -> bytes:
    meta = json.dumps(config, sort_keys=True).encode()
    parts = [magic, struct.pack("<I", VERSION), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(tensors))]
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].detach().cpu().numpy(), dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
                     + struct.pack(f"<{arr.ndim}I", *arr.shape))
        blobs.append(arr.tobytes())
    return b"".join(parts + blobs)


def _decode(raw: bytes, magic: bytes, path):
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte 0 (expected {magic!r})")
    pos = 4
    try:
        (version,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        config = json.loads(raw[pos:pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        table = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + ln].decode()
            pos += ln
            (nd,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{nd}I", raw, pos)
            pos += 4 * nd
            table.append((name, shape))
    except struct.error:
        raise FormatError(f"{path}: truncated header at byte {pos}") from None
    tensors = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        if pos + 4 * size > len(raw):
            raise FormatError(f"{path}: tensor {name!r} needs {4 * size} bytes at offset {pos}, "
                              f"file has {len(raw) - pos}")
        tensors[name] = torch.from_numpy(np.frombuffer(raw, dtype="<f4", count=size, offset=pos)
                                         .reshape(shape).astype(np.float32))
        pos += 4 * size
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes after tensor data")
    return config, tensors


def save_model(model: ToyModel, path) -> None:
    from dataclasses import asdict

    Path(path).write_bytes(_encode(MODEL_MAGIC, asdict(model.cfg), model.state_dict()))


def load_model(path) -> ToyModel:
    config, tensors = _decode(Path(path).read_bytes(), MODEL_MAGIC, path)
    model = ToyModel(ModelConfig.from_dict(config))
    model.load_state_dict(tensors, strict=True)
    model.eval()
    return model


def save_adapter(adapter: LoraAdapter, path) -> None:
    cfg = {"rank": adapter.rank, "alpha": adapter.alpha, "targets": adapter.names}
    tensors = {f"A.{k}": v for k, v in adapter.A.items()}
    tensors.update({f"B.{k}": v for k, v in adapter.B.items()})
    Path(path).write_bytes(_encode(ADAPTER_MAGIC, cfg, tensors))


def load_adapter(path) -> LoraAdapter:
    config, tensors = _decode(Path(path).read_bytes(), ADAPTER_MAGIC, path)
    shapes = {}
    for name in config["targets"]:
        key = name.replace(".", "_")
        shapes[name] = (tensors[f"B.{key}"].shape[0], tensors[f"A.{key}"].shape[1])
    ad = LoraAdapter(shapes, config["rank"], config["alpha"])
    with torch.no_grad():
        for k in ad.A:
            ad.A[k].copy_(tensors[f"A.{k}"])
            ad.B[k].copy_(tensors[f"B.{k}"])
    return ad
