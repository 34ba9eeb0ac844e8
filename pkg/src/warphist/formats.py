"""Binary image/depth containers and key/value manifests.

* frames: binary PPM (P6, maxval 255)
* masks: binary PGM (P5, 255 = set)
* depth stacks: ``WAHD`` + uint32 width, height, count + float32 data, all little-endian
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

DEPTH_MAGIC = b"WAHD"
_DEPTH_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """A file does not follow its declared layout."""


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap [0, 1] values onto the 8-bit grid that PPM can store exactly."""
    return to_uint8(img).astype(np.float64) / 255.0


def _write_pnm(path, magic: bytes, data: np.ndarray) -> None:
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(data).tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header at byte {pos}")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected magic {magic!r} at byte 0, found {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed header") from None
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    need = w * h * channels
    if len(raw) - pos != need:
        raise FormatError(f"{path}: expected {need} payload bytes at offset {pos}, found {len(raw) - pos}")
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return data.reshape((h, w, channels) if channels > 1 else (h, w))


def write_ppm(path, rgb: np.ndarray) -> None:
    _write_pnm(path, b"P6", to_uint8(rgb))


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3).astype(np.float64) / 255.0


def write_pgm(path, mask: np.ndarray) -> None:
    _write_pnm(path, b"P5", np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_pgm(path) -> np.ndarray:
    data = _read_pnm(path, b"P5", 1)
    if not np.isin(data, (0, 255)).all():
        raise FormatError(f"{path}: mask values must be 0 or 255")
    return data == 255


def write_depth(path, depths: np.ndarray) -> None:
    depths = np.asarray(depths, dtype="<f4")
    if depths.ndim == 2:
        depths = depths[None]
    n, h, w = depths.shape
    with open(path, "wb") as f:
        f.write(_DEPTH_HEADER.pack(DEPTH_MAGIC, w, h, n))
        f.write(depths.tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _DEPTH_HEADER.size:
        raise FormatError(f"{path}: expected {_DEPTH_HEADER.size} header bytes, found {len(raw)}")
    magic, w, h, n = _DEPTH_HEADER.unpack_from(raw, 0)
    if magic != DEPTH_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0 (expected {DEPTH_MAGIC!r})")
    need = _DEPTH_HEADER.size + 4 * w * h * n
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes for {n}x{h}x{w} depth, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_DEPTH_HEADER.size).reshape(n, h, w).astype(np.float32)


def write_manifest(path, items: dict) -> None:
    """One ``key = value`` pair per line; values must not contain newlines."""
    lines = []
    for k, v in items.items():
        v = str(v)
        if "\n" in v or "=" in k:
            raise ValueError(f"manifest entry {k!r} cannot be represented")
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        if " = " not in line:
            raise FormatError(f"{path}: line {n} is not 'key = value'")
        k, v = line.split(" = ", 1)
        out[k.strip()] = v
    return out
