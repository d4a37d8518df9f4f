"""Mask, image, and probability-map file formats.

Masks are binary PGM (P5, maxval 255, class index per pixel, 255 = ignore).
Images are binary PPM (P6).  Probability maps use a small binary format:
magic "SSDDPM1\n", little-endian u32 H, W, C, then H*W*C little-endian
float32 values with the channel index varying fastest.  All writes are
atomic (temp file + rename).
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

PM_MAGIC = b"SSDDPM1\n"


def atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# netpbm


def write_pgm(path: str, mask: np.ndarray) -> None:
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + m.tobytes())


def write_ppm(path: str, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be [H, W, 3], got shape {img.shape}")
    a = np.ascontiguousarray(img, dtype=np.uint8)
    header = f"P6\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + a.tobytes())


def _parse_netpbm(path: str, magic: bytes):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(magic):
        raise OSError(f"{path}: expected {magic.decode()} file")
    # header tokens: magic, width, height, maxval; '#' starts a comment line
    tokens = []
    pos = len(magic)
    while len(tokens) < 3:
        if pos >= len(data):
            raise OSError(f"{path}: truncated header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise OSError(f"{path}: truncated header")
            continue
        if ch.isspace():
            pos += 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace after maxval
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise OSError(f"{path}: unsupported maxval {maxval}")
    return data, pos, width, height


def read_pgm(path: str) -> np.ndarray:
    data, pos, width, height = _parse_netpbm(path, b"P5")
    need = width * height
    if len(data) - pos < need:
        raise OSError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8, count=need,
                         offset=pos).reshape(height, width).copy()


def read_ppm(path: str) -> np.ndarray:
    data, pos, width, height = _parse_netpbm(path, b"P6")
    need = width * height * 3
    if len(data) - pos < need:
        raise OSError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8, count=need,
                         offset=pos).reshape(height, width, 3).copy()


# ---------------------------------------------------------------------------
# probability maps


def write_probmap(path: str, p: np.ndarray) -> None:
    """Store p [C, H, W] as float32 with channel-fastest layout."""
    if p.ndim != 3:
        raise ValueError(f"probability map must be [C, H, W], got {p.shape}")
    c, h, w = p.shape
    header = PM_MAGIC + struct.pack("<III", h, w, c)
    body = np.ascontiguousarray(p.transpose(1, 2, 0), dtype="<f4").tobytes()
    atomic_write_bytes(path, header + body)


def read_probmap(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(PM_MAGIC):
        raise OSError(f"{path}: not a probability-map file (bad magic)")
    if len(data) < len(PM_MAGIC) + 12:
        raise OSError(f"{path}: truncated header")
    h, w, c = struct.unpack_from("<III", data, len(PM_MAGIC))
    need = h * w * c * 4
    off = len(PM_MAGIC) + 12
    if len(data) - off < need:
        raise OSError(f"{path}: truncated pixel data")
    arr = np.frombuffer(data, dtype="<f4", count=h * w * c, offset=off)
    return arr.reshape(h, w, c).transpose(2, 0, 1).copy()


# ---------------------------------------------------------------------------
# plain key=value config files


def read_config(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise OSError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
