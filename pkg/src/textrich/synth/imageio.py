"""Binary PPM (P6) / PGM (P5) reading and writing."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def encode_pnm(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim == 2:
        magic, body = b"P5", image
    elif image.ndim == 3 and image.shape[2] == 3:
        magic, body = b"P6", image
    else:
        raise ValueError(f"unsupported image shape {image.shape}")
    h, w = image.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(body).tobytes()


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode P5/P6 bytes; grayscale is expanded to three channels."""
    m = _HEADER.match(data)
    if m is None:
        raise ValueError("not a binary PPM/PGM image")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"only 8-bit images are supported (maxval {maxval})")
    chans = 3 if magic == b"P6" else 1
    body = data[m.end():m.end() + w * h * chans]
    if len(body) != w * h * chans:
        raise ValueError("truncated image data")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, chans)
    return np.repeat(arr, 3, axis=2) if chans == 1 else arr.copy()


def write_pnm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(image))


def read_pnm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())
