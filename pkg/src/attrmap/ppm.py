"""Binary P6 PPM (8-bit RGB) reading and writing."""
from __future__ import annotations

import re

import numpy as np


class PPMError(ValueError):
    pass


def to_uint8(image) -> np.ndarray:
    """3 x H x W floats in [0, 1] -> H x W x 3 bytes (round to nearest)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise PPMError(f"expected a 3 x H x W image, got shape {image.shape}")
    return np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(pixels: np.ndarray) -> bytes:
    """H x W x 3 uint8 array -> P6 file bytes."""
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels, np.uint8).tobytes()


_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def decode_ppm(buf: bytes) -> np.ndarray:
    """P6 file bytes -> 3 x H x W float32 image in [0, 1]."""
    m = _HEADER.match(buf)
    if not m:
        raise PPMError("not a binary P6 PPM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise PPMError(f"only 8-bit PPM supported (maxval {maxval})")
    data = buf[m.end():]
    if len(data) < w * h * 3:
        raise PPMError("truncated PPM pixel data")
    pixels = np.frombuffer(data, np.uint8, count=w * h * 3).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1) / np.float32(255)).astype(np.float32)


def write_ppm(path, image) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(to_uint8(image)))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())
