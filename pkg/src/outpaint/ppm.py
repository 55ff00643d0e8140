"""Binary PPM/PGM image files.

Images are float arrays in [-1, 1]; a pixel p maps to the byte
round((p + 1) * 127.5) clamped to [0, 255]. Color images are P6 (maxval
255, shape (3, H, W)); masks are P5 grayscale where 255 means masked
(generate) and 0 means kept.
"""

from __future__ import annotations

import numpy as np


class BadImageFile(ValueError):
    """File is not the expected PPM/PGM variant."""


def float_to_byte(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def byte_to_float(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 127.5 - 1.0


def write_ppm(path, img: np.ndarray) -> None:
    """Write a (3, H, W) float image in [-1, 1] as binary P6."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise BadImageFile(f"expected (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    data = float_to_byte(img).transpose(1, 2, 0)  # (H, W, 3)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    """Write a (H, W) binary mask as P5; 255 = masked, 0 = kept."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise BadImageFile(f"expected (H, W) mask, got {mask.shape}")
    data = (mask * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_header(fh, magic: bytes):
    got = fh.read(2)
    if got != magic:
        raise BadImageFile(f"bad magic {got!r}, expected {magic!r}")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise BadImageFile("truncated header")
        body = line.split(b"#", 1)[0]
        fields.extend(body.split())
    w, h, maxval = (int(v) for v in fields[:3])
    if maxval != 255:
        raise BadImageFile(f"unsupported maxval {maxval}")
    return w, h


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file back to a (3, H, W) float image in [-1, 1]."""
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P6")
        raw = fh.read(3 * w * h)
    if len(raw) != 3 * w * h:
        raise BadImageFile(f"expected {3 * w * h} pixel bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return byte_to_float(data)


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 mask back to (H, W) floats in {0, 1}."""
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P5")
        raw = fh.read(w * h)
    if len(raw) != w * h:
        raise BadImageFile(f"expected {w * h} mask bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return (data >= 128).astype(np.float64)
