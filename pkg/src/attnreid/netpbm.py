"""Binary PGM (P5) and PPM (P6) readers/writers, 8-bit."""

from __future__ import annotations

import numpy as np

from .errors import FormatError


def _to_u8(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Grayscale (H,W) array; floats are interpreted as [0,1]."""
    img = _to_u8(np.asarray(image))
    if img.ndim != 2:
        raise FormatError(f"PGM wants a 2-D array, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Color (H,W,3) array; floats are interpreted as [0,1]."""
    img = _to_u8(np.asarray(image))
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM wants an (H,W,3) array, got shape {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def _read_header(f, magic: bytes):
    if f.read(2) != magic:
        raise FormatError(f"expected {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise FormatError("truncated netpbm header")
        text = line.split(b"#", 1)[0]
        fields.extend(int(tok) for tok in text.split())
    w, h, maxval = fields[:3]
    if maxval != 255:
        raise FormatError(f"only 8-bit netpbm supported, maxval={maxval}")
    return w, h


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P5")
        buf = f.read(w * h)
        if len(buf) != w * h:
            raise FormatError(f"{path}: truncated PGM payload")
        return np.frombuffer(buf, dtype=np.uint8).reshape(h, w)


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P6")
        buf = f.read(w * h * 3)
        if len(buf) != w * h * 3:
            raise FormatError(f"{path}: truncated PPM payload")
        return np.frombuffer(buf, dtype=np.uint8).reshape(h, w, 3)
