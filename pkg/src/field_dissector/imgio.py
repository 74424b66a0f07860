"""Binary PPM/PGM image files (8-bit), byte-stable for golden tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _to_u8(img01: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img01, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, img01: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary P6."""
    img = np.asarray(img01, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_to_u8(img).tobytes())


def write_pgm(path, img01: np.ndarray) -> None:
    """Write an (H, W) float image in [0, 1] as binary P5."""
    img = np.asarray(img01, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected an (H, W) image")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_to_u8(img).tobytes())


def _read_netpbm(path, magic: bytes):
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    # header: magic, width, height, maxval, separated by whitespace
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError("only 8-bit netpbm files are supported")
    return raw[pos:], w, h


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file back to an (H, W, 3) float image in [0, 1]."""
    data, w, h = _read_netpbm(path, b"P6")
    img = np.frombuffer(data[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 file back to an (H, W) float image in [0, 1]."""
    data, w, h = _read_netpbm(path, b"P5")
    img = np.frombuffer(data[: w * h], dtype=np.uint8).reshape(h, w)
    return img.astype(np.float64) / 255.0
