"""Dependency-free PPM (P6) image files.

16-bit maxval is the default so synthetic fixtures survive a disk round trip
with ~1.5e-5 quantization; multi-byte samples are big-endian per the Netpbm
spec.
"""

from __future__ import annotations

import numpy as np


def write_ppm(path, image: np.ndarray, maxval: int = 65535):
    """Write an H x W x 3 float image in [0, 1] as binary PPM."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("write_ppm expects an H x W x 3 array")
    if not 1 <= maxval <= 65535:
        raise ValueError("maxval must be in [1, 65535]")
    quant = np.rint(np.clip(image, 0.0, 1.0) * maxval)
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n{maxval}\n".encode())
        if maxval < 256:
            fh.write(quant.astype(np.uint8).tobytes())
        else:
            fh.write(quant.astype(">u2").tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into an H x W x 3 float32 array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    n = w * h * 3
    if maxval < 256:
        raw = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos)
    else:
        raw = np.frombuffer(data, dtype=">u2", count=n, offset=pos)
    if raw.size != n:
        raise ValueError(f"{path}: pixel payload shorter than {w}x{h}")
    return (raw.reshape(h, w, 3).astype(np.float32)) / np.float32(maxval)
