"""File formats: 16-bit binary P5 graymaps and lossless float CSV images.

The graymap carries a header comment recording the float-to-uint16 scale so
values round-trip up to quantization; the CSV is exact.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import DataError

_MAXVAL = 65535


def write_pgm16(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise DataError("graymap output requires a 2D array")
    if np.any(data < 0):
        raise DataError("graymap output requires nonnegative intensities")
    peak = float(data.max())
    scale = _MAXVAL / peak if peak > 0 else 1.0
    h, w = data.shape
    header = f"P5\n# scale {scale!r}\n{w} {h}\n{_MAXVAL}\n"
    quantized = np.rint(data * scale).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(quantized.tobytes())


def read_pgm16(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise DataError(f"{path}: not a binary P5 graymap")
    tokens: list[bytes] = []
    scale = None
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            end = blob.index(b"\n", pos)
            comment = blob[pos:end].decode("ascii", "replace")
            m = re.search(r"scale\s+([-+0-9.eE]+)", comment)
            if m:
                scale = float(m.group(1))
            pos = end + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    w, h, maxval = (int(t) for t in tokens)
    pos += 1  # single whitespace after maxval
    dtype = ">u2" if maxval > 255 else np.uint8
    count = w * h
    raw = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    if raw.size != count:
        raise DataError(f"{path}: truncated pixel data")
    data = raw.reshape(h, w).astype(float)
    if scale is not None and scale != 0:
        data = data / scale
    return data


def write_image_csv(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise DataError("CSV image output requires a 2D array")
    with open(path, "w", newline="") as fh:
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def read_image_csv(path) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: cannot parse CSV image: {exc}") from exc
    return data


def read_image(path) -> np.ndarray:
    """Load either format based on the file contents."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with open(path, "rb") as fh:
        magic = fh.read(2)
    return read_pgm16(path) if magic == b"P5" else read_image_csv(path)


def read_mask(path) -> np.ndarray:
    """Pixel mask graymap: zero-valued pixels are excluded."""
    return read_pgm16(path) > 0
