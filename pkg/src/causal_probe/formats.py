"""Bit-exact file I/O: grayscale PFM, binary PGM, and PNG at the edges.

PFM here is always grayscale ("Pf"), little-endian (negative scale line),
with the bottom row stored first.  Write followed by read reproduces the
float32 payload bit for bit, subnormals included.  Partition files are
binary PGM (P5, maxval 255) whose pixel values name semantic regions:
1 = ACT, 2 = SUP, 3 = NUIS.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import FormatError, ParameterError
from .types import SemanticPartition

_PFM_SCALE = "-1.0"


def write_pfm(field: np.ndarray, path) -> None:
    if field.ndim != 2:
        raise ParameterError(f"PFM payload must be 2-D, got shape {field.shape}")
    data = field.astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise ParameterError("PFM payload must be finite")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n{_PFM_SCALE}\n".encode("ascii"))
        f.write(data[::-1].astype("<f4").tobytes())


def _read_token(f) -> bytes:
    """One whitespace-delimited header token."""
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise FormatError("truncated PFM header")
        if c in b" \t\r\n":
            if tok:
                return tok
            continue
        tok += c


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic != b"Pf":
            raise FormatError(f"unsupported PFM magic {magic!r} (grayscale 'Pf' only)")
        try:
            w = int(_read_token(f))
            h = int(_read_token(f))
        except ValueError as e:
            raise FormatError(f"malformed PFM dimensions: {e}") from e
        scale_tok = _read_token(f)
        try:
            scale = float(scale_tok)
        except ValueError as e:
            raise FormatError(f"malformed PFM scale token {scale_tok!r}") from e
        if scale >= 0:
            raise FormatError(
                f"big-endian PFM unsupported (scale token {scale_tok!r} is non-negative)"
            )
        payload = f.read(4 * w * h)
        if len(payload) != 4 * w * h:
            raise FormatError(
                f"truncated PFM payload: expected {4 * w * h} bytes, got {len(payload)}"
            )
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w)
    return data[::-1].copy()


def write_pgm(labels: np.ndarray, path) -> None:
    """Binary PGM (P5, maxval 255) from a uint8 grid."""
    if labels.ndim != 2:
        raise ParameterError(f"PGM payload must be 2-D, got shape {labels.shape}")
    data = labels.astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _read_pgm_token(f) -> bytes:
    """PGM header token, skipping '#' comment lines."""
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise FormatError("truncated PGM header")
        if c == b"#" and not tok:
            while c and c != b"\n":
                c = f.read(1)
            continue
        if c in b" \t\r\n":
            if tok:
                return tok
            continue
        tok += c


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = _read_pgm_token(f)
        if magic != b"P5":
            raise FormatError(f"unsupported PGM magic {magic!r} (binary P5 only)")
        try:
            w = int(_read_pgm_token(f))
            h = int(_read_pgm_token(f))
            maxval = int(_read_pgm_token(f))
        except ValueError as e:
            raise FormatError(f"malformed PGM header: {e}") from e
        if maxval != 255:
            raise FormatError(f"PGM maxval must be 255, got {maxval}")
        payload = f.read(w * h)
        if len(payload) != w * h:
            raise FormatError(
                f"truncated PGM payload: expected {w * h} bytes, got {len(payload)}"
            )
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def read_partition_pgm(path) -> SemanticPartition:
    """Load a semantic partition; any pixel outside {1, 2, 3} is a format error."""
    labels = read_pgm(path)
    valid = (labels >= 1) & (labels <= 3)
    if not valid.all():
        bad = int(np.flatnonzero(~valid)[0])
        raise FormatError(
            f"unknown partition label {int(labels.flat[bad])} at pixel index {bad} in {path}"
        )
    return SemanticPartition(labels=labels)


def write_png(img: np.ndarray, path) -> None:
    """8-bit RGB (or grayscale) PNG via a standard codec; pixel values are exact."""
    if img.dtype != np.uint8:
        raise ParameterError(f"PNG payload must be uint8, got {img.dtype}")
    Image.fromarray(img).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB") if im.mode not in ("RGB", "L") else im)
