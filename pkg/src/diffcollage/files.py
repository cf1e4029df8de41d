"""CSV matrices and PGM/PPM images."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import FormatError


def write_matrix_csv(path, rows, header=None) -> None:
    """One row per sample; floats written with repr precision so files are byte-stable."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        if header is not None:
            fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def read_matrix_csv(path, skip_header=False) -> np.ndarray:
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if skip_header and lineno == 1:
                continue
            if not rec or all(not c.strip() for c in rec):
                continue
            try:
                vals = [float(c) for c in rec]
            except ValueError as exc:
                raise FormatError(f"{path}: row {lineno}: non-numeric value ({exc})") from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise FormatError(f"{path}: row {lineno}: expected {width} values, got {len(vals)}")
            rows.append(vals)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)


def to_bytes_image(values, lo=None, hi=None) -> np.ndarray:
    """Affinely map values to 0..255."""
    v = np.asarray(values, dtype=np.float64)
    lo = float(np.min(v)) if lo is None else lo
    hi = float(np.max(v)) if hi is None else hi
    if hi <= lo:
        return np.full(v.shape, 128, dtype=np.uint8)
    return np.clip(np.rint((v - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pnm_header(path) -> tuple[str, int, int]:
    data = Path(path).read_bytes()
    magic, dims, _ = data.split(b"\n", 3)[:3]
    w, h = (int(x) for x in dims.split())
    return magic.decode(), w, h
