"""Field images and raw dumps written by the command-line tasks.

Every field is written as an 8-bit binary PGM (min-max scaled), a text
sidecar holding the scale, and an exact little-endian f64 dump.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError


def image_shape(size, shape=None):
    if shape is not None:
        if int(np.prod(shape)) != size:
            raise ContractError(f"shape {shape} does not hold {size} values")
        return tuple(int(s) for s in shape)
    n = int(round(np.sqrt(size)))
    return (n, n) if n * n == size else (1, size)


def pgm_bytes(field, shape=None):
    """P5 payload and ``(lo, hi)``; a constant field maps to mid-gray 128."""
    field = np.asarray(field, dtype=np.float64).ravel()
    if not np.all(np.isfinite(field)):
        raise ContractError("cannot image a non-finite field")
    rows, cols = image_shape(field.size, shape)
    lo, hi = float(field.min()), float(field.max())
    if hi > lo:
        pix = np.rint((field - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pix = np.full(field.size, 128, dtype=np.uint8)
    header = f"P5\n{cols} {rows}\n255\n".encode("ascii")
    return header + pix.tobytes(), (lo, hi)


def write_f64(path, values):
    Path(path).write_bytes(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_f64(path):
    data = Path(path).read_bytes()
    if len(data) % 8:
        raise FormatError("f64 dump length is not a multiple of 8", offset=len(data) - len(data) % 8)
    return np.frombuffer(data, dtype="<f8").astype(np.float64)


def write_field_image(field, path, shape=None):
    """Write ``<stem>.pgm``, ``<stem>.scale.txt`` and ``<stem>.f64``.

    Returns the written paths.
    """
    path = Path(path)
    stem = path.with_suffix("") if path.suffix == ".pgm" else path
    payload, (lo, hi) = pgm_bytes(field, shape)
    pgm = stem.with_name(stem.name + ".pgm")
    side = stem.with_name(stem.name + ".scale.txt")
    raw = stem.with_name(stem.name + ".f64")
    pgm.write_bytes(payload)
    note = "" if hi > lo else "note constant field, written as mid-gray 128\n"
    side.write_text(f"min {lo!r}\nmax {hi!r}\n{note}")
    write_f64(raw, np.asarray(field, dtype=np.float64).ravel())
    return [pgm, side, raw]


def read_pgm(path):
    """Minimal P5 reader (no comments), used for round-trip checks."""
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError("not a binary PGM", offset=0)
    cols, rows = int(parts[1]), int(parts[2])
    pix = np.frombuffer(data[len(data) - rows * cols:], dtype=np.uint8)
    return pix.reshape(rows, cols)
