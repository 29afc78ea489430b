"""Sample-file ingestion: plain CSV and the ``rdsamp1`` binary layout.

``rdsamp1`` is the 8-byte magic ``RDSAMP01``, a little-endian ``uint32`` d,
a little-endian ``uint64`` m, then ``m * d`` little-endian float64 values in
row-major order.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import ConfigError, DataError
from .measures import DiscreteMeasure, empirical_from_samples

MAGIC = b"RDSAMP01"
_HEADER = struct.Struct("<8sIQ")
FORMATS = ("csv", "rdsamp1")


def guess_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".rdsamp", ".rdsamp1", ".bin"):
        return "rdsamp1"
    if ext in (".csv", ".txt", ""):
        return "csv"
    raise ConfigError(f"cannot infer dataset format from extension {ext!r}; pass it explicitly")


def parse_csv(text: str, source: str = "<string>") -> np.ndarray:
    """Parse headerless comma-separated rows into an (m, d) float array.

    Blank lines are skipped. Ragged rows and unparsable fields are reported
    with their 1-based line number.
    """
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split(",")
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise DataError(f"{source}:{lineno}: expected {width} fields, found {len(fields)}")
        try:
            vals = [float(f) for f in fields]
        except ValueError as exc:
            raise DataError(f"{source}:{lineno}: {exc}") from None
        for col, v in enumerate(vals):
            if not np.isfinite(v):
                raise DataError(f"{source}:{lineno}: non-finite value in column {col}")
        rows.append(vals)
    if not rows:
        raise DataError(f"{source}: empty dataset")
    return np.asarray(rows, dtype=np.float64)


def read_rdsamp1(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_rdsamp1(blob, str(path))


def decode_rdsamp1(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < len(MAGIC) or blob[:len(MAGIC)] != MAGIC:
        raise DataError(f"{source}: bad magic at byte 0 (expected {MAGIC!r})")
    if len(blob) < _HEADER.size:
        raise DataError(f"{source}: header truncated at byte {len(blob)} (need {_HEADER.size})")
    _, d, m = _HEADER.unpack_from(blob)
    if d == 0:
        raise DataError(f"{source}: dimension field at byte 8 is zero")
    need = _HEADER.size + 8 * d * m
    if len(blob) < need:
        raise DataError(f"{source}: payload truncated at byte {len(blob)}, expected {need} bytes for m={m}, d={d}")
    if len(blob) > need:
        raise DataError(f"{source}: {len(blob) - need} trailing bytes after payload end at byte {need}")
    return np.frombuffer(blob, dtype="<f8", count=d * m, offset=_HEADER.size).reshape(m, d).astype(np.float64)


def encode_rdsamp1(samples) -> bytes:
    a = np.asarray(samples, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[1] == 0:
        raise DataError(f"expected an (m, d) array, got shape {a.shape}")
    return _HEADER.pack(MAGIC, a.shape[1], a.shape[0]) + np.ascontiguousarray(a, dtype="<f8").tobytes()


def write_rdsamp1(samples, path) -> None:
    data = encode_rdsamp1(samples)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None


def write_csv_samples(samples, path) -> None:
    a = np.asarray(samples, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    try:
        # repr round-trips float64 exactly
        with open(path, "w") as fh:
            for row in a:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None


def load_samples(path, fmt: str = None) -> np.ndarray:
    fmt = fmt or guess_format(path)
    if fmt not in FORMATS:
        raise ConfigError(f"unknown dataset format {fmt!r}")
    try:
        if fmt == "rdsamp1":
            return read_rdsamp1(path)
        with open(path) as fh:
            return parse_csv(fh.read(), str(path))
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not text at byte {exc.start}") from None


def read_dataset(path, fmt: str = None) -> DiscreteMeasure:
    """Load a sample file as a uniform empirical measure."""
    samples = load_samples(path, fmt)
    bad = ~np.isfinite(samples)
    if bad.any():
        i, j = map(int, np.argwhere(bad)[0])
        byte = _HEADER.size + 8 * (i * samples.shape[1] + j)
        raise DataError(f"{path}: non-finite value at row {i}, column {j} (byte {byte})")
    return empirical_from_samples(samples)


def convert(src, dst, src_fmt: str = None, dst_fmt: str = None) -> int:
    """Convert between formats; returns the number of rows written."""
    samples = load_samples(src, src_fmt)
    dst_fmt = dst_fmt or guess_format(dst)
    if dst_fmt == "rdsamp1":
        write_rdsamp1(samples, dst)
    elif dst_fmt == "csv":
        write_csv_samples(samples, dst)
    else:
        raise ConfigError(f"unknown dataset format {dst_fmt!r}")
    return samples.shape[0]

