"""Binary and CSV serialization of grid fields.

Layout (little endian)::

    8 bytes   magic b"BILABFLD"
    u32       format version
    u32       payload kind (0 nodal scalar, 1 cell vector)
    u32       m
    u32 * m   node counts per axis
    f64 * m   spacing per axis
    f64 * n   payload, row-major (for vectors: component-major, then cells)
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from bilab.grid import Grid, ScalarField, VectorField

MAGIC = b"BILABFLD"
VERSION = 1
SCALAR, VECTOR = 0, 1
_HEADER = struct.Struct("<8sII")


class FieldFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RawField:
    kind: int
    shape: tuple[int, ...]
    spacing: tuple[float, ...]
    values: np.ndarray


def encode(field: ScalarField | VectorField) -> bytes:
    g = field.grid
    kind = VECTOR if isinstance(field, VectorField) else SCALAR
    vals = np.ascontiguousarray(field.values, dtype="<f8")
    parts = [
        _HEADER.pack(MAGIC, VERSION, kind),
        struct.pack(f"<I{g.m}I", g.m, *g.shape),
        struct.pack(f"<{g.m}d", *g.spacing),
        vals.tobytes(order="C"),
    ]
    return b"".join(parts)


def decode(data: bytes) -> RawField:
    if len(data) < _HEADER.size + 4:
        raise FieldFormatError("truncated field header")
    magic, version, kind = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FieldFormatError("not a field file (bad magic)")
    if version != VERSION:
        raise FieldFormatError(f"unsupported field format version {version}")
    if kind not in (SCALAR, VECTOR):
        raise FieldFormatError(f"unknown payload kind {kind}")
    off = _HEADER.size
    (m,) = struct.unpack_from("<I", data, off)
    off += 4
    if not 1 <= m <= 16:
        raise FieldFormatError(f"implausible dimension {m}")
    shape = struct.unpack_from(f"<{m}I", data, off)
    off += 4 * m
    spacing = struct.unpack_from(f"<{m}d", data, off)
    off += 8 * m
    if kind == SCALAR:
        vshape = tuple(shape)
    else:
        vshape = (m,) + tuple(n - 1 for n in shape)
    count = int(np.prod(vshape))
    if len(data) - off != 8 * count:
        raise FieldFormatError(f"payload has {len(data) - off} bytes, expected {8 * count}")
    vals = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(vshape).astype(float)
    return RawField(kind, tuple(shape), tuple(spacing), vals)


def write_field(path: str | Path, field: ScalarField | VectorField) -> Path:
    path = Path(path)
    path.write_bytes(encode(field))
    return path


def read_field(path: str | Path, grid: Grid | None = None):
    """Read a field file; with ``grid`` the result is a checked Scalar/VectorField."""
    raw = decode(Path(path).read_bytes())
    if grid is None:
        return raw
    if tuple(grid.shape) != raw.shape or not np.allclose(grid.spacing, raw.spacing, rtol=1e-12, atol=0):
        raise FieldFormatError(f"field shape {raw.shape} / spacing {raw.spacing} does not match the grid")
    if raw.kind == SCALAR:
        return ScalarField(grid, raw.values)
    return VectorField(grid, raw.values)


def write_csv(path: str | Path, field: ScalarField) -> Path:
    """One row per active node: coordinates x1..xm then value."""
    path = Path(path)
    g = field.grid
    pts = g.coords()[g.active]
    vals = field.values[g.active]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(g.m)] + ["value"])
        for x, v in zip(pts, vals):
            w.writerow([repr(float(c)) for c in x] + [repr(float(v))])
    return path
