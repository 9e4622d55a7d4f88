"""Minimal NRRD reader/writer for 3D integer volumes.

Only what the pipeline produces and consumes is supported: ``dimension: 3``,
8/16-bit integer types, raw or gzip encoding, and ``spacings`` or
``space directions`` for voxel size.
"""

from __future__ import annotations

import gzip
import os

import numpy as np

from .voxel import VoxelGrid

MAGIC = b"NRRD000"
KIND_KEY = "implantgen_kind"

_TYPES = {
    "signed char": "i1", "int8": "i1", "int8_t": "i1",
    "uchar": "u1", "unsigned char": "u1", "uint8": "u1", "uint8_t": "u1",
    "short": "i2", "short int": "i2", "signed short": "i2", "signed short int": "i2",
    "int16": "i2", "int16_t": "i2",
    "ushort": "u2", "unsigned short": "u2", "unsigned short int": "u2",
    "uint16": "u2", "uint16_t": "u2",
}
_WRITE_TYPE = {"mask": "uint8", "hu": "int16"}


class NrrdError(ValueError):
    """Header or payload problem; ``field`` names the offending header field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _parse_header(blob: bytes) -> tuple[dict[str, str], dict[str, str], int]:
    if not blob.startswith(MAGIC):
        raise NrrdError("magic", "missing NRRD magic line")
    fields: dict[str, str] = {}
    keyvals: dict[str, str] = {}
    pos = blob.find(b"\n") + 1
    if pos == 0:
        raise NrrdError("header", "no header terminator")
    while True:
        end = blob.find(b"\n", pos)
        if end < 0:
            raise NrrdError("header", "header not terminated by a blank line")
        line = blob[pos:end].decode("ascii", errors="replace").rstrip("\r")
        pos = end + 1
        if not line:
            return fields, keyvals, pos
        if line.startswith("#"):
            continue
        if ":=" in line:
            key, value = line.split(":=", 1)
            keyvals[key.strip()] = value.strip()
        elif ": " in line:
            key, value = line.split(": ", 1)
            fields[key.strip().lower()] = value.strip()
        else:
            raise NrrdError("header", f"malformed line {line!r}")


def _spacing(fields: dict[str, str]) -> tuple[float, float, float]:
    if "spacings" in fields:
        parts = fields["spacings"].split()
        try:
            values = tuple(float(v) for v in parts)
        except ValueError:
            raise NrrdError("spacings", f"not numeric: {fields['spacings']!r}") from None
        if len(values) != 3:
            raise NrrdError("spacings", "expected three values")
        return values
    if "space directions" in fields:
        vectors = []
        for token in fields["space directions"].replace(") (", ")|(").split("|"):
            token = token.strip()
            if not (token.startswith("(") and token.endswith(")")):
                raise NrrdError("space directions", f"bad vector {token!r}")
            try:
                vec = [float(v) for v in token[1:-1].split(",")]
            except ValueError:
                raise NrrdError("space directions", f"bad vector {token!r}") from None
            vectors.append(float(np.linalg.norm(vec)))
        if len(vectors) != 3:
            raise NrrdError("space directions", "expected three vectors")
        return tuple(vectors)
    raise NrrdError("spacings", "neither spacings nor space directions present")


def read_nrrd(blob: bytes) -> VoxelGrid:
    fields, keyvals, offset = _parse_header(blob)
    for required in ("dimension", "type", "sizes", "encoding"):
        if required not in fields:
            raise NrrdError(required, "required field missing")
    if fields["dimension"] != "3":
        raise NrrdError("dimension", f"unsupported dimension {fields['dimension']}")
    type_name = fields["type"].lower()
    if type_name not in _TYPES:
        raise NrrdError("type", f"unsupported type {fields['type']!r}")
    try:
        sizes = tuple(int(v) for v in fields["sizes"].split())
    except ValueError:
        raise NrrdError("sizes", f"not integers: {fields['sizes']!r}") from None
    if len(sizes) != 3 or min(sizes) < 1:
        raise NrrdError("sizes", f"expected three positive sizes, got {fields['sizes']!r}")
    if "data file" in fields or "datafile" in fields:
        raise NrrdError("data file", "detached payloads are not supported")
    spacing = _spacing(fields)

    code = _TYPES[type_name]
    if code[1] != "1":
        endian = fields.get("endian", "").lower()
        if endian not in ("little", "big"):
            raise NrrdError("endian", f"unsupported or missing endian {endian!r}")
        code = ("<" if endian == "little" else ">") + code
    dtype = np.dtype(code)

    payload = blob[offset:]
    encoding = fields["encoding"].lower()
    if encoding in ("gzip", "gz"):
        try:
            payload = gzip.decompress(payload)
        except (OSError, EOFError) as exc:
            raise NrrdError("encoding", f"gzip payload is corrupt ({exc})") from None
    elif encoding != "raw":
        raise NrrdError("encoding", f"unsupported encoding {fields['encoding']!r}")
    expected = int(np.prod(sizes)) * dtype.itemsize
    if len(payload) != expected:
        raise NrrdError("data", f"payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(sizes, order="F")

    kind = keyvals.get(KIND_KEY)
    if kind is None:
        kind = "mask" if code[-2:] == "u1" and data.max() <= 1 else "hu"
    if kind not in ("mask", "hu"):
        raise NrrdError(KIND_KEY, f"unsupported kind {kind!r}")
    return VoxelGrid(np.array(data, dtype=np.uint8 if kind == "mask" else np.int16),
                     spacing, kind)


def write_nrrd(grid: VoxelGrid) -> bytes:
    """Serialize with an ASCII header and a raw little-endian payload."""
    if grid.kind not in _WRITE_TYPE:
        raise ValueError(f"cannot write {grid.kind!r} grids; binarize first")
    type_name = _WRITE_TYPE[grid.kind]
    dtype = np.dtype("u1" if grid.kind == "mask" else "<i2")
    header = [
        "NRRD0004",
        f"type: {type_name}",
        "dimension: 3",
        "sizes: {} {} {}".format(*grid.dims),
        "endian: little",
        "encoding: raw",
        "spacings: {} {} {}".format(*(repr(float(s)) for s in grid.spacing)),
        f"{KIND_KEY}:={grid.kind}",
    ]
    payload = np.asarray(grid.data, dtype=dtype).tobytes(order="F")
    return ("\n".join(header) + "\n\n").encode("ascii") + payload


def load(path: str | os.PathLike) -> VoxelGrid:
    with open(path, "rb") as fh:
        return read_nrrd(fh.read())


def save(path: str | os.PathLike, grid: VoxelGrid) -> None:
    with open(path, "wb") as fh:
        fh.write(write_nrrd(grid))
