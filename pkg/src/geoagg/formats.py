"""On-disk formats: GZTN tensors, a PLY subset, anchor banks and
one-label-per-line prediction files.

GZTN layout (all little-endian)::

    b"GZTN" | version u8 (=1) | dtype u8 (1 = float32) | ndim u8
    | ndim x u64 dims | row-major payload

An anchor bank is three GZTN records written back to back: visual anchors,
geometric anchors, densities.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .anchors import AnchorSet
from .cloud import PointCloud

MAGIC = b"GZTN"
VERSION = 1
DTYPE_F32 = 1
_DTYPES = {DTYPE_F32: np.dtype("<f4")}


class FormatError(ValueError):
    """Base class; ``code`` is a stable machine-readable identifier."""

    code = "format_error"


class BadMagicError(FormatError):
    code = "bad_magic"


class TruncatedError(FormatError):
    code = "truncated"


class DtypeError(FormatError):
    code = "dtype_mismatch"


class VersionError(FormatError):
    code = "bad_version"


class UnsupportedPlyError(FormatError):
    code = "unsupported_ply"


def encode_tensor(array) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d
    header = MAGIC + bytes([VERSION, DTYPE_F32, arr.ndim])
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, next_offset)."""
    if len(buf) - offset < 7:
        raise TruncatedError(f"header truncated at byte {offset}")
    if buf[offset:offset + 4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[offset:offset + 4])!r} at byte {offset}")
    version, dtype, ndim = buf[offset + 4], buf[offset + 5], buf[offset + 6]
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    if dtype not in _DTYPES:
        raise DtypeError(f"unsupported dtype code {dtype}")
    pos = offset + 7
    if len(buf) - pos < 8 * ndim:
        raise TruncatedError("dimension table truncated")
    dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    nbytes = count * _DTYPES[dtype].itemsize
    if len(buf) - pos < nbytes:
        raise TruncatedError(f"payload has {len(buf) - pos} bytes, header implies {nbytes}")
    arr = np.frombuffer(buf, dtype=_DTYPES[dtype], count=count, offset=pos).reshape(dims)
    return arr.copy(), pos + nbytes


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path, ndim: int | None = None) -> np.ndarray:
    """Read a single-record tensor file, optionally checking its rank."""
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor payload")
    if ndim is not None and arr.ndim != ndim:
        raise FormatError(f"{path}: expected a {ndim}-d tensor, got shape {arr.shape}")
    return arr


def read_tensors(path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(buf):
        arr, pos = decode_tensor(buf, pos)
        out.append(arr)
    return out


def write_anchor_bank(path, anchors: AnchorSet) -> None:
    Path(path).write_bytes(encode_tensor(anchors.c_v) + encode_tensor(anchors.c_g)
                           + encode_tensor(anchors.density))


def read_anchor_bank(path) -> AnchorSet:
    records = read_tensors(path)
    if len(records) != 3:
        raise FormatError(f"anchor bank needs 3 tensors, found {len(records)}")
    c_v, c_g, density = records
    return AnchorSet(c_v.astype(np.float64), c_g.astype(np.float64), density.astype(np.float64))


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise UnsupportedPlyError("missing 'ply' signature")
    fmt = None
    elements = []  # (name, count, [(prop, type)])
    while True:
        line = fh.readline()
        if not line:
            raise TruncatedError("PLY header has no end_header")
        parts = line.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "end_header":
            break
        if parts[0] == "format":
            fmt = parts[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise UnsupportedPlyError(f"PLY format {fmt} is not supported")
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise UnsupportedPlyError("property before any element")
            if parts[1] == "list":
                if elements[-1][0] == "vertex":
                    raise UnsupportedPlyError("list properties on vertices are not supported")
                elements[-1][2].append((parts[-1], "list"))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise UnsupportedPlyError(f"unknown PLY property type {parts[1]}")
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt is None:
        raise UnsupportedPlyError("PLY header has no format line")
    return fmt, elements


def read_ply(path) -> PointCloud:
    """Vertex x/y/z (and an optional integer ``label``) from a PLY file.

    Only ``ascii`` and ``binary_little_endian`` 1.0 are accepted. The vertex
    element must come first; later elements are ignored.
    """
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        if not elements or elements[0][0] != "vertex":
            raise UnsupportedPlyError("the first PLY element must be 'vertex'")
        _, count, props = elements[0]
        names = [p for p, _ in props]
        for axis in "xyz":
            if axis not in names:
                raise UnsupportedPlyError(f"vertex element lacks property {axis!r}")
        if fmt == "ascii":
            rows = []
            for i in range(count):
                line = fh.readline()
                if not line:
                    raise TruncatedError(f"PLY declares {count} vertices, found {i}")
                vals = line.split()
                if len(vals) < len(props):
                    raise TruncatedError(f"vertex line {i} has {len(vals)} of {len(props)} values")
                rows.append([float(v) for v in vals[:len(props)]])
            data = np.array(rows, dtype=np.float64).reshape(count, len(props))
            cols = {name: data[:, k] for k, name in enumerate(names)}
        else:
            dtype = np.dtype([(name, "<" + t) for name, t in props])
            raw = fh.read(dtype.itemsize * count)
            if len(raw) < dtype.itemsize * count:
                raise TruncatedError(f"PLY declares {count} vertices, payload is short")
            rec = np.frombuffer(raw, dtype=dtype, count=count)
            cols = {name: rec[name] for name in names}
    coords = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    labels = None
    if "label" in cols:
        labels = np.asarray(cols["label"]).astype(np.int64)
    return PointCloud(coords, labels)


def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    """Write x/y/z as float plus an int ``label`` when the cloud has labels."""
    n = cloud.n
    fmt = "binary_little_endian" if binary else "ascii"
    header = [f"ply", f"format {fmt} 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.labels is not None:
        header.append("property int label")
        fields.append(("label", "<i4"))
    header.append("end_header")
    rec = np.empty(n, dtype=fields)
    rec["x"], rec["y"], rec["z"] = cloud.coords.T
    if cloud.labels is not None:
        rec["label"] = cloud.labels
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            for r in rec:
                fh.write((" ".join(repr(v.item()) for v in r) + "\n").encode("ascii"))


# ---------------------------------------------------------------- labels

def write_labels(path, labels) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in np.asarray(labels).ravel()))


def read_labels(path) -> np.ndarray:
    text = Path(path).read_text().split()
    try:
        return np.array([int(t) for t in text], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: prediction files hold one integer per line") from exc
