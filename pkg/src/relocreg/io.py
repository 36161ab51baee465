"""PLY / XYZ point-cloud files, 4x4 transform files and JSON documents."""
from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import PointCloud, RigidTransform
from .errors import IoError, ParamError, ParseError

log = logging.getLogger(__name__)

PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass
class PlyElement:
    name: str
    count: int
    properties: list  # (name, numpy type) or (name, count type, item type) for lists

    @property
    def has_lists(self):
        return any(len(p) == 3 for p in self.properties)


@dataclass
class PlyHeader:
    format: str  # "ascii" | "binary_little_endian"
    elements: list
    header_bytes: int
    header_lines: int

    @property
    def vertex(self) -> PlyElement:
        for el in self.elements:
            if el.name == "vertex":
                return el
        raise ParseError("PLY file has no vertex element")

    @property
    def vertex_count(self) -> int:
        return self.vertex.count


def atomic_write(path, data: bytes):
    """Write ``data`` to a temp file beside ``path`` then rename over it."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def parse_ply_header(raw: bytes) -> PlyHeader:
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file or missing end_header", "line 1")
    nl = raw.find(b"\n", end)
    if nl < 0:
        raise ParseError("header not terminated by newline", f"byte {end}")
    text = raw[:nl].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []
    for lineno, line in enumerate(text, start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported format line {line!r}", f"line {lineno}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(f"bad element line {line!r}", f"line {lineno}")
            try:
                count = int(tok[2])
            except ValueError:
                raise ParseError(f"bad element count {tok[2]!r}", f"line {lineno}") from None
            if count < 0:
                raise ParseError("negative element count", f"line {lineno}")
            elements.append(PlyElement(tok[1], count, []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", f"line {lineno}")
            if tok[1] == "list" and len(tok) == 5:
                if tok[2] not in PLY_TYPES or tok[3] not in PLY_TYPES:
                    raise ParseError(f"unknown list type in {line!r}", f"line {lineno}")
                elements[-1].properties.append((tok[4], PLY_TYPES[tok[2]], PLY_TYPES[tok[3]]))
            elif len(tok) == 3 and tok[1] in PLY_TYPES:
                elements[-1].properties.append((tok[2], PLY_TYPES[tok[1]]))
            else:
                raise ParseError(f"bad property line {line!r}", f"line {lineno}")
        else:
            raise ParseError(f"unexpected header line {line!r}", f"line {lineno}")
    if fmt is None:
        raise ParseError("missing format line", "header")
    header = PlyHeader(fmt, elements, nl + 1, len(text))
    names = [p[0] for p in header.vertex.properties]
    for axis in "xyz":
        if axis not in names:
            raise ParseError(f"vertex element lacks property {axis}", "header")
    if header.vertex.has_lists:
        raise ParseError("list properties on vertex are not supported", "header")
    return header


def _finish(cols, names, where):
    xyz = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    bad = ~np.isfinite(xyz).all(axis=1)
    if bad.any():
        raise ParseError("non-finite coordinate", where(int(np.flatnonzero(bad)[0])))
    normals = None
    if all(k in names for k in ("nx", "ny", "nz")):
        n = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1).astype(np.float64)
        norm = np.linalg.norm(n, axis=1)
        if np.isfinite(n).all() and (norm > 0).all():
            normals = n / norm[:, None]
    return PointCloud(xyz, normals)


def _load_ply_ascii(raw, header):
    lines = raw[header.header_bytes:].decode("ascii", errors="replace").splitlines()
    pos = 0
    first_line = header.header_lines + 1
    for el in header.elements:
        if el.name != "vertex":
            log.warning("skipping PLY element %r (%d items)", el.name, el.count)
            pos += el.count
            continue
        names = [p[0] for p in el.properties]
        rows = lines[pos:pos + el.count]
        if len(rows) < el.count:
            raise ParseError(f"expected {el.count} vertices, found {len(rows)}",
                             f"line {first_line + pos + len(rows)}")
        data = np.empty((el.count, len(names)))
        for i, row in enumerate(rows):
            tok = row.split()
            if len(tok) != len(names):
                raise ParseError(f"expected {len(names)} values, got {len(tok)}",
                                 f"line {first_line + pos + i}")
            try:
                data[i] = [float(t) for t in tok]
            except ValueError:
                raise ParseError(f"bad number in {row!r}", f"line {first_line + pos + i}") from None
        cols = {n: data[:, k] for k, n in enumerate(names)}
        start = first_line + pos
        return _finish(cols, names, lambda i: f"line {start + i}")
    raise ParseError("PLY file has no vertex element")


def _skip_binary_element(raw, off, el):
    if not el.has_lists:
        return off + el.count * np.dtype([(p[0], "<" + p[1]) for p in el.properties]).itemsize
    for _ in range(el.count):
        for prop in el.properties:
            if len(prop) == 2:
                off += np.dtype(prop[1]).itemsize
            else:
                ct = np.dtype("<" + prop[1])
                if off + ct.itemsize > len(raw):
                    raise ParseError("truncated list property", f"byte {off}")
                n = int(np.frombuffer(raw, ct, 1, off)[0])
                off += ct.itemsize + n * np.dtype(prop[2]).itemsize
    return off


def _load_ply_binary(raw, header):
    off = header.header_bytes
    for el in header.elements:
        if el.name != "vertex":
            log.warning("skipping PLY element %r (%d items)", el.name, el.count)
            off = _skip_binary_element(raw, off, el)
            continue
        dt = np.dtype([(p[0], "<" + p[1]) for p in el.properties])
        need = el.count * dt.itemsize
        if off + need > len(raw):
            raise ParseError(f"truncated vertex data: need {need} bytes, have {len(raw) - off}",
                             f"byte {len(raw)}")
        arr = np.frombuffer(raw, dt, el.count, off)
        names = list(dt.names)
        start = off
        return _finish({n: arr[n] for n in names}, names,
                       lambda i: f"byte {start + i * dt.itemsize}")
    raise ParseError("PLY file has no vertex element")


def load_xyz(path) -> PointCloud:
    text = _read_bytes(path).decode("utf-8", errors="replace")
    pts = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != 3:
            raise ParseError(f"expected 'x y z', got {line!r}", f"line {lineno}")
        try:
            xyz = [float(t) for t in tok]
        except ValueError:
            raise ParseError(f"bad number in {line!r}", f"line {lineno}") from None
        if not np.isfinite(xyz).all():
            raise ParseError("non-finite coordinate", f"line {lineno}")
        pts.append(xyz)
    return PointCloud(np.array(pts, dtype=np.float64).reshape(-1, 3))


def load_cloud(path) -> PointCloud:
    """Read a ``.ply`` (ascii or binary little-endian) or ``.xyz`` cloud."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".xyz":
        return load_xyz(path)
    if suffix != ".ply":
        raise ParamError(f"unsupported cloud extension {path.suffix!r}")
    raw = _read_bytes(path)
    header = parse_ply_header(raw)
    if header.format == "ascii":
        return _load_ply_ascii(raw, header)
    return _load_ply_binary(raw, header)


def save_cloud(cloud: PointCloud, path, format: str = "binary"):
    """Write ``cloud`` as PLY (``format`` ascii|binary) or as XYZ text by extension.

    Binary PLY stores little-endian float32, so coordinates round-trip
    bit-exactly only when they are float32-representable. ASCII output uses
    9 significant digits.
    """
    path = Path(path)
    if path.suffix.lower() == ".xyz":
        body = "".join("%.9g %.9g %.9g\n" % tuple(p) for p in cloud.points)
        atomic_write(path, body.encode("ascii"))
        return
    if format not in ("ascii", "binary"):
        raise ParamError(f"unknown PLY format {format!r}")
    names = ["x", "y", "z"]
    cols = [cloud.points]
    if cloud.normals is not None:
        names += ["nx", "ny", "nz"]
        cols.append(cloud.normals)
    data = np.hstack(cols) if cols else np.zeros((0, 3))
    fmt_tag = "ascii" if format == "ascii" else "binary_little_endian"
    head = [
        "ply",
        f"format {fmt_tag} 1.0",
        "comment written by relocreg",
        f"element vertex {len(cloud)}",
        *[f"property float {n}" for n in names],
        "end_header",
    ]
    header = ("\n".join(head) + "\n").encode("ascii")
    if format == "ascii":
        line = " ".join(["%.9g"] * len(names)) + "\n"
        body = "".join(line % tuple(row) for row in data).encode("ascii")
    else:
        body = np.ascontiguousarray(data, dtype="<f4").tobytes()
    atomic_write(path, header + body)


def format_transform(t: RigidTransform) -> str:
    m = t.matrix
    return "".join(" ".join("%.17g" % v for v in row) + "\n" for row in m)


def save_transform(t: RigidTransform, path):
    """Four rows of four numbers: the row-major homogeneous matrix."""
    atomic_write(path, format_transform(t).encode("ascii"))


def parse_transform(text: str, where="transform") -> RigidTransform:
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    if len(rows) != 4:
        raise ParseError(f"expected 4 rows, found {len(rows)}", where)
    try:
        m = np.array([[float(v) for v in row] for row in rows])
    except ValueError:
        raise ParseError("non-numeric entry", where) from None
    if m.shape != (4, 4):
        raise ParseError("each row needs exactly 4 numbers", where)
    if not np.isfinite(m).all():
        raise ParseError("non-finite entry", where)
    if np.abs(m[3] - [0.0, 0.0, 0.0, 1.0]).max() > 1e-12:
        raise ParseError("bottom row must be 0 0 0 1", f"{where}, line 4")
    try:
        return RigidTransform.from_matrix(m)
    except ParamError as exc:
        raise ParseError(str(exc), where) from None


def load_transform(path) -> RigidTransform:
    raw = _read_bytes(path)
    return parse_transform(raw.decode("ascii", errors="replace"), str(path))


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=True) + "\n"


def save_json(obj, path):
    atomic_write(path, dumps_json(obj).encode("utf-8"))


def load_json(path):
    raw = _read_bytes(path)
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", f"line {exc.lineno}") from None
