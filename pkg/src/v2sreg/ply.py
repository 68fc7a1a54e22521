"""Minimal ASCII PLY 1.0 reader/writer for point clouds and triangle meshes.

Vertices carry x, y, z as 32-bit floats plus optional extra float properties
(nx/ny/nz normals, dx/dy/dz displacement channels, ...). Faces are index
lists. Coordinates are interpreted as millimetres.
"""

import numpy as np

from .errors import FormatError, InvalidInput

_SCALAR_TYPES = {
    "char", "uchar", "int8", "uint8", "short", "ushort", "int16", "uint16",
    "int", "uint", "int32", "uint32", "float", "float32", "double", "float64",
}
_FLOAT_TYPES = {"float", "float32", "double", "float64"}


class _Lines:
    """Line iterator over raw bytes that tracks the byte offset of each line."""

    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def next(self):
        if self.pos >= len(self.blob):
            return None, self.pos
        start = self.pos
        end = self.blob.find(b"\n", start)
        if end == -1:
            end = len(self.blob)
            self.pos = end
        else:
            self.pos = end + 1
        return self.blob[start:end].rstrip(b"\r"), start


def read_ply(path):
    """Parse an ASCII PLY file.

    Returns ``(vertices, faces, vertex_props)`` where vertices is (N,3) float64,
    faces is (F,3) int64 (possibly empty) and vertex_props maps extra property
    names to float64 arrays. Raises FormatError with the byte offset of the
    first malformed line.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    lines = _Lines(blob)

    line, off = lines.next()
    if line is None or line.strip() != b"ply":
        raise FormatError("missing 'ply' magic", offset=off)
    line, off = lines.next()
    if line is None or line.split() != [b"format", b"ascii", b"1.0"]:
        raise FormatError("only 'format ascii 1.0' is supported", offset=off)

    # header: ordered list of (element_name, count, [(prop_name, kind), ...])
    elements = []
    while True:
        line, off = lines.next()
        if line is None:
            raise FormatError("unexpected end of header", offset=off)
        tok = line.split()
        if not tok or tok[0] == b"comment":
            continue
        if tok[0] == b"end_header":
            break
        if tok[0] == b"element":
            if len(tok) != 3:
                raise FormatError("malformed element declaration", offset=off)
            try:
                count = int(tok[2])
            except ValueError:
                raise FormatError("element count is not an integer", offset=off)
            elements.append([tok[1].decode(), count, []])
        elif tok[0] == b"property":
            if not elements:
                raise FormatError("property before any element", offset=off)
            if tok[1] == b"list":
                if len(tok) != 5:
                    raise FormatError("malformed list property", offset=off)
                elements[-1][2].append((tok[4].decode(), "list"))
            else:
                if len(tok) != 3 or tok[1].decode() not in _SCALAR_TYPES:
                    raise FormatError("unsupported property declaration", offset=off)
                elements[-1][2].append((tok[2].decode(), tok[1].decode()))
        else:
            raise FormatError(f"unknown header keyword {tok[0].decode()!r}", offset=off)

    vertices = None
    vertex_props = {}
    faces = np.zeros((0, 3), dtype=np.int64)

    for name, count, props in elements:
        if name == "vertex":
            names = [p[0] for p in props]
            if any(kind == "list" for _, kind in props):
                raise FormatError("list properties on vertices are unsupported", offset=off)
            for axis in ("x", "y", "z"):
                if axis not in names:
                    raise FormatError(f"vertex element lacks property {axis!r}", offset=off)
            cols = np.empty((count, len(names)), dtype=np.float64)
            for i in range(count):
                line, loff = lines.next()
                if line is None:
                    raise FormatError("file truncated inside vertex data", offset=loff)
                vals = line.split()
                if len(vals) != len(names):
                    raise FormatError("wrong number of vertex values", offset=loff)
                try:
                    cols[i] = [float(v) for v in vals]
                except ValueError:
                    raise FormatError("non-numeric vertex value", offset=loff)
            # honor declared 32-bit storage so write/read round trips exactly
            for j, (_, kind) in enumerate(props):
                if kind in ("float", "float32"):
                    cols[:, j] = cols[:, j].astype(np.float32)
            vertices = cols[:, [names.index(a) for a in ("x", "y", "z")]]
            for j, pname in enumerate(names):
                if pname not in ("x", "y", "z"):
                    vertex_props[pname] = cols[:, j].copy()
        elif name == "face":
            rows = []
            for i in range(count):
                line, loff = lines.next()
                if line is None:
                    raise FormatError("file truncated inside face data", offset=loff)
                vals = line.split()
                try:
                    n = int(vals[0])
                    idx = [int(v) for v in vals[1:]]
                except (ValueError, IndexError):
                    raise FormatError("malformed face row", offset=loff)
                if n != len(idx):
                    raise FormatError("face index count mismatch", offset=loff)
                if n != 3:
                    raise FormatError("only triangular faces are supported", offset=loff)
                rows.append(idx)
            faces = np.asarray(rows, dtype=np.int64) if rows else faces
        else:
            # skip unknown elements line by line
            for _ in range(count):
                line, loff = lines.next()
                if line is None:
                    raise FormatError(f"file truncated inside element {name!r}", offset=loff)

    if vertices is None:
        raise FormatError("no vertex element found", offset=len(blob))
    if not np.isfinite(vertices).all():
        raise FormatError("non-finite vertex coordinate", offset=0)
    if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise FormatError("face index out of range", offset=0)
    return vertices, faces, vertex_props


def _fmt(x):
    # %.9g preserves float32 values exactly through an ASCII round trip
    return format(float(np.float32(x)), ".9g")


def write_ply(path, vertices, faces=None, vertex_props=None):
    """Write an ASCII PLY file; coordinates and extra properties stored as float32."""
    verts = np.asarray(vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise InvalidInput("vertices must be (N, 3)")
    vertex_props = vertex_props or {}
    for pname, arr in vertex_props.items():
        if len(arr) != len(verts):
            raise InvalidInput(f"vertex property {pname!r} length mismatch")
    faces = np.asarray(faces, dtype=np.int64) if faces is not None else np.zeros((0, 3), np.int64)

    out = ["ply", "format ascii 1.0", f"element vertex {len(verts)}"]
    out += [f"property float {a}" for a in ("x", "y", "z")]
    out += [f"property float {p}" for p in vertex_props]
    if len(faces):
        out.append(f"element face {len(faces)}")
        out.append("property list uchar int vertex_indices")
    out.append("end_header")

    prop_cols = [np.asarray(vertex_props[p], dtype=np.float64) for p in vertex_props]
    for i, v in enumerate(verts):
        row = [_fmt(v[0]), _fmt(v[1]), _fmt(v[2])] + [_fmt(col[i]) for col in prop_cols]
        out.append(" ".join(row))
    for f in faces:
        out.append(f"3 {f[0]} {f[1]} {f[2]}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(out) + "\n")
