"""PLY point reading and writing.

Reads ``ascii`` and binary files of either endianness, extracting x/y/z from
the ``vertex`` element and skipping everything else (including list properties).
Malformed input raises PlyParseError with the byte offset of the problem.
Writing always produces binary little-endian float32 vertices unless ASCII
output is requested.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import PlyParseError

_SCALAR_CODES = {
    "char": "b", "int8": "b",
    "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h",
    "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i",
    "uint": "I", "uint32": "I",
    "float": "f", "float32": "f",
    "double": "d", "float64": "d",
}


@dataclass
class _Property:
    name: str
    code: str            # struct code for scalars, item code for lists
    count_code: str | None = None

    @property
    def is_list(self) -> bool:
        return self.count_code is not None


@dataclass
class _Element:
    name: str
    count: int
    properties: list[_Property]


def _parse_header(data: bytes):
    """Returns (format, elements, data offset); offsets are absolute bytes."""
    pos = 0
    lines = []
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise PlyParseError("header not terminated by end_header", pos)
        lines.append((pos, data[pos:end].rstrip(b"\r")))
        pos = end + 1
        if lines[-1][1] == b"end_header":
            break
        if len(lines) > 1000:
            raise PlyParseError("header longer than 1000 lines", pos)

    if lines[0][1] != b"ply":
        raise PlyParseError("missing 'ply' magic line", 0)
    fmt = None
    elements: list[_Element] = []
    for offset, raw in lines[1:-1]:
        try:
            text = raw.decode("ascii")
        except UnicodeDecodeError:
            raise PlyParseError("non-ASCII bytes in header", offset) from None
        fields = text.split()
        if not fields or fields[0] == "comment" or fields[0] == "obj_info":
            continue
        if fields[0] == "format":
            if len(fields) != 3 or fields[2] != "1.0":
                raise PlyParseError(f"unsupported format line {text!r}", offset)
            if fields[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise PlyParseError(f"unsupported format {fields[1]!r}", offset)
            fmt = fields[1]
        elif fields[0] == "element":
            if len(fields) != 3:
                raise PlyParseError(f"bad element line {text!r}", offset)
            if not fields[2].isdigit():
                raise PlyParseError(f"element count {fields[2]!r} is not an integer", offset)
            elements.append(_Element(fields[1], int(fields[2]), []))
        elif fields[0] == "property":
            if not elements:
                raise PlyParseError("property before any element", offset)
            if len(fields) == 3:
                code = _SCALAR_CODES.get(fields[1])
                if code is None:
                    raise PlyParseError(f"unknown property type {fields[1]!r}", offset)
                elements[-1].properties.append(_Property(fields[2], code))
            elif len(fields) == 5 and fields[1] == "list":
                count_code = _SCALAR_CODES.get(fields[2])
                item_code = _SCALAR_CODES.get(fields[3])
                if count_code is None or item_code is None or count_code in "fd":
                    raise PlyParseError(f"bad list property {text!r}", offset)
                elements[-1].properties.append(_Property(fields[4], item_code, count_code))
            else:
                raise PlyParseError(f"bad property line {text!r}", offset)
        else:
            raise PlyParseError(f"unknown header keyword {fields[0]!r}", offset)
    if fmt is None:
        raise PlyParseError("header has no format line", 0)
    return fmt, elements, pos


def _vertex_columns(element: _Element, offset: int) -> list[int]:
    cols = []
    for axis in "xyz":
        for i, prop in enumerate(element.properties):
            if prop.name == axis:
                if prop.is_list:
                    raise PlyParseError(f"vertex property {axis!r} is a list", offset)
                cols.append(i)
                break
        else:
            raise PlyParseError(f"vertex element lacks property {axis!r}", offset)
    return cols


def _read_ascii(data: bytes, pos: int, elements: list[_Element]) -> np.ndarray:
    points = None
    for element in elements:
        want = _vertex_columns(element, pos) if element.name == "vertex" else None
        rows = np.empty((element.count, 3)) if want is not None else None
        for row in range(element.count):
            end = data.find(b"\n", pos)
            if end < 0:
                end = len(data)
            if pos >= len(data):
                raise PlyParseError(
                    f"file ends inside element {element.name!r} at row {row}", pos)
            tokens = data[pos:end].split()
            k = 0
            try:
                for i, prop in enumerate(element.properties):
                    if prop.is_list:
                        k += 1 + int(tokens[k])
                    else:
                        if want is not None and i in want:
                            rows[row, want.index(i)] = float(tokens[k])
                        k += 1
            except (IndexError, ValueError):
                raise PlyParseError(
                    f"bad row {row} of element {element.name!r}", pos) from None
            if k != len(tokens):
                raise PlyParseError(
                    f"extra tokens in row {row} of element {element.name!r}", pos)
            pos = end + 1
        if rows is not None:
            points = rows
    if points is None:
        raise PlyParseError("no vertex element in file", 0)
    return points


def _read_binary(data: bytes, pos: int, elements: list[_Element],
                 endian: str) -> np.ndarray:
    points = None
    for element in elements:
        want = _vertex_columns(element, pos) if element.name == "vertex" else None
        fixed = all(not p.is_list for p in element.properties)
        if fixed:
            row_fmt = endian + "".join(p.code for p in element.properties)
            row_size = struct.calcsize(row_fmt)
            total = row_size * element.count
            if pos + total > len(data):
                raise PlyParseError(f"element {element.name!r} truncated", pos)
            if want is not None:
                dtype = np.dtype([(f"f{i}", endian + p.code)
                                  for i, p in enumerate(element.properties)])
                table = np.frombuffer(data, dtype=dtype, count=element.count, offset=pos)
                points = np.column_stack(
                    [table[f"f{c}"].astype(np.float64) for c in want])
            pos += total
        else:
            rows = np.empty((element.count, 3)) if want is not None else None
            for row in range(element.count):
                values = []
                for prop in element.properties:
                    try:
                        if prop.is_list:
                            (count,) = struct.unpack_from(endian + prop.count_code, data, pos)
                            pos += struct.calcsize(prop.count_code)
                            pos += count * struct.calcsize(prop.code)
                            if pos > len(data):
                                raise struct.error
                            values.append(None)
                        else:
                            (v,) = struct.unpack_from(endian + prop.code, data, pos)
                            pos += struct.calcsize(prop.code)
                            values.append(v)
                    except struct.error:
                        raise PlyParseError(
                            f"element {element.name!r} truncated at row {row}", pos) from None
                if rows is not None:
                    rows[row] = [values[c] for c in want]
            if rows is not None:
                points = rows
    if points is None:
        raise PlyParseError("no vertex element in file", 0)
    return points


def read_ply(path: str) -> np.ndarray:
    """Loads the vertex positions of a PLY file as float64 (N, 3)."""
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, elements, pos = _parse_header(data)
    if fmt == "ascii":
        return _read_ascii(data, pos, elements)
    return _read_binary(data, pos, elements, ">" if fmt == "binary_big_endian" else "<")


def write_ply(path: str, points: np.ndarray, ascii_format: bool = False):
    """Writes (N, 3) points as float32 vertices; binary little-endian by default."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise PlyParseError(f"expected (N, 3) points to write, got {pts.shape}")
    kind = "ascii" if ascii_format else "binary_little_endian"
    header = (f"ply\nformat {kind} 1.0\nelement vertex {len(pts)}\n"
              "property float x\nproperty float y\nproperty float z\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if ascii_format:
            for x, y, z in pts:
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n".encode("ascii"))
        else:
            fh.write(pts.astype("<f4").tobytes())
