"""Binary tensor container ("TNT1") and Wavefront OBJ import/export.

The container is a flat sequence of named tensors:

    magic  b"TNT1"
    chunk* :
        u32  name length (little endian)
        ...  name bytes (UTF-8)
        u8   dtype tag   (0 = float32, 1 = int32)
        u32  rank
        u32  dims[rank]
        ...  payload, row-major little endian

Chunk names must be unique within a file.  All writes go through a
temp-file-then-rename so interrupted runs never leave torn artifacts.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"TNT1"

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<i4")}


class ContainerError(ValueError):
    """Malformed container file; carries the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def atomic_write_bytes(path, payload):
    """Write bytes to `path` via a temp file in the same directory + rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def _coerce(name, array):
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        return arr.astype("<f4")
    if arr.dtype.kind in "iub":
        return arr.astype("<i4")
    raise TypeError(f"chunk {name!r}: unsupported dtype {arr.dtype}")


def container_bytes(tensors):
    """Serialize a name -> array mapping; insertion order fixes the layout."""
    parts = [MAGIC]
    seen = set()
    for name, array in tensors.items():
        if name in seen:
            raise ValueError(f"duplicate chunk name {name!r}")
        seen.add(name)
        arr = _coerce(name, array)
        tag = 0 if arr.dtype.kind == "f" else 1
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def write_container(path, tensors):
    atomic_write_bytes(path, container_bytes(tensors))


def parse_container(blob):
    """Inverse of `container_bytes`; raises ContainerError on malformed input."""
    if blob[:4] != MAGIC:
        raise ContainerError("bad magic", 0)
    out = {}
    pos = 4
    total = len(blob)

    def need(count, what):
        if pos + count > total:
            raise ContainerError(f"truncated {what}", pos)

    while pos < total:
        need(4, "name length")
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need(name_len, "name")
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        need(5, "header")
        tag, rank = struct.unpack_from("<BI", blob, pos)
        pos += 5
        if tag not in _DTYPE_TAGS:
            raise ContainerError(f"unknown dtype tag {tag}", pos - 5)
        need(4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = count * 4
        need(nbytes, f"payload of {name!r}")
        if name in out:
            raise ContainerError(f"duplicate chunk {name!r}", pos)
        arr = np.frombuffer(blob, dtype=_DTYPE_TAGS[tag], count=count, offset=pos)
        out[name] = arr.reshape(dims).copy()
        pos += nbytes
    return out


def read_container(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_container(blob)


def export_obj(vertices, faces, path):
    """ASCII OBJ: `v x y z` with 6 decimals, `f i j k` 1-based."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    lines = ["# exported by tailornet"]
    for x, y, z in vertices:
        lines.append(f"v {x:.6f} {y:.6f} {z:.6f}")
    for i, j, k in faces + 1:
        lines.append(f"f {i} {j} {k}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_obj(path):
    """Parse vertices and triangular faces back out of an OBJ file."""
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            tokens = line.split()
            if not tokens or tokens[0] == "#":
                continue
            if tokens[0] == "v":
                verts.append([float(t) for t in tokens[1:4]])
            elif tokens[0] == "f":
                faces.append([int(t.split("/")[0]) - 1 for t in tokens[1:4]])
    verts = np.array(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    return verts, faces
