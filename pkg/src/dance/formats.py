"""On-disk formats: XYZ text, PLY (ascii and binary little-endian), checkpoints,
and the dataset directory layout.

All point coordinates are stored at 32-bit precision; reads and writes round
trip bit-identically at that precision. Checkpoints are a small container:
magic, version, a JSON manifest (tensor shapes/offsets plus the run config),
then the raw float32 little-endian payload.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import ParseError
from .geometry import PointCloud, Role
from .training import Sample

# ---------------------------------------------------------------------------
# XYZ
# ---------------------------------------------------------------------------


def read_xyz(path) -> PointCloud:
    pts = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cols = line.split()
            if len(cols) < 3:
                raise ParseError(f"{path}:{lineno}: expected 3 coordinates, got {len(cols)}")
            try:
                pts.append([np.float32(cols[0]), np.float32(cols[1]), np.float32(cols[2])])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: malformed float") from None
    return PointCloud(np.array(pts, dtype=np.float64).reshape(-1, 3))


def write_xyz(path, cloud: PointCloud):
    pts = cloud.points.astype(np.float32)
    with open(path, "w") as fh:
        for x, y, z in pts:
            # 9 significant digits round trip any float32 exactly
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_SIZES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4, "double": 8, "float64": 8,
}
_PLY_NP = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}


def _parse_ply_header(fh, path):
    """Returns (format, elements) where elements is [(name, count, [props])]."""
    def next_line(lineno):
        raw = fh.readline()
        if not raw:
            raise ParseError(f"{path}:{lineno}: unexpected end of header")
        return raw.decode("ascii", errors="replace").strip(), lineno + 1

    lineno = 1
    line, lineno = next_line(lineno)
    if line != "ply":
        raise ParseError(f"{path}:1: not a PLY file")
    fmt = None
    elements = []
    while True:
        line, lineno = next_line(lineno)
        if line == "end_header":
            break
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if len(parts) != 3 or parts[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"{path}:{lineno - 1}: unsupported format {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno - 1}: malformed element line")
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError(f"{path}:{lineno - 1}: property before any element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[-1]))
            else:
                if parts[1] not in _PLY_SIZES:
                    raise ParseError(f"{path}:{lineno - 1}: unknown property type {parts[1]!r}")
                elements[-1][2].append((parts[1], parts[-1]))
        else:
            raise ParseError(f"{path}:{lineno - 1}: unrecognized header line {line!r}")
    if fmt is None:
        raise ParseError(f"{path}: header missing a format line")
    return fmt, elements, lineno


def read_ply(path) -> PointCloud:
    """Read the vertex element's x/y/z; extra scalar properties are skipped."""
    with open(path, "rb") as fh:
        fmt, elements, lineno = _parse_ply_header(fh, path)
        vertex = next((e for e in elements if e[0] == "vertex"), None)
        if vertex is None:
            raise ParseError(f"{path}: no vertex element")
        _, count, props = vertex
        names = [p[1] for p in props]
        if any(p[0] == "list" for p in props):
            raise ParseError(f"{path}: list properties on vertices are unsupported")
        try:
            cix = [names.index(k) for k in ("x", "y", "z")]
        except ValueError:
            raise ParseError(f"{path}: vertex element lacks x/y/z properties") from None
        for k in cix:
            if props[k][0] not in _PLY_NP:
                raise ParseError(f"{path}: coordinate property must be float typed")

        if fmt == "ascii":
            rows = np.empty((count, 3), dtype=np.float64)
            for i in range(count):
                line = fh.readline()
                if not line:
                    raise ParseError(f"{path}:{lineno + i}: missing vertex row {i}")
                cols = line.decode("ascii", errors="replace").split()
                if len(cols) < len(props):
                    raise ParseError(f"{path}:{lineno + i}: short vertex row {i}")
                try:
                    rows[i] = [np.float32(cols[k]) for k in cix]
                except ValueError:
                    raise ParseError(f"{path}:{lineno + i}: malformed float in row {i}") from None
            return PointCloud(rows)

        dtype = np.dtype([(f"p{k}", _PLY_NP.get(p[0]) or f"V{_PLY_SIZES[p[0]]}")
                          for k, p in enumerate(props)])
        buf = fh.read(count * dtype.itemsize)
        if len(buf) != count * dtype.itemsize:
            raise ParseError(f"{path}: truncated vertex data "
                             f"({len(buf)} of {count * dtype.itemsize} bytes)")
        rec = np.frombuffer(buf, dtype=dtype)
        return PointCloud(np.stack([rec[f"p{k}"].astype(np.float64) for k in cix], axis=1))


def write_ply(path, cloud: PointCloud, binary=True):
    pts = np.ascontiguousarray(cloud.points.astype("<f4"))
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(pts.tobytes())
        else:
            for x, y, z in pts:
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n".encode("ascii"))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"DNCE"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict, config: dict):
    """tensors: name -> array-like; stored float32 LE in sorted-name order."""
    names = sorted(tensors)
    arrays = [np.asarray(np.asarray(tensors[n], dtype=np.float64), dtype="<f4") for n in names]
    manifest = {"config": config, "tensors": {}}
    offset = 0
    for n, a in zip(names, arrays):
        manifest["tensors"][n] = {"shape": list(a.shape), "offset": offset}
        offset += a.size * 4
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path):
    """Returns (tensors: name -> float64 array, config dict)."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head != MAGIC:
            raise ParseError(f"{path}: bad magic {head!r}")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        try:
            manifest = json.loads(fh.read(blob_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"{path}: malformed manifest: {exc}") from None
        payload = fh.read()
    total = sum(int(np.prod(t["shape"])) for t in manifest["tensors"].values())
    if len(payload) != total * 4:
        raise ParseError(f"{path}: payload holds {len(payload)} bytes, expected {total * 4}")
    tensors = {}
    for name, meta in manifest["tensors"].items():
        size = int(np.prod(meta["shape"]))
        off = meta["offset"]
        flat = np.frombuffer(payload[off:off + size * 4], dtype="<f4")
        tensors[name] = flat.astype(np.float64).reshape(meta["shape"])
    return tensors, manifest["config"]


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def save_dataset(dirpath, samples):
    """One subdirectory per sample: partial.ply, complete.ply, meta.json."""
    os.makedirs(dirpath, exist_ok=True)
    for i, s in enumerate(samples):
        sub = os.path.join(dirpath, f"sample_{i:05d}")
        os.makedirs(sub, exist_ok=True)
        write_ply(os.path.join(sub, "partial.ply"), s.partial)
        write_ply(os.path.join(sub, "complete.ply"), s.complete)
        with open(os.path.join(sub, "meta.json"), "w") as fh:
            json.dump({"label": s.label, "category": s.category_name,
                       "sample_id": s.sample_id, "shape_params": s.shape_params},
                      fh, sort_keys=True, indent=1)
            fh.write("\n")


def load_dataset(dirpath):
    subs = sorted(d for d in os.listdir(dirpath)
                  if os.path.isdir(os.path.join(dirpath, d)) and d.startswith("sample_"))
    if not subs:
        raise ParseError(f"{dirpath}: no sample_* directories found")
    samples = []
    for d in subs:
        sub = os.path.join(dirpath, d)
        with open(os.path.join(sub, "meta.json")) as fh:
            meta = json.load(fh)
        partial = read_ply(os.path.join(sub, "partial.ply"))
        complete = read_ply(os.path.join(sub, "complete.ply"))
        partial.role = Role.INPUT
        complete.role = Role.GROUND_TRUTH
        samples.append(Sample(
            partial=partial, complete=complete,
            label=int(meta["label"]), category_name=meta.get("category", ""),
            sample_id=meta.get("sample_id", d), shape_params=meta.get("shape_params", {})))
    return samples
