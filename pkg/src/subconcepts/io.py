"""Binary field files (``DFF1``) and the JSON class-catalog sidecar.

Layout, all little-endian::

    header   magic "DFF1" | version u32 | n u64 | d_seg u32 | d_q u32 | flags u32
    records  n x [position 3*f32 | sigma f32 | seg d_seg*f32 | query d_q*f32 | label i32?]
    rays     (flags bit1) u64 block length, then u32 ray count and per ray:
             origin 3*f32 | direction 3*f32 | count u32 | indices count*u64 | deltas count*f32
    views    (flags bit2) u64 block length, then u32 view count and per view:
             position 3*f32 | count u32 | ray ids count*u32

Label -1 marks a sample without ground truth.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .fieldset import CatalogClass, ClassCatalog, FieldSet, RayIndex, Viewpoint

MAGIC = b"DFF1"
VERSION = 1
HEADER = struct.Struct("<4sIQIII")
FLAG_LABELS = 1
FLAG_RAYS = 2
FLAG_VIEWS = 4


def record_dtype(d_seg: int, d_q: int, labels: bool) -> np.dtype:
    fields = [("position", "<f4", (3,)), ("sigma", "<f4"),
              ("seg", "<f4", (d_seg,)), ("query", "<f4", (d_q,))]
    if labels:
        fields.append(("label", "<i4"))
    return np.dtype(fields)


def expected_size(n: int, d_seg: int, d_q: int, labels: bool = False) -> int:
    """Byte size of a ray-free, view-free file."""
    return HEADER.size + n * record_dtype(d_seg, d_q, labels).itemsize


def _encode_rays(rays) -> bytes:
    parts = [struct.pack("<I", len(rays))]
    for r in rays:
        idx = np.asarray(r.indices, "<u8")
        parts.append(np.asarray(r.origin, "<f4").tobytes())
        parts.append(np.asarray(r.direction, "<f4").tobytes())
        parts.append(struct.pack("<I", idx.size))
        parts.append(idx.tobytes())
        parts.append(np.asarray(r.deltas, "<f4").tobytes())
    return b"".join(parts)


def _encode_views(views) -> bytes:
    parts = [struct.pack("<I", len(views))]
    for v in views:
        ids = np.asarray(v.ray_ids, "<u4")
        parts.append(np.asarray(v.position, "<f4").tobytes())
        parts.append(struct.pack("<I", ids.size))
        parts.append(ids.tobytes())
    return b"".join(parts)


def encode_fieldset(fs: FieldSet) -> bytes:
    has_labels = fs.labels is not None
    flags = (FLAG_LABELS if has_labels else 0) | (FLAG_RAYS if fs.rays else 0) \
        | (FLAG_VIEWS if fs.viewpoints else 0)
    rec = np.empty(fs.n_samples, dtype=record_dtype(fs.d_seg, fs.d_q, has_labels))
    rec["position"] = fs.positions
    rec["sigma"] = fs.sigma
    rec["seg"] = fs.seg
    rec["query"] = fs.query
    if has_labels:
        rec["label"] = fs.labels
    out = [HEADER.pack(MAGIC, VERSION, fs.n_samples, fs.d_seg, fs.d_q, flags), rec.tobytes()]
    for present, encode, items in ((fs.rays, _encode_rays, fs.rays),
                                   (fs.viewpoints, _encode_views, fs.viewpoints)):
        if present:
            block = encode(items)
            out.append(struct.pack("<Q", len(block)))
            out.append(block)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.pos = offset

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated payload reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(s, what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        raw = self.take(dt.itemsize * count, what)
        return np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="))


def _decode_rays(r: _Reader, n: int):
    (count,) = r.unpack("<I", "ray count")
    rays = []
    for _ in range(count):
        start = r.pos
        origin = r.array("<f4", 3, "ray origin")
        direction = r.array("<f4", 3, "ray direction")
        (m,) = r.unpack("<I", "ray sample count")
        idx = r.array("<u8", m, "ray indices").astype(np.int64)
        deltas = r.array("<f4", m, "ray deltas")
        if m and idx.max() >= n:
            raise FormatError("ray references an out-of-range sample", start)
        rays.append(RayIndex(origin, direction, idx, deltas))
    return tuple(rays)


def _decode_views(r: _Reader, n_rays: int):
    (count,) = r.unpack("<I", "view count")
    views = []
    for _ in range(count):
        start = r.pos
        position = r.array("<f4", 3, "view position")
        (m,) = r.unpack("<I", "view ray count")
        ids = r.array("<u4", m, "view ray ids").astype(np.int64)
        if m and ids.max() >= n_rays:
            raise FormatError("viewpoint references an out-of-range ray", start)
        views.append(Viewpoint(position, ids))
    return tuple(views)


def decode_fieldset(buf: bytes, catalog: ClassCatalog | None = None,
                    metadata: dict | None = None, expect_dims=None) -> FieldSet:
    r = _Reader(buf)
    if len(buf) < HEADER.size:
        raise FormatError("file shorter than header", 0)
    magic, version, n, d_seg, d_q, flags = HEADER.unpack(r.take(HEADER.size, "header"))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if expect_dims is not None and tuple(expect_dims) != (d_seg, d_q):
        raise FormatError(f"dimension mismatch: file has {(d_seg, d_q)}, expected "
                          f"{tuple(expect_dims)}", 16)
    dt = record_dtype(d_seg, d_q, bool(flags & FLAG_LABELS))
    start = r.pos
    raw = r.take(dt.itemsize * n, "sample records")
    rec = np.frombuffer(raw, dtype=dt)
    rays = views = None
    if flags & FLAG_RAYS:
        (length,) = r.unpack("<Q", "ray block length")
        block_start = r.pos
        sub = _Reader(r.take(length, "ray block"))
        try:
            rays = _decode_rays(sub, n)
        except FormatError as e:
            raise FormatError(str(e).split(" (at")[0], block_start + (e.offset or 0)) from None
    if flags & FLAG_VIEWS:
        (length,) = r.unpack("<Q", "view block length")
        block_start = r.pos
        sub = _Reader(r.take(length, "view block"))
        try:
            views = _decode_views(sub, len(rays or ()))
        except FormatError as e:
            raise FormatError(str(e).split(" (at")[0], block_start + (e.offset or 0)) from None
    if r.pos != len(buf):
        raise FormatError("trailing bytes after payload", r.pos)
    sigma = np.ascontiguousarray(rec["sigma"], dtype=np.float32)
    if np.any(sigma < 0) or np.any(np.isnan(sigma)):
        raise FormatError("negative or NaN density in sample records", start)
    labels = None
    if flags & FLAG_LABELS:
        labels = np.ascontiguousarray(rec["label"], dtype=np.int32)
        if catalog is not None and len(catalog) and labels.size and labels.max() >= len(catalog):
            raise FormatError("label id outside the class catalog", start)
    return FieldSet(
        positions=np.ascontiguousarray(rec["position"], dtype=np.float32),
        sigma=sigma,
        seg=np.ascontiguousarray(rec["seg"], dtype=np.float32),
        query=np.ascontiguousarray(rec["query"], dtype=np.float32),
        labels=labels,
        rays=rays,
        viewpoints=views,
        catalog=catalog or ClassCatalog(),
        metadata=dict(metadata or {}),
    )


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".catalog.json")


def catalog_to_json(catalog: ClassCatalog, metadata: dict | None = None) -> str:
    doc = {
        "metadata": metadata or {},
        "classes": [{"id": c.id, "name": c.name,
                     "centroid": [float(x) for x in np.asarray(c.centroid, np.float64)]}
                    for c in catalog.classes],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def catalog_from_json(text: str):
    try:
        doc = json.loads(text)
        classes = tuple(CatalogClass(int(c["id"]), str(c["name"]),
                                     np.asarray(c["centroid"], dtype=np.float64))
                        for c in doc.get("classes", []))
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"malformed catalog sidecar: {e}") from None
    return ClassCatalog(classes), dict(doc.get("metadata", {}))


def atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_fieldset(fs: FieldSet, path, *, sidecar: bool = True):
    """Write ``fs`` as DFF1, plus a ``<stem>.catalog.json`` sidecar."""
    path = Path(path)
    atomic_write(path, encode_fieldset(fs))
    if sidecar:
        atomic_write(sidecar_path(path),
                      catalog_to_json(fs.catalog, fs.metadata).encode())


def load_fieldset(path, *, expect_dims=None) -> FieldSet:
    path = Path(path)
    catalog, metadata = None, {}
    side = sidecar_path(path)
    if side.exists():
        catalog, metadata = catalog_from_json(side.read_text())
    return decode_fieldset(path.read_bytes(), catalog, metadata, expect_dims)
