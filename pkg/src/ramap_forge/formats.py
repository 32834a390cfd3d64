"""Binary raster files (RAMF / CNFM) and annotation CSV interchange.

All binary fields are little-endian. Header::

    magic[4] version:u16 n_range:u32 n_azimuth:u32 r_max:f32 theta_max:f32 raw_max:f32

CNFM adds ``n_channels:u32`` before the payload. Payload is f32, range-major.
"""
from __future__ import annotations

import csv
import io
import math
import os
import struct
from collections import defaultdict
from pathlib import Path

import numpy as np

from .core import Annotation, ClassCatalog, ConfMap, RadarGeometry, RAMap
from .errors import DomainError, FormatError

RAMAP_MAGIC = b"RAMF"
CONFMAP_MAGIC = b"CNFM"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sHIIfff")
_U32 = struct.Struct("<I")


def _pack_header(magic: bytes, geometry: RadarGeometry, raw_max: float) -> bytes:
    return _HEADER.pack(magic, FORMAT_VERSION, geometry.n_range, geometry.n_azimuth,
                        geometry.r_max, geometry.theta_max, raw_max)


def _unpack_header(buf: bytes, magic: bytes, path) -> tuple[RadarGeometry, float]:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes)")
    got, version, n_r, n_a, r_max, theta_max, raw_max = _HEADER.unpack_from(buf)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        geometry = RadarGeometry(n_r, n_a, r_max, theta_max)
    except DomainError as exc:
        raise FormatError(f"{path}: invalid geometry in header: {exc}") from None
    return geometry, raw_max


def _payload(buf: bytes, offset: int, count: int, path) -> np.ndarray:
    expected = offset + 4 * count
    if len(buf) != expected:
        raise FormatError(f"{path}: size mismatch, expected {expected} bytes, got {len(buf)}")
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{path}: non-finite values in payload")
    return values.astype(np.float64)


def ramap_bytes(ramap: RAMap) -> bytes:
    return (_pack_header(RAMAP_MAGIC, ramap.geometry, ramap.raw_max_amplitude)
            + np.ascontiguousarray(ramap.grid, dtype="<f4").tobytes())


def confmap_bytes(confmap: ConfMap) -> bytes:
    return (_pack_header(CONFMAP_MAGIC, confmap.geometry, 1.0)
            + _U32.pack(confmap.n_channels)
            + np.ascontiguousarray(confmap.channels, dtype="<f4").tobytes())


def write_ramap(ramap: RAMap, path) -> None:
    Path(path).write_bytes(ramap_bytes(ramap))


def read_ramap(path) -> RAMap:
    buf = Path(path).read_bytes()
    geometry, raw_max = _unpack_header(buf, RAMAP_MAGIC, path)
    values = _payload(buf, _HEADER.size, geometry.n_range * geometry.n_azimuth, path)
    try:
        return RAMap(values.reshape(geometry.shape), geometry, raw_max)
    except DomainError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_confmap(confmap: ConfMap, path) -> None:
    Path(path).write_bytes(confmap_bytes(confmap))


def read_confmap(path) -> ConfMap:
    buf = Path(path).read_bytes()
    geometry, _ = _unpack_header(buf, CONFMAP_MAGIC, path)
    if len(buf) < _HEADER.size + 4:
        raise FormatError(f"{path}: truncated channel count")
    (n_ch,) = _U32.unpack_from(buf, _HEADER.size)
    values = _payload(buf, _HEADER.size + 4, n_ch * geometry.n_range * geometry.n_azimuth, path)
    try:
        return ConfMap(values.reshape((n_ch,) + geometry.shape), geometry)
    except DomainError as exc:
        raise FormatError(f"{path}: {exc}") from None


def read_any_map(path) -> RAMap | ConfMap:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == RAMAP_MAGIC:
        return read_ramap(path)
    if magic == CONFMAP_MAGIC:
        return read_confmap(path)
    raise FormatError(f"{path}: unrecognised magic {magic!r}")


# --- annotation CSV ---------------------------------------------------------

ANNOTATION_HEADER = ["frame_id", "range_m", "azimuth_rad", "class_name"]


def annotations_csv(frames: dict[str, list[Annotation]], catalog: ClassCatalog,
                    scores: dict[str, list[float]] | None = None) -> str:
    """Serialize per-frame annotations; ``scores`` adds a trailing score column."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(ANNOTATION_HEADER + (["score"] if scores is not None else []))
    for frame_id, anns in frames.items():
        for k, ann in enumerate(anns):
            row = [frame_id, repr(float(ann.range)), repr(float(ann.azimuth)), catalog[ann.class_id].name]
            if scores is not None:
                row.append(repr(float(scores[frame_id][k])))
            writer.writerow(row)
    return out.getvalue()


def write_annotations(frames, catalog, path, scores=None) -> None:
    Path(path).write_text(annotations_csv(frames, catalog, scores), encoding="utf-8")


def parse_annotation_rows(path, catalog: ClassCatalog):
    """Yield ``(line_no, frame_id, range_m, azimuth, class_id, score)``.

    Accepts polar columns or Cartesian ``x_m,y_m`` columns (x lateral, y
    boresight). ``score`` is None when the column is absent.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: missing header line") from None
        cols = {name: i for i, name in enumerate(header)}
        polar = {"range_m", "azimuth_rad"} <= cols.keys()
        cartesian = {"x_m", "y_m"} <= cols.keys()
        if "frame_id" not in cols or "class_name" not in cols or not (polar or cartesian):
            raise FormatError(f"{path}:1: header must contain frame_id, class_name and "
                              f"range_m,azimuth_rad or x_m,y_m; got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                if polar:
                    r = float(row[cols["range_m"]])
                    theta = float(row[cols["azimuth_rad"]])
                else:
                    x = float(row[cols["x_m"]])
                    y = float(row[cols["y_m"]])
                    r, theta = math.hypot(x, y), math.atan2(x, y)
                score = float(row[cols["score"]]) if "score" in cols else None
            except ValueError as exc:
                raise FormatError(f"{path}:{line_no}: {exc}") from None
            if not (math.isfinite(r) and math.isfinite(theta)):
                raise FormatError(f"{path}:{line_no}: non-finite coordinate")
            name = row[cols["class_name"]].strip()
            try:
                class_id = catalog.index(name)
            except DomainError as exc:
                raise FormatError(f"{path}:{line_no}: {exc}") from None
            yield line_no, row[cols["frame_id"]].strip(), r, theta, class_id, score


def ingest_annotations(path, geometry: RadarGeometry, catalog: ClassCatalog):
    """Read an annotation CSV into ``{frame_id: [Annotation, ...]}``.

    Records outside the field of view are dropped; returns ``(frames, n_dropped)``.
    Frame order follows first appearance in the file.
    """
    frames: dict[str, list[Annotation]] = defaultdict(list)
    dropped = 0
    for _, frame_id, r, theta, class_id, _ in parse_annotation_rows(path, catalog):
        frames[frame_id]  # keep frames whose records were all dropped
        if not (0 < r <= geometry.r_max) or abs(theta) > geometry.theta_max:
            dropped += 1
            continue
        frames[frame_id].append(Annotation(r, theta, class_id))
    return dict(frames), dropped


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
