"""Point cloud ingestion and detection output.

Binary clouds are flat little-endian float32 records of stride 4
(x, y, z, intensity) or 5 (…, ring); the ring index is discarded.
Detections go out as JSON lines with a deterministic ordering so runs
can be compared byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import FormatError


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float


@dataclass
class PointCloud:
    """Ordered point records plus ingestion bookkeeping.

    data holds float32 rows (x, y, z, intensity) exactly as read;
    order is preserved so downstream truncation stays deterministic.
    dropped counts records removed for non-finite fields.
    """

    data: np.ndarray = field(default_factory=lambda: np.empty((0, 4), dtype=np.float32))
    source_stride: int = 4
    dropped: int = 0

    def __len__(self) -> int:
        return self.data.shape[0]

    def point(self, k: int) -> Point:
        x, y, z, intensity = self.data[k]
        return Point(float(x), float(y), float(z), float(intensity))

    @property
    def points(self):
        return [self.point(k) for k in range(len(self))]


def _keep_finite(rows: np.ndarray, stride: int) -> PointCloud:
    finite = np.isfinite(rows).all(axis=1)
    kept = np.ascontiguousarray(rows[finite])
    return PointCloud(data=kept, source_stride=stride, dropped=int((~finite).sum()))


def read_binary_cloud(path, stride: int = 5) -> PointCloud:
    """Read consecutive little-endian f32 records of the given stride.

    Records with any non-finite retained field (x, y, z, intensity)
    are dropped and counted; a NaN reaching the pooling stages would
    poison whole pillars, so they never pass ingestion.
    """
    if stride not in (4, 5):
        raise FormatError(f"stride must be 4 or 5, got {stride}")
    with open(path, "rb") as f:
        raw = f.read()
    record_bytes = stride * 4
    if len(raw) % record_bytes != 0:
        raise FormatError(
            f"{path}: file length {len(raw)} is not a multiple of {record_bytes} "
            f"(stride {stride} x 4 bytes)"
        )
    rows = np.frombuffer(raw, dtype="<f4").reshape(-1, stride)[:, :4]
    return _keep_finite(rows, stride)


def read_text_cloud(path) -> PointCloud:
    """Read whitespace- or comma-separated decimal records, >=4 fields per line.

    Blank lines and '#' comments are skipped; extra fields beyond the
    fourth are ignored. Malformed lines report their 1-based number.
    """
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.replace(",", " ").split()
            if len(fields) < 4:
                raise FormatError(f"{path}: line {lineno}: expected >=4 fields, got {len(fields)}")
            try:
                rows.append([float(v) for v in fields[:4]])
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: non-numeric field") from None
    if not rows:
        return PointCloud(data=np.empty((0, 4), dtype=np.float32), source_stride=4)
    return _keep_finite(np.asarray(rows, dtype=np.float32), 4)


def read_cloud(path, stride: int = 5) -> PointCloud:
    """Dispatch on extension: .txt/.csv/.xyz are text, anything else binary."""
    if str(path).lower().endswith((".txt", ".csv", ".xyz")):
        return read_text_cloud(path)
    return read_binary_cloud(path, stride=stride)


def detection_sort_key(box):
    return (-box.score, box.x, box.y, box.class_id)


def write_detections(boxes, path) -> None:
    """Write one JSON object per detection, UTF-8, LF line endings.

    Lines are ordered by descending score, ties broken by ascending
    (x, y, class_id), so identical inputs diff byte-identically.
    Floats use Python's shortest round-trip repr (full precision).
    """
    ordered = sorted(boxes, key=detection_sort_key)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for b in ordered:
            record = {
                "class_id": int(b.class_id),
                "class_name": b.class_name,
                "score": float(b.score),
                "x": float(b.x),
                "y": float(b.y),
                "z": float(b.z),
                "l": float(b.l),
                "w": float(b.w),
                "h": float(b.h),
                "yaw": float(b.yaw),
            }
            f.write(json.dumps(record) + "\n")
