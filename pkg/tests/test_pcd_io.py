import json
import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lift.errors import FormatError
from lift.network import DetectionBox
from lift.pcd_io import read_binary_cloud, read_text_cloud, write_detections


def pack_records(rows, stride):
    return b"".join(struct.pack(f"<{stride}f", *row) for row in rows)


def test_empty_binary_file(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    cloud = read_binary_cloud(path, stride=5)
    assert len(cloud) == 0
    assert cloud.dropped == 0


def test_single_record_stride5(tmp_path):
    path = tmp_path / "one.bin"
    path.write_bytes(pack_records([(1.0, 2.0, 3.0, 0.5, 7.0)], 5))
    assert path.stat().st_size == 20
    cloud = read_binary_cloud(path, stride=5)
    assert len(cloud) == 1
    assert cloud.point(0) == (1.0, 2.0, 3.0, 0.5)  # ring discarded


def test_length_mismatch_names_byte_count(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 20)
    with pytest.raises(FormatError, match="20"):
        read_binary_cloud(path, stride=4)


def test_nonfinite_records_dropped_and_counted(tmp_path):
    rows = [(1.0, 2.0, 3.0, 0.5), (float("nan"), 0.0, 0.0, 0.0),
            (4.0, 5.0, 6.0, 0.1), (0.0, float("inf"), 0.0, 0.0)]
    path = tmp_path / "nf.bin"
    path.write_bytes(pack_records(rows, 4))
    cloud = read_binary_cloud(path, stride=4)
    assert len(cloud) == 2
    assert cloud.dropped == 2
    assert len(cloud) + cloud.dropped == len(rows)


@given(st.lists(st.tuples(*[st.floats(-1e6, 1e6, width=32)] * 4),
                min_size=0, max_size=50))
def test_binary_round_trip_bit_exact(rows):
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "cloud.bin"
        path.write_bytes(pack_records(rows, 4))
        cloud = read_binary_cloud(path, stride=4)
    expected = np.array(rows, dtype="<f4").reshape(-1, 4)
    assert np.array_equal(cloud.data, expected)


def test_text_cloud_basic(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# header\n1.0 2.0 3.0 0.5\n4.0,5.0,6.0,0.25,99\n\n")
    cloud = read_text_cloud(path)
    assert len(cloud) == 2
    assert cloud.point(1).intensity == 0.25


def test_text_cloud_comment_only(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# header\n")
    assert len(read_text_cloud(path)) == 0


def test_text_cloud_malformed_line_number(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("a b c d\n")
    with pytest.raises(FormatError, match="line 1"):
        read_text_cloud(path)


def _box(score, x=0.0, y=0.0, class_id=0):
    return DetectionBox(class_id=class_id, class_name=f"class_{class_id}",
                        score=score, x=x, y=y, z=0.0, l=1.0, w=1.0, h=1.0, yaw=0.0)


def test_write_detections_empty(tmp_path):
    path = tmp_path / "det.jsonl"
    write_detections([], path)
    assert path.read_bytes() == b""


def test_write_detections_schema(tmp_path):
    path = tmp_path / "det.jsonl"
    write_detections([_box(0.5)], path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1
    record = json.loads(lines[0])
    assert set(record) == {"class_id", "class_name", "score", "x", "y", "z",
                           "l", "w", "h", "yaw"}


def test_write_detections_ordering(tmp_path):
    path = tmp_path / "det.jsonl"
    boxes = [_box(0.5, x=2.0), _box(0.9, x=9.0), _box(0.5, x=1.0)]
    write_detections(boxes, path)
    got = [json.loads(line) for line in path.read_text().splitlines()]
    assert [b["score"] for b in got] == [0.9, 0.5, 0.5]
    assert [b["x"] for b in got] == [9.0, 1.0, 2.0]  # tie broken by ascending x
