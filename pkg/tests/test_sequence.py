import cv2
import numpy as np
import pytest

from mfgtrack.box import BoundingBox
from mfgtrack.errors import SequenceFormatError
from mfgtrack.sequence import (
    GROUNDTRUTH_FILE,
    MASK_DIR,
    THERMAL_DIR,
    VISIBLE_DIR,
    format_boxes,
    load_sequence,
    looks_like_corners,
    parse_box_lines,
    read_boxes,
    save_sequence,
    write_boxes,
)


def _write_frames(directory, count=3, size=(20, 24)):
    for folder in (VISIBLE_DIR, THERMAL_DIR):
        (directory / folder).mkdir(parents=True)
        for index in range(count):
            image = np.full((*size, 3), 40 * index, dtype=np.uint8)
            cv2.imwrite(str(directory / folder / f"{index:04d}.jpg"), image)


def test_parse_separators():
    rows = parse_box_lines("1,2,3,4\n5\t6\t7\t8\n\n9 10  11 12\n1.5, 2.5, 3, 4\n")
    np.testing.assert_array_equal(
        rows, [[1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12], [1.5, 2.5, 3, 4]]
    )


def test_parse_names_bad_line():
    with pytest.raises(SequenceFormatError, match="line 2"):
        parse_box_lines("1,2,3,4\n1,2,x,4\n")
    with pytest.raises(SequenceFormatError, match="line 1"):
        parse_box_lines("1,2,3\n")


def _write_masks(directory, count):
    (directory / MASK_DIR).mkdir()
    for index in range(count):
        cv2.imwrite(str(directory / MASK_DIR / f"{index:04d}.png"), np.zeros((20, 24), np.uint8))


def test_load_masks(tmp_path):
    _write_frames(tmp_path)
    _write_masks(tmp_path, 3)
    (tmp_path / GROUNDTRUTH_FILE).write_text("1,2,5,6\n2,2,5,6\n3,2,5,6\n")
    record = load_sequence(tmp_path)
    assert [p.name for p in record.masks] == ["0000.png", "0001.png", "0002.png"]
    assert record.masks[0].parent == tmp_path / MASK_DIR


def test_mask_count_mismatch(tmp_path):
    _write_frames(tmp_path)
    _write_masks(tmp_path, 2)
    (tmp_path / GROUNDTRUTH_FILE).write_text("1,2,5,6\n2,2,5,6\n3,2,5,6\n")
    with pytest.raises(SequenceFormatError, match="2 masks for 3 frames"):
        load_sequence(tmp_path)


def test_corner_heuristic():
    assert looks_like_corners(np.array([[10, 10, 18, 18], [2, 2, 6, 6]]), (20, 24))
    assert not looks_like_corners(np.array([[2, 2, 6, 6]]), (20, 24))
    assert not looks_like_corners(np.array([[10, 10, 5, 5]]), (20, 24))


def test_load_directory(tmp_path):
    _write_frames(tmp_path)
    (tmp_path / GROUNDTRUTH_FILE).write_text("1,2,5,6\n2\t2\t5\t6\n3 2 5 6\n")
    (tmp_path / "tags.txt").write_text("occlusion\n")
    record = load_sequence(tmp_path)
    assert len(record) == 3
    assert record.image_size == (20, 24)
    assert record.boxes[1] == BoundingBox(2, 2, 5, 6)
    assert record.tags == ("occlusion",)
    assert record.name == tmp_path.name


def test_load_corners(tmp_path):
    _write_frames(tmp_path)
    (tmp_path / GROUNDTRUTH_FILE).write_text("10,10,18,18\n11,10,19,18\n12,10,20,18\n")
    record = load_sequence(tmp_path)
    assert record.boxes[0] == BoundingBox(10, 10, 8, 8)
    forced = load_sequence(tmp_path, box_format="xywh")
    assert forced.boxes[0] == BoundingBox(10, 10, 18, 18)


def test_missing_folder(tmp_path):
    (tmp_path / VISIBLE_DIR).mkdir()
    (tmp_path / GROUNDTRUTH_FILE).write_text("1,2,3,4\n")
    with pytest.raises(SequenceFormatError, match=THERMAL_DIR):
        load_sequence(tmp_path)


def test_count_mismatch(tmp_path):
    _write_frames(tmp_path)
    (tmp_path / GROUNDTRUTH_FILE).write_text("1,2,5,6\n2,2,5,6\n")
    with pytest.raises(SequenceFormatError, match="2 boxes for 3"):
        load_sequence(tmp_path)


def test_unparsable_groundtruth(tmp_path):
    _write_frames(tmp_path)
    (tmp_path / GROUNDTRUTH_FILE).write_text("1,2,5,6\n2,2,5,6\nnan?,1,1,1\n")
    with pytest.raises(SequenceFormatError, match="line 3"):
        load_sequence(tmp_path)


def test_result_file_keeps_floats(tmp_path):
    boxes = [BoundingBox(0.1, 1 / 3, 10.25, 7.0), BoundingBox(2, 3, 4, 5)]
    write_boxes(tmp_path / "out.txt", boxes)
    assert read_boxes(tmp_path / "out.txt") == boxes
    assert format_boxes(boxes).count("\n") == 2


def test_saved_sequence_loads_back(easy_record, tmp_path):
    save_sequence(easy_record, tmp_path / "seq")
    record = load_sequence(tmp_path / "seq", box_format="xywh")
    assert record.boxes == easy_record.boxes
    assert record.image_size == easy_record.image_size
    assert len(record) == len(easy_record)
    np.testing.assert_array_equal(
        record.frames[4].visible.to_numpy(), easy_record.frames[4].visible.to_numpy()
    )
