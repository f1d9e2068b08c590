"""JSON formats: validation diagnostics and save/load round trips."""

import json

import pytest

from attnmask.boxes import Box
from attnmask.coco_io import (
    CocoFormatError,
    detections_to_list,
    gt_to_dict,
    load_detections,
    load_gt,
    parse_detections,
    parse_gt,
    save_json,
)
from attnmask.metrics import Detection


def _gt_doc():
    return {
        "images": [{"id": 0, "width": 64, "height": 48}],
        "categories": [{"id": 1, "name": "disk"}],
        "annotations": [
            {"id": 1, "image_id": 0, "category_id": 1, "bbox": [4.0, 6.0, 10.0, 8.0]},
            {"id": 2, "image_id": 0, "category_id": 1, "bbox": [20, 20, 5, 5], "iscrowd": 1},
        ],
    }


def test_parse_gt_happy_path():
    gt = parse_gt(_gt_doc())
    assert gt.images == {0: (64, 48)}
    assert gt.categories == {1: "disk"}
    assert len(gt.records) == 2
    r = gt.records[0]
    assert (r.box.x1, r.box.y1, r.box.w, r.box.h) == (4.0, 6.0, 10.0, 8.0)
    assert not r.iscrowd and gt.records[1].iscrowd


def test_parse_gt_diagnostics_name_the_record():
    doc = _gt_doc()
    del doc["annotations"][1]["bbox"]
    with pytest.raises(CocoFormatError, match=r"annotations\[1\] \(id=2\): missing required field 'bbox'"):
        parse_gt(doc)

    doc = _gt_doc()
    doc["annotations"][0]["image_id"] = 99
    with pytest.raises(CocoFormatError, match=r"annotations\[0\].*unknown image_id 99"):
        parse_gt(doc)

    doc = _gt_doc()
    doc["annotations"][1]["id"] = 1
    with pytest.raises(CocoFormatError, match="duplicate annotation id"):
        parse_gt(doc)

    doc = _gt_doc()
    doc["images"].append({"id": 0, "width": 1, "height": 1})
    with pytest.raises(CocoFormatError, match=r"images\[1\]: duplicate image id 0"):
        parse_gt(doc)

    doc = _gt_doc()
    doc["categories"][0].pop("name")
    with pytest.raises(CocoFormatError, match=r"categories\[0\]: missing required field 'name'"):
        parse_gt(doc)

    with pytest.raises(CocoFormatError, match="must be a JSON object"):
        parse_gt([1, 2, 3])


def test_parse_gt_rejects_bad_boxes():
    doc = _gt_doc()
    doc["annotations"][0]["bbox"] = [0, 0, -1, 5]
    with pytest.raises(CocoFormatError, match="extents must be positive"):
        parse_gt(doc)
    doc["annotations"][0]["bbox"] = [0, 0, 5]
    with pytest.raises(CocoFormatError, match="4-element"):
        parse_gt(doc)


def test_parse_detections_happy_path_and_checks():
    doc = [{"image_id": 0, "category_id": 1, "score": 0.75, "bbox": [1, 2, 3, 4]}]
    dets = parse_detections(doc)
    assert dets[0].score == 0.75 and dets[0].class_id == 1

    with pytest.raises(CocoFormatError, match="must be a JSON array"):
        parse_detections({"a": 1})
    with pytest.raises(CocoFormatError, match=r"detections\[0\]: score must be in \[0,1\]"):
        parse_detections([{**doc[0], "score": 1.2}])
    with pytest.raises(CocoFormatError, match=r"detections\[0\]: unknown category_id 7"):
        parse_detections([{**doc[0], "category_id": 7}], categories={1: "disk"})
    with pytest.raises(CocoFormatError, match=r"detections\[1\]: must be an object"):
        parse_detections([doc[0], 5])


def test_load_reports_file_and_json_errors(tmp_path):
    with pytest.raises(CocoFormatError, match="nope.json"):
        load_gt(str(tmp_path / "nope.json"))
    bad = tmp_path / "bad.json"
    bad.write_text('{"images": [\n  {"id": }\n]}')
    with pytest.raises(CocoFormatError, match="line 2 column"):
        load_gt(str(bad))


def test_round_trip_through_disk(tmp_path):
    gt = parse_gt(_gt_doc())
    gt_path = tmp_path / "gt.json"
    save_json(gt_to_dict(gt), str(gt_path))
    again = load_gt(str(gt_path))
    assert again.images == gt.images and again.categories == gt.categories
    assert [(r.image_id, r.class_id, r.iscrowd) for r in again.records] == [
        (r.image_id, r.class_id, r.iscrowd) for r in gt.records
    ]

    dets = [Detection(image_id=0, class_id=1, box=Box(10.0, 10.0, 4.0, 6.0), score=0.5)]
    det_path = tmp_path / "det.json"
    save_json(detections_to_list(dets), str(det_path))
    again = load_detections(str(det_path), categories={1: "disk"})
    assert again[0].box.w == 4.0 and again[0].box.cy == 10.0

    # emitted files are plain JSON with a trailing newline
    text = det_path.read_text()
    assert text.endswith("\n")
    json.loads(text)
