"""Reading and writing the COCO-style JSON formats used by the evaluator.

Ground truth is an object with `images`, `annotations`, and `categories`
arrays; detections are a flat array of records. Boxes use the COCO
top-left `[x, y, w, h]` pixel convention and are converted to center
form internally. Validation errors always name the offending record so
CLI diagnostics can point at the exact array index and id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .boxes import Box
from .metrics import Detection, GTRecord

__all__ = [
    "CocoFormatError",
    "GroundTruth",
    "load_gt",
    "load_detections",
    "parse_gt",
    "parse_detections",
    "gt_to_dict",
    "detections_to_list",
    "save_json",
]


class CocoFormatError(ValueError):
    """A structural or semantic problem in a COCO JSON document."""


@dataclass
class GroundTruth:
    records: list[GTRecord]
    images: dict[int, tuple[int, int]] = field(default_factory=dict)
    categories: dict[int, str] = field(default_factory=dict)


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise CocoFormatError(f"{where}: missing required field {key!r}")
    return obj[key]


def _box_from_coco(bbox, where: str) -> Box:
    if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
        raise CocoFormatError(f"{where}: bbox must be a 4-element [x, y, w, h] array, got {bbox!r}")
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise CocoFormatError(f"{where}: bbox extents must be positive, got w={w}, h={h}")
    return Box.from_coco((x, y, w, h))


def parse_gt(doc) -> GroundTruth:
    """Validate a parsed ground-truth document and convert to GTRecords."""
    if not isinstance(doc, dict):
        raise CocoFormatError(f"ground truth must be a JSON object, got {type(doc).__name__}")
    images: dict[int, tuple[int, int]] = {}
    for i, img in enumerate(doc.get("images", [])):
        where = f"images[{i}]"
        iid = int(_require(img, "id", where))
        if iid in images:
            raise CocoFormatError(f"{where}: duplicate image id {iid}")
        images[iid] = (int(_require(img, "width", where)), int(_require(img, "height", where)))
    categories: dict[int, str] = {}
    for i, cat in enumerate(doc.get("categories", [])):
        where = f"categories[{i}]"
        cid = int(_require(cat, "id", where))
        if cid in categories:
            raise CocoFormatError(f"{where}: duplicate category id {cid}")
        categories[cid] = str(_require(cat, "name", where))
    records: list[GTRecord] = []
    seen_ann: set[int] = set()
    for i, ann in enumerate(doc.get("annotations", [])):
        where = f"annotations[{i}]"
        aid = int(_require(ann, "id", where))
        where = f"annotations[{i}] (id={aid})"
        if aid in seen_ann:
            raise CocoFormatError(f"{where}: duplicate annotation id")
        seen_ann.add(aid)
        img_id = int(_require(ann, "image_id", where))
        if images and img_id not in images:
            raise CocoFormatError(f"{where}: unknown image_id {img_id}")
        cat_id = int(_require(ann, "category_id", where))
        if categories and cat_id not in categories:
            raise CocoFormatError(f"{where}: unknown category_id {cat_id}")
        box = _box_from_coco(_require(ann, "bbox", where), where)
        records.append(
            GTRecord(image_id=img_id, class_id=cat_id, box=box, iscrowd=bool(ann.get("iscrowd", 0)))
        )
    return GroundTruth(records=records, images=images, categories=categories)


def parse_detections(doc, categories: dict[int, str] | None = None) -> list[Detection]:
    """Validate a parsed detection array; optionally check category ids."""
    if not isinstance(doc, list):
        raise CocoFormatError(f"detections must be a JSON array, got {type(doc).__name__}")
    dets: list[Detection] = []
    for i, rec in enumerate(doc):
        where = f"detections[{i}]"
        if not isinstance(rec, dict):
            raise CocoFormatError(f"{where}: must be an object, got {rec!r}")
        img_id = int(_require(rec, "image_id", where))
        cat_id = int(_require(rec, "category_id", where))
        if categories is not None and cat_id not in categories:
            raise CocoFormatError(f"{where}: unknown category_id {cat_id}")
        score = float(_require(rec, "score", where))
        if not 0.0 <= score <= 1.0:
            raise CocoFormatError(f"{where}: score must be in [0,1], got {score}")
        box = _box_from_coco(_require(rec, "bbox", where), where)
        dets.append(Detection(image_id=img_id, class_id=cat_id, box=box, score=score))
    return dets


def _load_json(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as e:
        raise CocoFormatError(f"{path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise CocoFormatError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e


def load_gt(path: str) -> GroundTruth:
    return parse_gt(_load_json(path))


def load_detections(path: str, categories: dict[int, str] | None = None) -> list[Detection]:
    return parse_detections(_load_json(path), categories)


def gt_to_dict(gt: GroundTruth) -> dict:
    """Serialize ground truth back to the COCO object layout."""
    return {
        "images": [{"id": i, "width": w, "height": h} for i, (w, h) in sorted(gt.images.items())],
        "annotations": [
            {
                "id": i + 1,
                "image_id": r.image_id,
                "category_id": r.class_id,
                "bbox": [r.box.x1, r.box.y1, r.box.w, r.box.h],
                "area": r.box.area,
                "iscrowd": int(r.iscrowd),
            }
            for i, r in enumerate(gt.records)
        ],
        "categories": [{"id": c, "name": n} for c, n in sorted(gt.categories.items())],
    }


def detections_to_list(dets: list[Detection]) -> list[dict]:
    return [
        {
            "image_id": d.image_id,
            "category_id": d.class_id,
            "bbox": [d.box.x1, d.box.y1, d.box.w, d.box.h],
            "score": d.score,
        }
        for d in dets
    ]


def save_json(obj, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")
