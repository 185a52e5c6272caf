"""COCO-style annotation and detection files, and the float-array manifest.

Annotation file::

    {"images": [{"id", "width", "height"}],
     "annotations": [{"id", "image_id", "bbox": [x, y, w, h], "category_id": 1}],
     "categories": [{"id": 1, "name": "object"}]}

Detection file: a JSON array of ``{"image_id", "category_id", "bbox", "score"}``.

Floats are written with Python's shortest round-trip repr, so a save/load
cycle reproduces every coordinate bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

import numpy as np

from .geometry import BBox

CATEGORY_ID = 1
CATEGORIES = [{"id": CATEGORY_ID, "name": "object"}]


class FormatError(ValueError):
    """A file failed to parse or validate; the message names the file and field."""


@dataclass
class AnnotationSet:
    images: dict[int, tuple[int, int]] = field(default_factory=dict)  # id -> (width, height)
    boxes: dict[int, list[BBox]] = field(default_factory=dict)


def _read_json(path) -> Any:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, allow_nan=False) + "\n", encoding="utf-8")


def _number(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise FormatError(f"{where}: expected a number, got {v!r}")
    v = float(v)
    if not math.isfinite(v):
        raise FormatError(f"{where}: non-finite value {v!r}")
    return v


def _int(v, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise FormatError(f"{where}: expected an integer, got {v!r}")
    return v


def _bbox(v, where: str) -> BBox:
    if not isinstance(v, list) or len(v) != 4:
        raise FormatError(f"{where}: expected [x, y, w, h], got {v!r}")
    x, y, w, h = (_number(c, f"{where}[{i}]") for i, c in enumerate(v))
    if w <= 0:
        raise FormatError(f"{where}[2]: width must be > 0, got {w!r}")
    if h <= 0:
        raise FormatError(f"{where}[3]: height must be > 0, got {h!r}")
    return BBox(x, y, w, h)


def _field(obj, key: str, where: str):
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected an object, got {type(obj).__name__}")
    if key not in obj:
        raise FormatError(f"{where}: missing field {key!r}")
    return obj[key]


def annotations_to_json(images: Mapping[int, tuple[int, int]], boxes: Mapping[int, Iterable[BBox]]) -> dict:
    out_images = [{"id": i, "width": w, "height": h} for i, (w, h) in sorted(images.items())]
    anns = []
    for image_id in sorted(images):
        for b in boxes.get(image_id, ()):
            anns.append({
                "id": len(anns) + 1,
                "image_id": image_id,
                "bbox": list(b.as_tuple()),
                "category_id": CATEGORY_ID,
            })
    return {"images": out_images, "annotations": anns, "categories": CATEGORIES}


def save_annotations(path, scenes) -> None:
    images = {s.image_id: (s.width, s.height) for s in scenes}
    boxes = {s.image_id: s.gt_boxes for s in scenes}
    _write_json(path, annotations_to_json(images, boxes))


def load_annotations(path) -> AnnotationSet:
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: top level must be an object")
    images_raw = _field(doc, "images", str(path))
    anns_raw = _field(doc, "annotations", str(path))
    if not isinstance(images_raw, list) or not isinstance(anns_raw, list):
        raise FormatError(f"{path}: 'images' and 'annotations' must be arrays")
    out = AnnotationSet()
    for k, im in enumerate(images_raw):
        where = f"{path}: images[{k}]"
        image_id = _int(_field(im, "id", where), f"{where}.id")
        w = _int(_field(im, "width", where), f"{where}.width")
        h = _int(_field(im, "height", where), f"{where}.height")
        if w <= 0 or h <= 0:
            raise FormatError(f"{where}: width and height must be positive")
        if image_id in out.images:
            raise FormatError(f"{where}.id: duplicate image id {image_id}")
        out.images[image_id] = (w, h)
        out.boxes[image_id] = []
    for k, a in enumerate(anns_raw):
        where = f"{path}: annotations[{k}]"
        image_id = _int(_field(a, "image_id", where), f"{where}.image_id")
        if image_id not in out.images:
            raise FormatError(f"{where}.image_id: unknown image id {image_id}")
        cat = _int(_field(a, "category_id", where), f"{where}.category_id")
        if cat != CATEGORY_ID:
            raise FormatError(f"{where}.category_id: expected {CATEGORY_ID}, got {cat}")
        out.boxes[image_id].append(_bbox(_field(a, "bbox", where), f"{where}.bbox"))
    return out


@dataclass(frozen=True)
class DetectionRecord:
    image_id: int
    box: BBox
    score: float


def detections_to_json(dets: Mapping[int, Iterable]) -> list:
    out = []
    for image_id in sorted(dets):
        for d in dets[image_id]:
            out.append({
                "image_id": image_id,
                "category_id": CATEGORY_ID,
                "bbox": list(d.box.as_tuple()),
                "score": float(d.score),
            })
    return out


def save_detections(path, dets: Mapping[int, Iterable]) -> None:
    """``dets`` maps image id to objects with ``.box`` and ``.score``."""
    for image_id, ds in dets.items():
        for d in ds:
            if not 0.0 <= d.score <= 1.0:
                raise FormatError(f"image {image_id}: score {d.score!r} outside [0, 1]")
    _write_json(path, detections_to_json(dets))


def load_detections(path) -> dict[int, list[DetectionRecord]]:
    doc = _read_json(path)
    if not isinstance(doc, list):
        raise FormatError(f"{path}: top level must be an array of detections")
    out: dict[int, list[DetectionRecord]] = {}
    for k, d in enumerate(doc):
        where = f"{path}: [{k}]"
        image_id = _int(_field(d, "image_id", where), f"{where}.image_id")
        cat = _int(_field(d, "category_id", where), f"{where}.category_id")
        if cat != CATEGORY_ID:
            raise FormatError(f"{where}.category_id: expected {CATEGORY_ID}, got {cat}")
        box = _bbox(_field(d, "bbox", where), f"{where}.bbox")
        score = _number(_field(d, "score", where), f"{where}.score")
        if not 0.0 <= score <= 1.0:
            raise FormatError(f"{where}.score: {score!r} outside [0, 1]")
        out.setdefault(image_id, []).append(DetectionRecord(image_id, box, score))
    return out


# -- float-array manifests (detector / selector parameters) ------------------

def save_manifest(path, fmt: str, config: dict, arrays: Mapping[str, np.ndarray],
                  extra: Optional[dict] = None) -> None:
    doc = {
        "format": fmt,
        "config": config,
        "arrays": {
            name: {"shape": list(a.shape), "values": [float(v) for v in np.asarray(a, float).ravel()]}
            for name, a in arrays.items()
        },
    }
    if extra:
        doc.update(extra)
    _write_json(path, doc)


def load_manifest(path, fmt: str) -> tuple[dict, dict[str, np.ndarray], dict]:
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: top level must be an object")
    got = doc.get("format")
    if got != fmt:
        raise FormatError(f"{path}: format tag {got!r}, expected {fmt!r}")
    config = _field(doc, "config", str(path))
    arrays_raw = _field(doc, "arrays", str(path))
    arrays = {}
    for name, spec in arrays_raw.items():
        where = f"{path}: arrays.{name}"
        shape = _field(spec, "shape", where)
        values = _field(spec, "values", where)
        if not isinstance(values, list):
            raise FormatError(f"{where}.values: expected an array")
        vals = np.array([_number(v, f"{where}.values[{i}]") for i, v in enumerate(values)], dtype=float)
        if int(np.prod(shape)) != vals.size:
            raise FormatError(f"{where}: shape {shape} does not match {vals.size} values")
        arrays[name] = vals.reshape(shape)
    rest = {k: v for k, v in doc.items() if k not in ("format", "config", "arrays")}
    return config, arrays, rest
