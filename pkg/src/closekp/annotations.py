"""COCO-style keypoint datasets and detection results.

Ground truth and detections share one in-memory representation for
keypoints: a float64 ``(N, 3)`` array of ``(u, v, c)`` rows, where ``c`` is
the visibility flag (0 absent, 1 labeled but occluded, 2 visible) for
annotations and a confidence for detections.

Fields that this module does not interpret (``iscrowd``, ``segmentation``,
Halpe auxiliaries, ``info``/``categories`` at the top level...) are kept in
an ``extra`` dict and written back unchanged.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, NamedTuple

import numpy as np

from .errors import (
    IntegrityError,
    LayoutMismatchError,
    ParseError,
    UnsupportedGroupError,
    ValidationError,
)
from .layouts import KeypointLayout

__all__ = [
    "Keypoint", "ImageRecord", "PersonAnnotation", "Dataset", "DetectionRecord",
    "parse_dataset", "write_dataset", "parse_detections", "write_detections",
    "load_dataset", "save_dataset", "load_detections", "save_detections",
    "group_slice",
]


class Keypoint(NamedTuple):
    u: float
    v: float
    c: float


def _frozen_keypoints(kps) -> np.ndarray:
    arr = np.array(kps, dtype=np.float64).reshape(-1, 3)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageRecord:
    image_id: Any
    width: int
    height: int
    file_name: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"image {self.image_id!r}: size must be at least 1x1")

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (self.image_id, self.width, self.height, self.file_name, self.extra) == (
            other.image_id, other.width, other.height, other.file_name, other.extra)


@dataclass(frozen=True, eq=False)
class PersonAnnotation:
    image_id: Any
    bbox: tuple[float, float, float, float]
    keypoints: np.ndarray
    area: float | None = None
    id: Any = None
    category_id: Any = 1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "bbox", tuple(float(x) for x in self.bbox))
        object.__setattr__(self, "keypoints", _frozen_keypoints(self.keypoints))
        if len(self.bbox) != 4:
            raise ValidationError("bbox must have 4 components")
        if not (self.bbox[2] > 0 and self.bbox[3] > 0):
            raise ValidationError(f"annotation {self.id!r}: bbox width and height must be > 0")

    @property
    def visibility(self) -> np.ndarray:
        return self.keypoints[:, 2]

    def num_visible(self, indices=None) -> int:
        vis = self.visibility if indices is None else self.visibility[list(indices)]
        return int(np.count_nonzero(vis > 0))

    def __eq__(self, other):
        if not isinstance(other, PersonAnnotation):
            return NotImplemented
        return (
            (self.image_id, self.bbox, self.area, self.id, self.category_id, self.extra)
            == (other.image_id, other.bbox, other.area, other.id, other.category_id, other.extra)
            and np.array_equal(self.keypoints, other.keypoints)
        )


@dataclass(frozen=True, eq=False)
class DetectionRecord:
    image_id: Any
    keypoints: np.ndarray
    score: float
    category_id: Any = 1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "keypoints", _frozen_keypoints(self.keypoints))
        object.__setattr__(self, "score", float(self.score))

    def __eq__(self, other):
        if not isinstance(other, DetectionRecord):
            return NotImplemented
        return (
            (self.image_id, self.score, self.category_id, self.extra)
            == (other.image_id, other.score, other.category_id, other.extra)
            and np.array_equal(self.keypoints, other.keypoints)
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    images: tuple[ImageRecord, ...]
    annotations: tuple[PersonAnnotation, ...]
    layout: KeypointLayout
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        index = {}
        for img in self.images:
            if img.image_id in index:
                raise ValidationError(f"duplicate image id {img.image_id!r}")
            index[img.image_id] = img
        object.__setattr__(self, "_index", index)
        for i, ann in enumerate(self.annotations):
            if ann.image_id not in index:
                raise IntegrityError(
                    f"annotations[{i}] references unknown image id {ann.image_id!r}")
            if ann.keypoints.shape[0] != self.layout.total:
                raise LayoutMismatchError(
                    f"annotations[{i}] has {ann.keypoints.shape[0]} keypoints, "
                    f"layout {self.layout.name} expects {self.layout.total}")
            _check_in_bounds(ann, index[ann.image_id], i)

    def image(self, image_id) -> ImageRecord:
        return self._index[image_id]

    def annotations_by_image(self) -> dict[Any, list[PersonAnnotation]]:
        out: dict[Any, list[PersonAnnotation]] = {img.image_id: [] for img in self.images}
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return out

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.layout.name == other.layout.name
            and self.images == other.images
            and self.annotations == other.annotations
            and self.extra == other.extra
        )


def _check_in_bounds(ann: PersonAnnotation, img: ImageRecord, i: int):
    kps = ann.keypoints
    vis = kps[:, 2] > 0
    if not vis.any():
        return
    u, v = kps[vis, 0], kps[vis, 1]
    if (u < 0).any() or (v < 0).any() or (u > img.width).any() or (v > img.height).any():
        raise ValidationError(
            f"annotations[{i}]: visible keypoint outside image {img.image_id!r} "
            f"({img.width}x{img.height})")


# -- decoding helpers -------------------------------------------------------

def _decode(document) -> Any:
    if isinstance(document, (bytes, bytearray, memoryview)):
        raw = bytes(document)
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"invalid UTF-8: {exc.reason}", exc.start) from None
    elif isinstance(document, str):
        text = document
    else:
        raise ParseError(f"expected bytes or str, got {type(document).__name__}")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ParseError(f"malformed JSON: {exc.msg}", offset) from None
    except RecursionError:
        raise ParseError("document nested too deeply") from None


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _numbers(value, where: str, length: int | None = None) -> list[float]:
    if not isinstance(value, list) or not all(_is_number(x) for x in value):
        raise ValidationError(f"{where}: expected a list of finite numbers")
    if length is not None and len(value) != length:
        raise ValidationError(f"{where}: expected {length} numbers, got {len(value)}")
    return value


def _number(value, where: str) -> float:
    if not _is_number(value):
        raise ValidationError(f"{where}: expected a finite number")
    return value


def _keypoint_array(value, layout: KeypointLayout, where: str) -> np.ndarray:
    _numbers(value, where)
    if len(value) != 3 * layout.total:
        raise LayoutMismatchError(
            f"{where}: {len(value)} values, layout {layout.name} needs {3 * layout.total}")
    arr = np.asarray(value, dtype=np.float64).reshape(-1, 3)
    if (arr[:, 2] < 0).any():
        raise ValidationError(f"{where}: negative visibility/confidence")
    return arr


def _object(value, where: str) -> dict:
    if not isinstance(value, dict):
        raise ValidationError(f"{where}: expected an object")
    return value


def _hashable_id(value, where: str):
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise ValidationError(f"{where}: id must be an integer or string")
    return value


_IMAGE_KEYS = ("id", "width", "height", "file_name")
_ANN_KEYS = ("id", "image_id", "category_id", "bbox", "area", "keypoints")
_DET_KEYS = ("image_id", "category_id", "keypoints", "score")


def _parse_image(obj, i) -> ImageRecord:
    where = f"images[{i}]"
    obj = _object(obj, where)
    if "id" not in obj or "width" not in obj or "height" not in obj:
        raise ValidationError(f"{where}: requires id, width and height")
    width, height = obj["width"], obj["height"]
    if not (isinstance(width, int) and isinstance(height, int)) or isinstance(width, bool) \
            or isinstance(height, bool):
        raise ValidationError(f"{where}: width/height must be integers")
    file_name = obj.get("file_name", "")
    if not isinstance(file_name, str):
        raise ValidationError(f"{where}: file_name must be a string")
    return ImageRecord(
        image_id=_hashable_id(obj["id"], where),
        width=width,
        height=height,
        file_name=file_name,
        extra={k: v for k, v in obj.items() if k not in _IMAGE_KEYS},
    )


def _parse_annotation(obj, i, layout) -> PersonAnnotation:
    where = f"annotations[{i}]"
    obj = _object(obj, where)
    for key in ("image_id", "bbox", "keypoints"):
        if key not in obj:
            raise ValidationError(f"{where}: missing {key!r}")
    area = obj.get("area")
    if area is not None:
        area = _number(area, f"{where}.area")
        if area < 0:
            raise ValidationError(f"{where}.area: must be >= 0")
    ann_id = obj.get("id")
    if ann_id is not None:
        _hashable_id(ann_id, f"{where}.id")
    return PersonAnnotation(
        image_id=_hashable_id(obj["image_id"], f"{where}.image_id"),
        bbox=tuple(_numbers(obj["bbox"], f"{where}.bbox", 4)),
        keypoints=_keypoint_array(obj["keypoints"], layout, f"{where}.keypoints"),
        area=area,
        id=ann_id,
        category_id=obj.get("category_id", 1),
        extra={k: v for k, v in obj.items() if k not in _ANN_KEYS},
    )


def parse_dataset(document, layout: KeypointLayout) -> Dataset:
    """Decode a COCO keypoint annotation document.

    Raises:
        ParseError: the bytes are not valid UTF-8 JSON (carries a byte offset).
        LayoutMismatchError: an annotation's keypoint array is not ``3 * layout.total`` long.
        IntegrityError: an annotation references a missing image.
        ValidationError: any other structural problem.
    """
    doc = _object(_decode(document), "document")
    images = doc.get("images", [])
    anns = doc.get("annotations", [])
    if not isinstance(images, list) or not isinstance(anns, list):
        raise ValidationError("images and annotations must be lists")
    return Dataset(
        images=[_parse_image(obj, i) for i, obj in enumerate(images)],
        annotations=[_parse_annotation(obj, i, layout) for i, obj in enumerate(anns)],
        layout=layout,
        extra={k: v for k, v in doc.items() if k not in ("images", "annotations")},
    )


# -- encoding ---------------------------------------------------------------

def _num(x: float):
    x = float(x)
    return int(x) if x.is_integer() and abs(x) < 2**53 else x


def _flat(kps: np.ndarray) -> list:
    return [_num(x) for x in kps.reshape(-1)]


def _dumps(doc) -> bytes:
    return json.dumps(doc, ensure_ascii=False, separators=(",", ":"), allow_nan=False).encode("utf-8")


def image_to_dict(img: ImageRecord) -> dict:
    return {"id": img.image_id, "width": img.width, "height": img.height,
            "file_name": img.file_name, **img.extra}


def annotation_to_dict(ann: PersonAnnotation) -> dict:
    out = {}
    if ann.id is not None:
        out["id"] = ann.id
    out["image_id"] = ann.image_id
    out["category_id"] = ann.category_id
    out["bbox"] = [_num(x) for x in ann.bbox]
    if ann.area is not None:
        out["area"] = _num(ann.area)
    out["keypoints"] = _flat(ann.keypoints)
    out.update(ann.extra)
    return out


def write_dataset(dataset: Dataset) -> bytes:
    """Encode a dataset as compact UTF-8 COCO JSON.

    Integral values are written as integers; other floats use the shortest
    repr that round-trips exactly.
    """
    doc = dict(dataset.extra)
    doc["images"] = [image_to_dict(img) for img in dataset.images]
    doc["annotations"] = [annotation_to_dict(ann) for ann in dataset.annotations]
    return _dumps(doc)


def parse_detections(document, layout: KeypointLayout) -> list[DetectionRecord]:
    doc = _decode(document)
    if not isinstance(doc, list):
        raise ValidationError("results document must be a JSON list")
    out = []
    for i, obj in enumerate(doc):
        where = f"results[{i}]"
        obj = _object(obj, where)
        for key in ("image_id", "keypoints", "score"):
            if key not in obj:
                raise ValidationError(f"{where}: missing {key!r}")
        out.append(DetectionRecord(
            image_id=_hashable_id(obj["image_id"], f"{where}.image_id"),
            keypoints=_keypoint_array(obj["keypoints"], layout, f"{where}.keypoints"),
            score=_number(obj["score"], f"{where}.score"),
            category_id=obj.get("category_id", 1),
            extra={k: v for k, v in obj.items() if k not in _DET_KEYS},
        ))
    return out


def detection_to_dict(det: DetectionRecord) -> dict:
    return {"image_id": det.image_id, "category_id": det.category_id,
            "keypoints": _flat(det.keypoints), "score": _num(det.score), **det.extra}


def write_detections(dets: Iterable[DetectionRecord]) -> bytes:
    return _dumps([detection_to_dict(d) for d in dets])


def load_dataset(path, layout: KeypointLayout) -> Dataset:
    return parse_dataset(Path(path).read_bytes(), layout)


def save_dataset(path, dataset: Dataset) -> None:
    Path(path).write_bytes(write_dataset(dataset))


def load_detections(path, layout: KeypointLayout) -> list[DetectionRecord]:
    return parse_detections(Path(path).read_bytes(), layout)


def save_detections(path, dets: Iterable[DetectionRecord]) -> None:
    Path(path).write_bytes(write_detections(dets))


def group_slice(keypoints: np.ndarray, layout: KeypointLayout, group: str) -> np.ndarray:
    """Rows of ``keypoints`` belonging to ``group``, in layout order.

    Main groups (and contiguous parts) come back as views.
    """
    keypoints = np.asarray(keypoints)
    if keypoints.shape[0] != layout.total:
        raise LayoutMismatchError(
            f"{keypoints.shape[0]} keypoints do not match layout {layout.name}")
    if group in layout.group_ranges:
        start, stop = layout.group_ranges[group]
        return keypoints[start:stop]
    if group in layout.parts:
        idx = layout.parts[group]
        if idx and list(idx) == list(range(idx[0], idx[-1] + 1)):
            return keypoints[idx[0]: idx[-1] + 1]
        return keypoints[list(idx)]
    raise UnsupportedGroupError(f"layout {layout.name} has no group {group!r}")
