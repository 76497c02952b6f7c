"""Close-proximity crop generation (Basic and Headless subsets).

Every annotated person is cut out of its source image along the annotated
bounding box; keypoints are shifted into crop coordinates. The Headless
variant additionally clips the crop on the head side so that the head is no
longer in view.

Pixel grid: integer crop bounds ``[x0, x1) x [y0, y1)`` are obtained by
flooring the box origin and ceiling its far edge. A keypoint survives the
crop when it was visible and its translated position lies in
``[0, width] x [0, height]``; all other keypoints become ``(0, 0, 0)``.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .annotations import Dataset, ImageRecord, PersonAnnotation
from .errors import ConfigError, DegenerateCropError, NoBodyCenterError
from .layouts import KeypointLayout

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CropConfig:
    min_area: float = 20_000
    head_margin: float = 0
    padding: float = 0
    # Treat the face group as part of the head when cutting Headless crops.
    cut_face: bool = True
    # Skip crowd annotations and persons without any labeled keypoint.
    require_keypoints: bool = True

    def __post_init__(self):
        for name in ("min_area", "head_margin", "padding"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value >= 0):
                raise ConfigError(f"{name} must be a finite number >= 0, got {value!r}")


Region = tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)


def crop_region(bbox, padding: float, width: int, height: int) -> Region:
    bx, by, bw, bh = bbox
    x0 = max(0, math.floor(bx - padding))
    y0 = max(0, math.floor(by - padding))
    x1 = min(width, math.ceil(bx + bw + padding))
    y1 = min(height, math.ceil(by + bh + padding))
    if x1 <= x0 or y1 <= y0:
        raise DegenerateCropError(f"bbox {tuple(bbox)} does not intersect {width}x{height} image")
    return x0, y0, x1, y1


def remap_keypoints(kps: np.ndarray, region: Region, drop=()) -> np.ndarray:
    """Translate keypoints into ``region`` coordinates.

    Keypoints that were not visible, fall outside the region or are listed
    in ``drop`` are zeroed.
    """
    x0, y0, x1, y1 = region
    out = np.array(kps, dtype=np.float64, copy=True)
    out[:, 0] -= x0
    out[:, 1] -= y0
    keep = (
        (out[:, 2] > 0)
        & (out[:, 0] >= 0) & (out[:, 0] <= x1 - x0)
        & (out[:, 1] >= 0) & (out[:, 1] <= y1 - y0)
    )
    if len(drop):
        keep[list(drop)] = False
    out[~keep] = 0.0
    return out


def _cropped(image: np.ndarray, ann: PersonAnnotation, region: Region, drop=()):
    x0, y0, x1, y1 = region
    kps = remap_keypoints(ann.keypoints, region, drop)
    extra = {k: v for k, v in ann.extra.items() if k != "segmentation"}
    if "num_keypoints" in extra:
        extra["num_keypoints"] = int(np.count_nonzero(kps[:, 2] > 0))
    w, h = x1 - x0, y1 - y0
    new_ann = PersonAnnotation(
        image_id=ann.image_id,
        bbox=(0.0, 0.0, float(w), float(h)),
        keypoints=kps,
        area=float(w * h),
        id=ann.id,
        category_id=ann.category_id,
        extra=extra,
    )
    return image[y0:y1, x0:x1].copy(), new_ann


def crop_person(image: np.ndarray, ann: PersonAnnotation, cfg: CropConfig = CropConfig()):
    """Cut one person out of ``image``; returns ``(crop, annotation)``."""
    height, width = image.shape[:2]
    region = crop_region(ann.bbox, cfg.padding, width, height)
    return _cropped(image, ann, region)


def find_body_center(ann: PersonAnnotation, layout: KeypointLayout) -> tuple[float, float]:
    """Mean position of the visible body keypoints that are not on the head."""
    if "body" not in layout.group_ranges:
        raise NoBodyCenterError(f"layout {layout.name} has no body group")
    head = set(layout.head_indices)
    idx = [i for i in layout.indices("body") if i not in head]
    kps = ann.keypoints[idx]
    kps = kps[kps[:, 2] > 0]
    if len(kps) == 0:
        raise NoBodyCenterError(f"annotation {ann.id!r} has no visible non-head body keypoint")
    return float(kps[:, 0].mean()), float(kps[:, 1].mean())


def head_keypoint_indices(layout: KeypointLayout, cfg: CropConfig) -> tuple[int, ...]:
    idx = tuple(layout.head_indices)
    if cfg.cut_face and "face" in layout.group_ranges:
        idx += layout.indices("face")
    return idx


def headless_region(ann: PersonAnnotation, layout: KeypointLayout, cfg: CropConfig,
                    width: int, height: int) -> Region | None:
    """Crop bounds with the head side clipped away, or None without a visible head."""
    head_idx = head_keypoint_indices(layout, cfg)
    head = ann.keypoints[list(head_idx)] if head_idx else np.empty((0, 3))
    head = head[head[:, 2] > 0]
    if len(head) == 0:
        return None
    bx, by = find_body_center(ann, layout)
    hx, hy = head[:, 0].mean(), head[:, 1].mean()
    x0, y0, x1, y1 = crop_region(ann.bbox, cfg.padding, width, height)
    dx, dy = bx - hx, by - hy
    m = cfg.head_margin
    if abs(dy) >= abs(dx):
        if dy >= 0:
            y0 = max(y0, math.ceil(head[:, 1].max() + m))
        else:
            y1 = min(y1, math.floor(head[:, 1].min() - m))
    else:
        if dx > 0:
            x0 = max(x0, math.ceil(head[:, 0].max() + m))
        else:
            x1 = min(x1, math.floor(head[:, 0].min() - m))
    if x1 <= x0 or y1 <= y0:
        raise DegenerateCropError(f"annotation {ann.id!r}: nothing left after removing the head")
    return x0, y0, x1, y1


def make_headless(image: np.ndarray, ann: PersonAnnotation, layout: KeypointLayout,
                  cfg: CropConfig = CropConfig()):
    """Crop of ``ann`` with the head cut off, or None when no head keypoint is visible.

    The cut is axis aligned. Its axis is the dominant component of the vector
    from the head centroid to the body center; the crop edge is placed at the
    side of the head extent nearest the body, shifted by ``cfg.head_margin``
    towards the body.
    """
    height, width = image.shape[:2]
    region = headless_region(ann, layout, cfg, width, height)
    if region is None:
        return None
    return _cropped(image, ann, region, drop=head_keypoint_indices(layout, cfg))


ImageSource = Callable[[ImageRecord], np.ndarray]


class DirectoryImages:
    """Loads ``root / image.file_name`` with Pillow."""

    def __init__(self, root):
        self.root = Path(root)

    def __call__(self, image: ImageRecord) -> np.ndarray:
        from PIL import Image

        with Image.open(self.root / image.file_name) as im:
            if im.mode not in ("L", "RGB", "RGBA", "I;16"):
                im = im.convert("RGB")
            return np.asarray(im)


@dataclass
class CropItem:
    image: ImageRecord
    annotation: PersonAnnotation
    pixels: np.ndarray
    provenance: dict


@dataclass
class SubsetResult:
    basic: Dataset
    headless: Dataset
    basic_items: list[CropItem]
    headless_items: list[CropItem]
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def basic_provenance(self) -> list[dict]:
        return [item.provenance for item in self.basic_items]

    @property
    def headless_provenance(self) -> list[dict]:
        return [item.provenance for item in self.headless_items]


_COUNT_KEYS = (
    "persons", "skipped_no_keypoints", "unreadable_images", "unreadable_persons",
    "degenerate", "basic_accepted", "basic_rejected_area",
    "headless_accepted", "headless_rejected_area", "headless_no_head",
    "headless_no_body_center", "headless_degenerate",
)


def _process_image(img_pos, img, anns, images, layout, cfg, headless):
    counts = dict.fromkeys(_COUNT_KEYS, 0)
    basic, hl = [], []
    todo = []
    for ann_pos, ann in anns:
        counts["persons"] += 1
        if cfg.require_keypoints and (ann.num_visible() == 0 or ann.extra.get("iscrowd")):
            counts["skipped_no_keypoints"] += 1
            continue
        todo.append((ann_pos, ann))
    if not todo:
        return basic, hl, counts
    try:
        pixels = images(img)
    except (OSError, ValueError) as exc:
        log.warning("skipping unreadable image %r: %s", img.file_name, exc)
        counts["unreadable_images"] += 1
        counts["unreadable_persons"] += len(todo)
        return basic, hl, counts

    for ann_pos, ann in todo:
        key = (img_pos, ann_pos)
        source = {
            "source_image_id": img.image_id,
            "source_annotation_id": ann.id if ann.id is not None else ann_pos,
            "source_file_name": img.file_name,
        }
        try:
            crop, new_ann = crop_person(pixels, ann, cfg)
        except DegenerateCropError as exc:
            log.warning("%s", exc)
            counts["degenerate"] += 1
            continue
        if crop.shape[0] * crop.shape[1] >= cfg.min_area:
            basic.append((key, crop, new_ann, source))
        else:
            counts["basic_rejected_area"] += 1
        if not headless:
            continue
        try:
            res = make_headless(pixels, ann, layout, cfg)
        except NoBodyCenterError:
            counts["headless_no_body_center"] += 1
            continue
        except DegenerateCropError:
            counts["headless_degenerate"] += 1
            continue
        if res is None:
            counts["headless_no_head"] += 1
            continue
        crop, new_ann = res
        if crop.shape[0] * crop.shape[1] >= cfg.min_area:
            hl.append((key, crop, new_ann, source))
        else:
            counts["headless_rejected_area"] += 1
    return basic, hl, counts


def _assemble(entries, source: Dataset):
    items = []
    for new_id, (_, crop, ann, src) in enumerate(sorted(entries, key=lambda e: e[0]), start=1):
        h, w = crop.shape[:2]
        file_name = f"{new_id:06d}.png"
        rec = ImageRecord(new_id, w, h, file_name)
        new_ann = PersonAnnotation(
            image_id=new_id, bbox=ann.bbox, keypoints=ann.keypoints, area=ann.area,
            id=new_id, category_id=ann.category_id, extra=ann.extra,
        )
        prov = {"image_id": new_id, "file_name": file_name, **src}
        items.append(CropItem(rec, new_ann, crop, prov))
    ds = Dataset(
        images=[it.image for it in items],
        annotations=[it.annotation for it in items],
        layout=source.layout,
        extra={k: v for k, v in source.extra.items() if k in ("info", "licenses", "categories")},
    )
    return ds, items


def generate_subsets(dataset: Dataset, images: ImageSource, cfg: CropConfig = CropConfig(),
                     headless: bool = True, jobs: int = 1) -> SubsetResult:
    """Build the Basic and Headless crop datasets.

    Output ids are fresh (1..n per subset) and assigned in source order,
    so the result does not depend on ``jobs``.
    """
    by_image = {img.image_id: [] for img in dataset.images}
    for pos, ann in enumerate(dataset.annotations):
        by_image[ann.image_id].append((pos, ann))
    tasks = [(pos, img, by_image[img.image_id]) for pos, img in enumerate(dataset.images)]

    def run(task):
        return _process_image(*task, images, dataset.layout, cfg, headless)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    counts = dict.fromkeys(_COUNT_KEYS, 0)
    basic_entries, hl_entries = [], []
    for b, h, c in results:
        basic_entries += b
        hl_entries += h
        for k, v in c.items():
            counts[k] += v
    basic, basic_items = _assemble(basic_entries, dataset)
    hl, hl_items = _assemble(hl_entries, dataset)
    counts["basic_accepted"] = len(basic_items)
    counts["headless_accepted"] = len(hl_items)
    if not basic_items and not hl_items:
        log.warning("crop generation produced an empty dataset")
    return SubsetResult(basic, hl, basic_items, hl_items, counts)
