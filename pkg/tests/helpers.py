"""Synthetic fixtures shared by the test modules."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from closekp.annotations import Dataset, DetectionRecord, ImageRecord, PersonAnnotation, write_dataset
from closekp.layouts import get_layout

HALPE = get_layout("halpe136")
COCO = get_layout("coco17")

# Upright Halpe body pose in box-normalized coordinates (a across, b down).
_BODY_UPRIGHT = {
    0: (0.50, 0.10), 1: (0.46, 0.08), 2: (0.54, 0.08), 3: (0.42, 0.10), 4: (0.58, 0.10),
    5: (0.35, 0.30), 6: (0.65, 0.30), 7: (0.25, 0.45), 8: (0.75, 0.45),
    9: (0.20, 0.58), 10: (0.80, 0.58), 11: (0.40, 0.60), 12: (0.60, 0.60),
    13: (0.40, 0.78), 14: (0.60, 0.78), 15: (0.40, 0.94), 16: (0.60, 0.94),
    17: (0.50, 0.03), 18: (0.50, 0.24), 19: (0.50, 0.60),
    20: (0.36, 0.97), 21: (0.64, 0.97), 22: (0.38, 0.96), 23: (0.62, 0.96),
    24: (0.42, 0.97), 25: (0.58, 0.97),
}

ORIENTATIONS = ("up", "down", "left", "right")


def _orient(a, b, orientation):
    if orientation == "up":
        return a, b
    if orientation == "down":
        return 1.0 - a, 1.0 - b
    if orientation == "left":  # head on the left
        return b, a
    return 1.0 - b, a  # head on the right


def halpe_person(x0, y0, w, h, orientation="up", head_visible=True, rng=None):
    """(136, 3) keypoints of a stick figure filling the box ``(x0, y0, w, h)``."""
    rng = rng or np.random.default_rng(0)
    ab = np.zeros((HALPE.total, 2))
    for i, p in _BODY_UPRIGHT.items():
        ab[i] = p
    face = range(*HALPE.group_ranges["face"])
    ab[list(face)] = np.column_stack([rng.uniform(0.42, 0.58, len(face)),
                                      rng.uniform(0.04, 0.16, len(face))])
    lh, rh = HALPE.indices("left_hand"), HALPE.indices("right_hand")
    ab[list(lh)] = np.column_stack([rng.uniform(0.14, 0.24, len(lh)), rng.uniform(0.58, 0.66, len(lh))])
    ab[list(rh)] = np.column_stack([rng.uniform(0.76, 0.86, len(rh)), rng.uniform(0.58, 0.66, len(rh))])
    kps = np.zeros((HALPE.total, 3))
    for i, (a, b) in enumerate(ab):
        a2, b2 = _orient(a, b, orientation)
        kps[i] = (x0 + a2 * w, y0 + b2 * h, 2)
    if not head_visible:
        kps[list(HALPE.head_indices)] = 0
        kps[list(face)] = 0
    return kps


def crop_fixture(n_persons=50, seed=0, slot=(260, 270)):
    """Two persons per image, box areas straddling 20 000 px^2.

    Returns ``(dataset, pixels_by_image_id, areas_by_annotation_id)``.
    Boxes have integer corners, so the crop area equals ``w * h`` exactly.
    """
    rng = np.random.default_rng(seed)
    sw, sh = slot
    dims = [(100, 200), (100, 199), (200, 100), (141, 142), (141, 141)]
    while len(dims) < n_persons:
        w = int(rng.integers(90, 240))
        area = 20_000 * np.exp(rng.uniform(-0.35, 0.35))
        h = int(np.clip(round(area / w), 85, 260))
        dims.append((w, h))
    images, anns, pixels, areas = [], [], {}, {}
    n_images = (n_persons + 1) // 2
    for img_id in range(1, n_images + 1):
        images.append(ImageRecord(img_id, 2 * sw, sh, f"img_{img_id:04d}.png"))
        pixels[img_id] = rng.integers(0, 256, (sh, 2 * sw, 3), dtype=np.uint8)
    for k, (w, h) in enumerate(dims):
        img_id = k // 2 + 1
        x0 = (k % 2) * sw + int(rng.integers(0, sw - w + 1))
        y0 = int(rng.integers(0, sh - h + 1))
        orientation = ORIENTATIONS[k % 4]
        head_visible = k % 11 != 7
        kps = halpe_person(x0, y0, w, h, orientation, head_visible, rng)
        ann_id = 1000 + k
        anns.append(PersonAnnotation(img_id, (x0, y0, w, h), kps, area=float(w * h) * 0.6,
                                     id=ann_id, extra={"num_keypoints": int((kps[:, 2] > 0).sum()),
                                                       "iscrowd": 0}))
        areas[ann_id] = w * h
    return Dataset(images, anns, HALPE), pixels, areas


def write_crop_fixture(root: Path, n_persons=10, seed=0):
    ds, pixels, _ = crop_fixture(n_persons, seed)
    from PIL import Image

    (root / "images").mkdir(parents=True, exist_ok=True)
    for img in ds.images:
        Image.fromarray(pixels[img.image_id]).save(root / "images" / img.file_name)
    (root / "annotations.json").write_bytes(write_dataset(ds))
    return ds


def detections_for(dataset: Dataset, rng, jitter=3.0, extra_fp=0.3):
    """Noisy copies of every gt plus a few spurious detections."""
    dets = []
    total = dataset.layout.total
    for ann in dataset.annotations:
        kps = ann.keypoints.copy()
        kps[:, :2] += rng.normal(0, jitter, (total, 2))
        kps[:, 2] = rng.uniform(0.05, 1.0, total)
        dets.append(DetectionRecord(ann.image_id, kps, float(rng.uniform(0.2, 1.0))))
    for img in dataset.images:
        if rng.random() < extra_fp:
            kps = np.column_stack([rng.uniform(0, img.width, total), rng.uniform(0, img.height, total),
                                   rng.uniform(0, 1, total)])
            dets.append(DetectionRecord(img.image_id, kps, float(rng.uniform(0, 0.5))))
    return dets


def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2), encoding="utf-8")
    return path


def scene_dict(frames=1, pixel_sigma=0.0, depth_sigma_mm=0.0, confidence=(1.0, 1.0), seed=0,
               primitives=None, keypoints=None, mocap=None, width=640, height=480):
    cfg = {
        "intrinsics": {"f_x": 600.0, "f_y": 600.0, "c_x": 320.0, "c_y": 240.0},
        "width": width, "height": height,
        "primitives": primitives if primitives is not None else [{"type": "plane", "z": 1.0}],
        "keypoints": keypoints if keypoints is not None else {"0": [0.0, 0.0, 1.0]},
        "noise": {"pixel_sigma": pixel_sigma, "depth_sigma_mm": depth_sigma_mm,
                  "confidence": list(confidence)},
        "seed": seed, "frames": frames, "fps": 30.0,
    }
    if mocap is not None:
        cfg["mocap"] = mocap
    return cfg
