"""Lifting 2D keypoints to 3D with a depth raster.

Pipeline for one keypoint ``(u, v)`` of group ``g``:

1. Seed depth ``k0``: the valid pixel of the 3x3 block around the rounded
   keypoint that is closest to ``(u, v)``.
2. Window half-widths ``round(f / k0 * r_g)`` pixels per axis (at least 1),
   i.e. the metric neighborhood radius ``r_g`` projected into the image.
3. Back-project every valid pixel of the window and take the componentwise
   median of the resulting 3D points.

Pixel ``(col, row)`` is taken to sit at image coordinate ``u = col, v = row``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .annotations import DetectionRecord
from .depth import DepthFrame
from .errors import CloseKPError, ConfigError, InvalidDepthError
from .geometry import CameraIntrinsics, Point3
from .layouts import KeypointLayout

DEFAULT_RADII = {"body": 0.020, "hand": 0.003, "face": 0.003}


@dataclass(frozen=True)
class NeighborhoodSpec:
    radius_by_group: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_RADII))
    min_valid_fraction: float = 0.1
    window: str = "rect"  # or "disc"

    def __post_init__(self):
        if any(not (r > 0) for r in self.radius_by_group.values()):
            raise ConfigError("neighborhood radii must be > 0")
        if not 0 < self.min_valid_fraction <= 1:
            raise ConfigError("min_valid_fraction must lie in (0, 1]")
        if self.window not in ("rect", "disc"):
            raise ConfigError(f"window must be 'rect' or 'disc', got {self.window!r}")

    def radius(self, group: str) -> float:
        try:
            return self.radius_by_group[group]
        except KeyError:
            raise ConfigError(f"no neighborhood radius for group {group!r}") from None


class LiftFailure(CloseKPError):
    reason = "failed"


class NoDepthFailure(LiftFailure):
    reason = "no-depth"


class InsufficientDepthFailure(LiftFailure):
    reason = "insufficient-depth"


class OutOfFrameFailure(LiftFailure):
    reason = "out-of-frame"


class LiftStatus(enum.Enum):
    SKIPPED = "skipped"
    NO_DEPTH = "no-depth"
    INSUFFICIENT_DEPTH = "insufficient-depth"
    OUT_OF_FRAME = "out-of-frame"


def pixel_radius(r: float, k: float, intr: CameraIntrinsics, axis: str = "x") -> float:
    """Length in pixels of a metric segment ``r`` seen at depth ``k``."""
    if not k > 0:
        raise InvalidDepthError(f"depth must be > 0, got {k}")
    if not r > 0:
        raise ConfigError(f"radius must be > 0, got {r}")
    f = {"x": intr.fx, "y": intr.fy}[axis]
    return (f / k) * r


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def _seed_depth(values: np.ndarray, u: float, v: float, col: int, row: int) -> float:
    h, w = values.shape
    r0, r1 = max(0, row - 1), min(h, row + 2)
    c0, c1 = max(0, col - 1), min(w, col + 2)
    rows, cols = np.nonzero(values[r0:r1, c0:c1])
    if rows.size == 0:
        raise NoDepthFailure(f"no valid depth around ({u:.1f}, {v:.1f})")
    rows = rows + r0
    cols = cols + c0
    dist = (cols - u) ** 2 + (rows - v) ** 2
    best = np.lexsort((cols, rows, dist))[0]
    return values[rows[best], cols[best]] / 1000.0


def lift_keypoint(depth: DepthFrame, kp, group: str, spec: NeighborhoodSpec,
                  intr: CameraIntrinsics) -> Point3:
    """3D camera-frame position of one keypoint, or raise a :class:`LiftFailure`."""
    u, v = float(kp[0]), float(kp[1])
    values = depth.values
    h, w = values.shape
    if not (math.isfinite(u) and math.isfinite(v)):
        raise OutOfFrameFailure("non-finite keypoint")
    col, row = _round_half_up(u), _round_half_up(v)
    if not (0 <= col < w and 0 <= row < h):
        raise OutOfFrameFailure(f"keypoint ({u:.1f}, {v:.1f}) outside {w}x{h} frame")

    k0 = _seed_depth(values, u, v, col, row)
    r = spec.radius(group)
    hx = max(1, _round_half_up(pixel_radius(r, k0, intr, "x")))
    hy = max(1, _round_half_up(pixel_radius(r, k0, intr, "y")))
    r0, r1 = max(0, row - hy), min(h, row + hy + 1)
    c0, c1 = max(0, col - hx), min(w, col + hx + 1)
    win = values[r0:r1, c0:c1]
    rows, cols = np.mgrid[r0:r1, c0:c1]
    inside = np.ones(win.shape, dtype=bool)
    if spec.window == "disc":
        inside = ((cols - col) / hx) ** 2 + ((rows - row) / hy) ** 2 <= 1.0
    valid = inside & (win > 0)
    n_valid = int(valid.sum())
    if n_valid < spec.min_valid_fraction * int(inside.sum()):
        raise InsufficientDepthFailure(
            f"{n_valid} of {int(inside.sum())} window pixels have depth")
    z = win[valid].astype(np.float64) / 1000.0
    x = z * (cols[valid] - intr.cx) / intr.fx
    y = z * (rows[valid] - intr.cy) / intr.fy
    return Point3(float(np.median(x)), float(np.median(y)), float(np.median(z)))


_STATUS = {
    NoDepthFailure: LiftStatus.NO_DEPTH,
    InsufficientDepthFailure: LiftStatus.INSUFFICIENT_DEPTH,
    OutOfFrameFailure: LiftStatus.OUT_OF_FRAME,
}


def lift_person(depth: DepthFrame, det: DetectionRecord, layout: KeypointLayout,
                spec: NeighborhoodSpec, intr: CameraIntrinsics,
                conf_threshold: float = 0.1) -> dict[int, Point3 | LiftStatus]:
    """Lift every keypoint with confidence >= ``conf_threshold``.

    The others map to ``LiftStatus.SKIPPED``; failed lifts map to the
    matching failure status.
    """
    out: dict[int, Point3 | LiftStatus] = {}
    for i, kp in enumerate(det.keypoints):
        if not kp[2] >= conf_threshold:
            out[i] = LiftStatus.SKIPPED
            continue
        try:
            out[i] = lift_keypoint(depth, kp, layout.group_of(i), spec, intr)
        except LiftFailure as exc:
            out[i] = _STATUS[type(exc)]
    return out
