"""Keypoint layouts: index partitions into body / hand / face groups.

Four layouts ship in the registry:

===============  =====  ====================================
name             total  groups
===============  =====  ====================================
``coco17``       17     body 0-16
``wholebody133`` 133    body 0-22 (incl. feet), face 23-90,
                        hand 91-132
``halpe136``     136    body 0-25, face 26-93, hand 94-135
``hand21``       21     hand 0-20
===============  =====  ====================================

Besides the three main groups a layout may define *parts*: named index
subsets such as ``left_hand`` used for per-hand evaluation and the
visibility categories of the failure analysis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

from .errors import ConfigError, UnsupportedGroupError

GROUPS = ("body", "hand", "face")

COCO_BODY_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
COCO_SKELETON = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12),
    (5, 6), (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
    (1, 3), (2, 4), (3, 5), (4, 6),
)
HALPE_EXTRA_NAMES = (
    "head", "neck", "hip",
    "left_big_toe", "right_big_toe", "left_small_toe", "right_small_toe",
    "left_heel", "right_heel",
)
HALPE_BODY_SKELETON = (
    (0, 1), (0, 2), (1, 3), (2, 4), (5, 18), (6, 18), (5, 7), (7, 9),
    (6, 8), (8, 10), (17, 18), (18, 19), (19, 11), (19, 12), (11, 13),
    (12, 14), (13, 15), (14, 16), (20, 24), (21, 25), (23, 25), (22, 24),
    (15, 24), (16, 25),
)
WHOLEBODY_FOOT_NAMES = (
    "left_big_toe", "left_small_toe", "left_heel",
    "right_big_toe", "right_small_toe", "right_heel",
)
WHOLEBODY_FOOT_SKELETON = (
    (15, 17), (15, 18), (15, 19), (16, 20), (16, 21), (16, 22),
)
HAND_SKELETON = (
    (0, 1), (1, 2), (2, 3), (3, 4), (0, 5), (5, 6), (6, 7), (7, 8),
    (0, 9), (9, 10), (10, 11), (11, 12), (0, 13), (13, 14), (14, 15),
    (15, 16), (0, 17), (17, 18), (18, 19), (19, 20),
)

# Index sets shared by every COCO-derived body layout (first 17 entries).
COCO_HEAD = (0, 1, 2, 3, 4)
LEFT_ARM = (5, 7, 9)
RIGHT_ARM = (6, 8, 10)
SHOULDERS = (5, 6)
LEGS = (11, 12, 13, 14, 15, 16)


@dataclass(frozen=True)
class KeypointLayout:
    """Immutable description of a keypoint array.

    ``group_ranges`` maps group name to a half-open ``(start, stop)`` range.
    """

    name: str
    total: int
    group_ranges: Mapping[str, tuple[int, int]]
    head_indices: tuple[int, ...] = ()
    skeleton: tuple[tuple[int, int], ...] = ()
    parts: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    names: tuple[str, ...] = ()

    def __post_init__(self):
        ranges = dict(sorted(self.group_ranges.items(), key=lambda kv: kv[1][0]))
        for group in ranges:
            if group not in GROUPS:
                raise ConfigError(f"unknown group {group!r} in layout {self.name}")
        pos = 0
        for group, (start, stop) in ranges.items():
            if start != pos or stop <= start:
                raise ConfigError(f"layout {self.name}: groups must tile [0, {self.total})")
            pos = stop
        if pos != self.total:
            raise ConfigError(f"layout {self.name}: groups cover {pos} of {self.total} keypoints")
        if self.head_indices:
            if "body" not in ranges:
                raise ConfigError(f"layout {self.name}: head indices need a body group")
            b0, b1 = ranges["body"]
            if not all(b0 <= i < b1 for i in self.head_indices):
                raise ConfigError(f"layout {self.name}: head indices outside body group")
        for a, b in self.skeleton:
            if not (0 <= a < self.total and 0 <= b < self.total):
                raise ConfigError(f"layout {self.name}: skeleton edge ({a}, {b}) out of range")
        names = self.names or tuple(f"kp_{i}" for i in range(self.total))
        if len(names) != self.total:
            raise ConfigError(f"layout {self.name}: {len(names)} names for {self.total} keypoints")
        object.__setattr__(self, "group_ranges", MappingProxyType(ranges))
        object.__setattr__(self, "parts", MappingProxyType(dict(self.parts)))
        object.__setattr__(self, "names", names)

    @property
    def groups(self) -> tuple[str, ...]:
        """Groups in index order."""
        return tuple(self.group_ranges)

    def indices(self, group: str) -> tuple[int, ...]:
        """Index tuple of a main group or a named part."""
        if group in self.group_ranges:
            start, stop = self.group_ranges[group]
            return tuple(range(start, stop))
        if group in self.parts:
            return self.parts[group]
        raise UnsupportedGroupError(f"layout {self.name} has no group {group!r}")

    def group_of(self, index: int) -> str:
        for group, (start, stop) in self.group_ranges.items():
            if start <= index < stop:
                return group
        raise IndexError(f"keypoint index {index} outside layout {self.name}")

    def has_body_parts(self) -> bool:
        return "body" in self.group_ranges and self.group_ranges["body"][1] >= 17


def _offset(edges, k):
    return tuple((a + k, b + k) for a, b in edges)


def _hand_names(side):
    return tuple(f"{side}_hand_{i}" for i in range(21))


def _body_parts(head):
    return {
        "head": head,
        "left_arm": LEFT_ARM,
        "right_arm": RIGHT_ARM,
        "shoulders": SHOULDERS,
        "legs": LEGS,
    }


COCO17 = KeypointLayout(
    name="coco17",
    total=17,
    group_ranges={"body": (0, 17)},
    head_indices=COCO_HEAD,
    skeleton=COCO_SKELETON,
    parts=_body_parts(COCO_HEAD),
    names=COCO_BODY_NAMES,
)

WHOLEBODY133 = KeypointLayout(
    name="wholebody133",
    total=133,
    group_ranges={"body": (0, 23), "face": (23, 91), "hand": (91, 133)},
    head_indices=COCO_HEAD,
    skeleton=COCO_SKELETON + WHOLEBODY_FOOT_SKELETON
    + _offset(HAND_SKELETON, 91) + _offset(HAND_SKELETON, 112),
    parts={
        **_body_parts(COCO_HEAD),
        "left_hand": tuple(range(91, 112)),
        "right_hand": tuple(range(112, 133)),
    },
    names=COCO_BODY_NAMES + WHOLEBODY_FOOT_NAMES
    + tuple(f"face_{i}" for i in range(68))
    + _hand_names("left") + _hand_names("right"),
)

_HALPE_HEAD = COCO_HEAD + (17,)
HALPE136 = KeypointLayout(
    name="halpe136",
    total=136,
    group_ranges={"body": (0, 26), "face": (26, 94), "hand": (94, 136)},
    head_indices=_HALPE_HEAD,
    skeleton=HALPE_BODY_SKELETON + _offset(HAND_SKELETON, 94) + _offset(HAND_SKELETON, 115),
    parts={
        **_body_parts(_HALPE_HEAD),
        "left_hand": tuple(range(94, 115)),
        "right_hand": tuple(range(115, 136)),
    },
    names=COCO_BODY_NAMES + HALPE_EXTRA_NAMES
    + tuple(f"face_{i}" for i in range(68))
    + _hand_names("left") + _hand_names("right"),
)

HAND21 = KeypointLayout(
    name="hand21",
    total=21,
    group_ranges={"hand": (0, 21)},
    skeleton=HAND_SKELETON,
    names=tuple(f"hand_{i}" for i in range(21)),
)

REGISTRY: dict[str, KeypointLayout] = {
    layout.name: layout for layout in (COCO17, WHOLEBODY133, HALPE136, HAND21)
}


def get_layout(name: str | KeypointLayout) -> KeypointLayout:
    if isinstance(name, KeypointLayout):
        return name
    try:
        return REGISTRY[name]
    except KeyError:
        raise ConfigError(
            f"unknown layout {name!r}; expected one of {', '.join(sorted(REGISTRY))}"
        ) from None


def layout_for_total(total: int) -> KeypointLayout:
    """Registry layout with ``total`` keypoints (for format sniffing)."""
    for layout in REGISTRY.values():
        if layout.total == total:
            return layout
    raise ConfigError(f"no registered layout has {total} keypoints")
