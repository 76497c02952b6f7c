"""3D keypoint evaluation: stability around median centers and distance to MoCap.

Trajectories hold, per frame, keypoint index -> (xyz, confidence). Frames
with a missing keypoint simply lack the entry; nothing is interpolated.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ParseError, ValidationError
from .geometry import CAMERA, RigidTransform
from .layouts import SHOULDERS

DEFAULT_BINS = (0.025, 0.05, 0.1)
DEFAULT_TOLERANCE = 0.05


@dataclass
class TrajFrame:
    t: float
    keypoints: dict[int, tuple[np.ndarray, float]] = field(default_factory=dict)


@dataclass
class Trajectory:
    frames: list[TrajFrame] = field(default_factory=list)
    frame_id: str = CAMERA

    def __post_init__(self):
        ts = [f.t for f in self.frames]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValidationError("trajectory timestamps must be non-decreasing")

    def __len__(self):
        return len(self.frames)

    def keypoint_ids(self) -> list[int]:
        return sorted({k for f in self.frames for k in f.keypoints})

    def transformed(self, transform: RigidTransform) -> "Trajectory":
        frames = [
            TrajFrame(f.t, {k: (transform.apply(p), c) for k, (p, c) in f.keypoints.items()})
            for f in self.frames
        ]
        return Trajectory(frames, transform.target)


@dataclass
class MocapTrack:
    frames: list[tuple[float, dict[str, np.ndarray]]] = field(default_factory=list)

    def __post_init__(self):
        ts = [t for t, _ in self.frames]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValidationError("MoCap timestamps must be non-decreasing")

    def marker_ids(self) -> set[str]:
        return {m for _, markers in self.frames for m in markers}


@dataclass(frozen=True)
class MarkerPairing:
    pairs: Mapping[int, tuple[str, str]]

    def __post_init__(self):
        for k, (a, b) in self.pairs.items():
            if a == b:
                raise ConfigError(f"keypoint {k}: both markers are {a!r}")


# -- file formats ----------------------------------------------------------

def _finite(values, where):
    if not isinstance(values, list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)
            for x in values):
        raise ValidationError(f"{where}: expected finite numbers")
    return values


def parse_trajectory(text: str, frame_id: str = CAMERA) -> Trajectory:
    """JSON lines: ``{"t": seconds, "keypoints": {"<index>": [x, y, z, conf]}}``."""
    frames = []
    offset = 0
    for lineno, line in enumerate(text.splitlines(keepends=True), start=1):
        if line.strip():
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: {exc.msg}", offset + exc.pos) from None
            if not isinstance(obj, dict) or not isinstance(obj.get("keypoints", {}), dict):
                raise ValidationError(f"line {lineno}: expected {{t, keypoints}} object")
            t = _finite([obj.get("t")], f"line {lineno}.t")[0]
            kps = {}
            for key, val in obj.get("keypoints", {}).items():
                try:
                    idx = int(key)
                except ValueError:
                    raise ValidationError(f"line {lineno}: keypoint key {key!r} is not an index") from None
                vals = _finite(val, f"line {lineno}.keypoints[{key}]")
                if len(vals) != 4:
                    raise ValidationError(f"line {lineno}: keypoint {key} needs [x, y, z, conf]")
                kps[idx] = (np.array(vals[:3], dtype=np.float64), float(vals[3]))
            frames.append(TrajFrame(float(t), kps))
        offset += len(line.encode("utf-8"))
    return Trajectory(frames, frame_id)


def format_trajectory(traj: Trajectory) -> str:
    lines = []
    for f in traj.frames:
        kps = {str(k): [float(v) for v in p] + [float(c)]
               for k, (p, c) in sorted(f.keypoints.items())}
        lines.append(json.dumps({"t": f.t, "keypoints": kps}, separators=(",", ":")))
    return "".join(line + "\n" for line in lines)


def load_trajectory(path, frame_id: str = CAMERA) -> Trajectory:
    return parse_trajectory(Path(path).read_text(encoding="utf-8"), frame_id)


def parse_mocap_csv(text: str) -> MocapTrack:
    """CSV with header ``t,marker_id,x,y,z`` (meters); empty or NaN coordinates mean missing."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["t", "marker_id", "x", "y", "z"]:
        raise ParseError("MoCap CSV header must be 't,marker_id,x,y,z'", 0)
    by_t: dict[float, dict[str, np.ndarray]] = {}
    for n, row in enumerate(reader, start=2):
        try:
            t = float(row["t"])
            xyz = [float(row[c]) if row[c] not in ("", None) else math.nan for c in "xyz"]
        except (TypeError, ValueError):
            raise ParseError(f"MoCap CSV line {n}: bad number") from None
        if not math.isfinite(t):
            raise ParseError(f"MoCap CSV line {n}: bad timestamp")
        markers = by_t.setdefault(t, {})
        if all(math.isfinite(c) for c in xyz):
            markers[str(row["marker_id"])] = np.array(xyz)
    return MocapTrack(sorted(by_t.items(), key=lambda kv: kv[0]))


def format_mocap_csv(track: MocapTrack) -> str:
    out = ["t,marker_id,x,y,z"]
    for t, markers in track.frames:
        for m, p in sorted(markers.items()):
            out.append(f"{float(t)!r},{m},{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}")
    return "\n".join(out) + "\n"


def load_pairing(path) -> MarkerPairing:
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        pairs = {int(k): (str(v[0]), str(v[1])) for k, v in cfg.items()}
        if any(len(v) != 2 for v in cfg.values()):
            raise ValueError("each keypoint needs exactly two marker ids")
    except (json.JSONDecodeError, ValueError, TypeError, AttributeError, IndexError, KeyError) as exc:
        raise ConfigError(f"marker pairing {path}: {exc}") from None
    return MarkerPairing(pairs)


# -- relative evaluation ----------------------------------------------------

def _qualifying(traj: Trajectory, k: int, conf_threshold: float):
    return [f.keypoints[k][0] for f in traj.frames
            if k in f.keypoints and f.keypoints[k][1] >= conf_threshold]


def median_center(traj: Trajectory, conf_threshold: float = 0.1) -> dict[int, np.ndarray]:
    """Componentwise median position per keypoint over qualifying frames."""
    out = {}
    for k in traj.keypoint_ids():
        pts = _qualifying(traj, k, conf_threshold)
        if pts:
            out[k] = np.median(np.stack(pts), axis=0)
    return out


@dataclass
class KeypointStats:
    keypoint: int
    count: int
    total: int
    fractions: list[float]
    median_distance: float | None = None

    @property
    def detection_fraction(self) -> float:
        return self.count / self.total if self.total else 0.0


def _fractions(dist: np.ndarray, bins: Sequence[float]) -> list[float]:
    if dist.size == 0:
        return [0.0] * len(bins)
    return [float(np.count_nonzero(dist <= b)) / dist.size for b in bins]


def _check_bins(bins):
    bins = [float(b) for b in bins]
    if not bins or any(b <= 0 for b in bins) or any(b2 <= b1 for b1, b2 in zip(bins, bins[1:])):
        raise ConfigError("distance bins must be positive and strictly increasing")
    return bins


def relative_stats(traj: Trajectory, centers: Mapping[int, np.ndarray],
                   bins: Sequence[float] = DEFAULT_BINS,
                   conf_threshold: float = 0.1) -> dict[int, KeypointStats]:
    """Fraction of qualifying frames within each distance of the keypoint's center."""
    bins = _check_bins(bins)
    out = {}
    for k, c in sorted(centers.items()):
        pts = _qualifying(traj, k, conf_threshold)
        dist = np.linalg.norm(np.stack(pts) - c, axis=1) if pts else np.empty(0)
        out[k] = KeypointStats(k, len(pts), len(traj), _fractions(dist, bins),
                               float(np.median(dist)) if dist.size else None)
    return out


# -- absolute evaluation ----------------------------------------------------

def marker_ground_truth(mocap: MocapTrack, pairing: MarkerPairing) -> Trajectory:
    """Keypoint = midpoint of its two markers; frames missing either marker omit it."""
    known = mocap.marker_ids()
    for k, (a, b) in pairing.pairs.items():
        for m in (a, b):
            if m not in known:
                raise ConfigError(f"keypoint {k}: marker {m!r} never appears in the MoCap track")
    frames = []
    for t, markers in mocap.frames:
        kps = {}
        for k, (a, b) in sorted(pairing.pairs.items()):
            if a in markers and b in markers:
                kps[k] = ((markers[a] + markers[b]) / 2.0, 1.0)
        frames.append(TrajFrame(t, kps))
    return Trajectory(frames, "mocap")


@dataclass
class Association:
    pairs: list[tuple[int, int]]
    unpaired_a: int
    unpaired_b: int


def associate_by_time(a: Trajectory, b: Trajectory,
                      tolerance: float = DEFAULT_TOLERANCE) -> Association:
    """One-to-one frame pairing, greedily accepting the smallest ``|dt|`` first.

    Candidate pairs need ``|dt| <= tolerance``. Ties go to the lower
    (a index, b index). Returned pairs are sorted by a index.
    """
    tb = np.array([f.t for f in b.frames])
    cands = []
    for i, fa in enumerate(a.frames):
        lo = np.searchsorted(tb, fa.t - tolerance, side="left")
        hi = np.searchsorted(tb, fa.t + tolerance, side="right")
        for j in range(lo, hi):
            dt = abs(fa.t - tb[j])
            if dt <= tolerance:
                cands.append((dt, i, j))
    cands.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cands:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    pairs.sort()
    return Association(pairs, len(a) - len(pairs), len(b) - len(pairs))


@dataclass
class AbsoluteRow:
    keypoint: int
    conf_threshold: float
    count: int
    median_distance: float | None
    fractions: list[float]
    missing_gt: int


def absolute_stats(detected: Trajectory, gt: Trajectory, pairs: Iterable[tuple[int, int]],
                   bins: Sequence[float] = DEFAULT_BINS,
                   conf_thresholds: Sequence[float] = (0.1, 0.3),
                   exclude: Iterable[int] = SHOULDERS,
                   keypoints: Iterable[int] | None = None) -> list[AbsoluteRow]:
    """Distance of detections to ground truth per keypoint and confidence threshold.

    ``count`` is the number of paired frames where the keypoint was detected
    with confidence >= threshold and a ground-truth position exists;
    ``missing_gt`` counts qualifying detections without one.
    """
    bins = _check_bins(bins)
    pairs = list(pairs)
    excluded = set(exclude)
    if keypoints is None:
        keypoints = sorted(set(detected.keypoint_ids()) | set(gt.keypoint_ids()))
    rows = []
    for k in keypoints:
        if k in excluded:
            continue
        for thr in conf_thresholds:
            dists, missing = [], 0
            for i, j in pairs:
                det = detected.frames[i].keypoints.get(k)
                if det is None or det[1] < thr:
                    continue
                ref = gt.frames[j].keypoints.get(k)
                if ref is None:
                    missing += 1
                    continue
                dists.append(float(np.linalg.norm(det[0] - ref[0])))
            d = np.array(dists)
            rows.append(AbsoluteRow(k, float(thr), len(dists),
                                    float(np.median(d)) if d.size else None,
                                    _fractions(d, bins), missing))
    return rows
