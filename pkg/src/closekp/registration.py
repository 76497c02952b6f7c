"""Least-squares rigid registration of 3D point correspondences.

Closed-form SVD solution: center both point sets, decompose the 3x3
cross-covariance ``H = sum (p_i - p_mean)(q_i - q_mean)^T = U S V^T`` and take
``R = V diag(1, 1, det(V U^T)) U^T``, ``t = q_mean - R p_mean``. The diagonal
correction keeps ``R`` a proper rotation on noisy or mirrored data.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    CloseKPError,
    InsufficientCorrespondencesError,
    ParseError,
    RankDeficiencyError,
)
from .geometry import Point3, RigidTransform

# Relative singular-value floor below which a point cloud counts as collinear.
RANK_TOL = 1e-9


class CorrespondenceSet:
    """Paired source/target points as two ``(n, 3)`` arrays."""

    def __init__(self, source, target, source_frame: str = "camera", target_frame: str = "mocap"):
        src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
        tgt = np.asarray(target, dtype=np.float64).reshape(-1, 3)
        if src.shape != tgt.shape:
            raise ValueError("source and target must have the same number of points")
        self.source = src
        self.target = tgt
        self.source_frame = source_frame
        self.target_frame = target_frame

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[Point3, Point3]], **frames) -> "CorrespondenceSet":
        pairs = list(pairs)
        src = [p.as_array() for p, _ in pairs]
        tgt = [q.as_array() for _, q in pairs]
        return cls(np.reshape(src, (-1, 3)), np.reshape(tgt, (-1, 3)), **frames)

    @property
    def pairs(self) -> list[tuple[Point3, Point3]]:
        return [(Point3.from_array(p, self.source_frame), Point3.from_array(q, self.target_frame))
                for p, q in zip(self.source, self.target)]

    def __len__(self):
        return len(self.source)


def parse_correspondences(text: str, **frames) -> CorrespondenceSet:
    """One pair per line: ``sx sy sz tx ty tz`` in meters; ``#`` starts a comment."""
    rows = []
    offset = 0
    for lineno, line in enumerate(text.splitlines(keepends=True), start=1):
        body = line.split("#", 1)[0].strip()
        if body:
            parts = body.replace(",", " ").split()
            try:
                vals = [float(x) for x in parts]
            except ValueError:
                vals = []
            if len(vals) != 6 or not np.all(np.isfinite(vals)):
                raise ParseError(f"line {lineno}: expected 6 finite numbers", offset)
            rows.append(vals)
        offset += len(line.encode("utf-8"))
    arr = np.array(rows, dtype=np.float64).reshape(-1, 6)
    return CorrespondenceSet(arr[:, :3], arr[:, 3:], **frames)


def load_correspondences(path, **frames) -> CorrespondenceSet:
    return parse_correspondences(Path(path).read_text(encoding="utf-8"), **frames)


def _check_rank(points: np.ndarray, name: str):
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[0] == 0 or s[1] <= RANK_TOL * s[0]:
        raise RankDeficiencyError(f"{name} points are coincident or collinear")


def _rotation_from_covariance(h: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(h)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    if d == 0:
        d = 1.0
    return v @ np.diag([1.0, 1.0, d]) @ u.T


def estimate_rigid(corr: CorrespondenceSet) -> RigidTransform:
    """Rigid transform minimizing ``sum ||R p_i + t - q_i||^2``."""
    if len(corr) < 3:
        raise InsufficientCorrespondencesError(f"need at least 3 pairs, got {len(corr)}")
    if not (np.all(np.isfinite(corr.source)) and np.all(np.isfinite(corr.target))):
        raise CloseKPError("correspondences must be finite")
    _check_rank(corr.source, "source")
    _check_rank(corr.target, "target")
    p_mean = corr.source.mean(axis=0)
    q_mean = corr.target.mean(axis=0)
    h = (corr.source - p_mean).T @ (corr.target - q_mean)
    r = _rotation_from_covariance(h)
    return RigidTransform(r, q_mean - r @ p_mean, corr.source_frame, corr.target_frame)


def fix_translation(transform: RigidTransform, anchor) -> RigidTransform:
    """Same rotation, translation replaced by ``anchor`` (target frame)."""
    a = anchor.as_array() if isinstance(anchor, Point3) else np.asarray(anchor, dtype=np.float64)
    return RigidTransform(transform.rotation, a, transform.source, transform.target)


def estimate_rotation_with_translation(corr: CorrespondenceSet, anchor) -> RigidTransform:
    """Best rotation when the translation is pinned to ``anchor``.

    Minimizes ``sum ||R p_i + a - q_i||^2`` over rotations only (orthogonal
    Procrustes on uncentered points).
    """
    if len(corr) < 3:
        raise InsufficientCorrespondencesError(f"need at least 3 pairs, got {len(corr)}")
    a = anchor.as_array() if isinstance(anchor, Point3) else np.asarray(anchor, dtype=np.float64)
    h = corr.source.T @ (corr.target - a)
    if np.linalg.matrix_rank(h, tol=RANK_TOL * max(np.abs(h).max(), 1e-300)) < 2:
        raise RankDeficiencyError("correspondences do not constrain the rotation")
    return RigidTransform(_rotation_from_covariance(h), a, corr.source_frame, corr.target_frame)


def residuals(corr: CorrespondenceSet, transform: RigidTransform) -> np.ndarray:
    return np.linalg.norm(transform.apply(corr.source) - corr.target, axis=1)


def residual_rms(corr: CorrespondenceSet, transform: RigidTransform) -> float:
    if len(corr) == 0:
        raise InsufficientCorrespondencesError("residual of an empty correspondence set")
    res = residuals(corr, transform)
    return float(np.sqrt(np.mean(res ** 2)))
