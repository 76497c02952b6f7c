"""3D points, rigid transforms and pinhole intrinsics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FrameMismatchError, InvalidDepthError

CAMERA = "camera"


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float
    frame: str = CAMERA

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ValueError("Point3 components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @classmethod
    def from_array(cls, xyz, frame: str = CAMERA) -> "Point3":
        x, y, z = (float(c) for c in xyz)
        return cls(x, y, z, frame)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``p_target = rotation @ p_source + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    source: str = CAMERA
    target: str = "base"

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ConfigError("transform must be finite")
        if np.abs(r.T @ r - np.eye(3)).max() >= 1e-9 or np.linalg.det(r) <= 0:
            raise ConfigError("rotation must be orthonormal with determinant +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, source=CAMERA, target="base") -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), source, target)

    def apply(self, points) -> np.ndarray:
        """Transform an ``(..., 3)`` array of source-frame points."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation, self.target, self.source)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self after other``: maps other.source to self.target."""
        if other.target != self.source:
            raise FrameMismatchError(f"cannot compose {other.target!r} -> {self.source!r}")
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation,
                              other.source, self.target)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return (self.source, self.target) == (other.source, other.target) and \
            np.array_equal(self.rotation, other.rotation) and \
            np.array_equal(self.translation, other.translation)

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "target": self.target,
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, cfg: dict) -> "RigidTransform":
        """Build from ``rotation`` (9 numbers, row-major) or ``quaternion``
        (``[w, x, y, z]``, normalized on load) plus ``translation`` in meters."""
        if not isinstance(cfg, dict):
            raise ConfigError("transform config must be an object")
        try:
            if "rotation" in cfg:
                rot = np.array(cfg["rotation"], dtype=np.float64)
                if rot.size != 9:
                    raise ConfigError("rotation needs 9 numbers")
                rot = rot.reshape(3, 3)
            elif "quaternion" in cfg:
                from scipy.spatial.transform import Rotation

                q = np.array(cfg["quaternion"], dtype=np.float64)
                if q.shape != (4,) or not np.all(np.isfinite(q)) or np.linalg.norm(q) == 0:
                    raise ConfigError("quaternion needs 4 finite numbers [w, x, y, z]")
                rot = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
            else:
                raise ConfigError("transform needs 'rotation' or 'quaternion'")
            t = np.array(cfg.get("translation", [0, 0, 0]), dtype=np.float64)
            if t.shape != (3,):
                raise ConfigError("translation needs 3 numbers")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"transform config: {exc}") from None
        return cls(rot, t, str(cfg.get("source", CAMERA)), str(cfg.get("target", "base")))


def load_transform(path) -> RigidTransform:
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return RigidTransform.from_dict(cfg)


def save_transform(path, transform: RigidTransform, **extra) -> None:
    doc = transform.to_dict()
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def apply_rigid(p: Point3, transform: RigidTransform) -> Point3:
    if p.frame != transform.source:
        raise FrameMismatchError(
            f"point is in frame {p.frame!r}, transform expects {transform.source!r}")
    return Point3.from_array(transform.apply(p.as_array()), transform.target)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in vals):
            raise ConfigError("intrinsics must be finite numbers")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be > 0")

    def to_dict(self) -> dict:
        out = {"f_x": self.fx, "f_y": self.fy, "c_x": self.cx, "c_y": self.cy}
        if self.width is not None:
            out["width"] = self.width
            out["height"] = self.height
        return out

    @classmethod
    def from_dict(cls, cfg: dict) -> "CameraIntrinsics":
        if not isinstance(cfg, dict):
            raise ConfigError("intrinsics config must be an object")
        try:
            return cls(cfg["f_x"], cfg["f_y"], cfg["c_x"], cfg["c_y"],
                       cfg.get("width"), cfg.get("height"))
        except KeyError as exc:
            raise ConfigError(f"intrinsics config missing {exc}") from None


def load_intrinsics(path) -> CameraIntrinsics:
    try:
        return CameraIntrinsics.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def backproject(u: float, v: float, k: float, intr: CameraIntrinsics) -> Point3:
    """Pixel ``(u, v)`` at depth ``k`` meters to a camera-frame point."""
    if not k > 0:
        raise InvalidDepthError(f"depth must be > 0, got {k}")
    return Point3(k * (u - intr.cx) / intr.fx, k * (v - intr.cy) / intr.fy, k)


def project(p, intr: CameraIntrinsics) -> tuple[float, float]:
    x, y, z = p.as_array() if isinstance(p, Point3) else p
    if not z > 0:
        raise InvalidDepthError(f"point behind camera (z={z})")
    return intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy
