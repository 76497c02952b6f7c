"""Synthetic RGB-D scenes with analytic geometry.

Scenes are built from fronto-parallel planes, spheres and capsules (a
segment swept by a sphere). Depth is rendered by intersecting the pinhole
ray of every pixel center with every primitive, keeping the nearest hit and
quantizing to millimeters with round-half-up (``floor(mm + 0.5)``); misses
are 0.

Randomness comes from numpy's PCG64 generator. Frame ``i`` of a sequence
draws from the ``i``-th child of ``SeedSequence(seed)``: depth noise first
(one normal per pixel, row-major), then pixel noise (u, v per keypoint in
index order), then confidences.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .annotations import DetectionRecord, Keypoint
from .depth import DepthFrame
from .errors import BehindCameraError, ConfigError
from .geometry import CameraIntrinsics, RigidTransform
from .layouts import KeypointLayout, get_layout


@dataclass(frozen=True)
class Plane:
    z: float

    def __post_init__(self):
        if not self.z > 0:
            raise ConfigError("plane must lie in front of the camera (z > 0)")

    def intersect(self, d: np.ndarray) -> np.ndarray:
        return np.full(d.shape[:-1], float(self.z))


def _nearest_root(a, b, c):
    """Smallest positive root of a t^2 + b t + c = 0 (inf when none)."""
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 0, t0, np.where(t1 > 0, t1, np.inf))
    return np.where(np.isnan(t), np.inf, t)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if not self.radius > 0 or not self.center[2] - self.radius > 0:
            raise ConfigError("sphere must have radius > 0 and lie in front of the camera")

    def intersect(self, d: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        a = (d * d).sum(-1)
        b = -2.0 * (d @ c)
        cc = c @ c - self.radius ** 2
        return _nearest_root(a, b, cc)


@dataclass(frozen=True)
class Capsule:
    a: tuple[float, float, float]
    b: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(c) for c in self.a))
        object.__setattr__(self, "b", tuple(float(c) for c in self.b))
        if not self.radius > 0:
            raise ConfigError("capsule radius must be > 0")
        if min(self.a[2], self.b[2]) - self.radius <= 0:
            raise ConfigError("capsule must lie in front of the camera")

    def intersect(self, d: np.ndarray) -> np.ndarray:
        pa, pb = np.asarray(self.a), np.asarray(self.b)
        t_best = np.minimum(Sphere(self.a, self.radius).intersect(d),
                            Sphere(self.b, self.radius).intersect(d))
        axis = pb - pa
        length = np.linalg.norm(axis)
        if length == 0:
            return t_best
        w = axis / length
        m = -pa  # ray origin (0) minus segment start
        d_perp = d - (d @ w)[..., None] * w
        m_perp = m - (m @ w) * w
        a = (d_perp * d_perp).sum(-1)
        b = 2.0 * (d_perp @ m_perp)
        c = m_perp @ m_perp - self.radius ** 2
        with np.errstate(invalid="ignore", divide="ignore"):
            t = _nearest_root(np.where(a > 0, a, np.nan), b, c)
        hit = np.isfinite(t)
        s = (np.where(hit, t, 0.0)[..., None] * d - pa) @ w
        t = np.where(hit & (s >= 0) & (s <= length), t, np.inf)
        return np.minimum(t_best, t)


@dataclass(frozen=True)
class NoiseSpec:
    pixel_sigma: float = 0.0
    depth_sigma_mm: float = 0.0
    confidence: tuple[float, float] = (1.0, 1.0)  # uniform [lo, hi]

    def __post_init__(self):
        lo, hi = self.confidence
        object.__setattr__(self, "confidence", (float(lo), float(hi)))
        if self.pixel_sigma < 0 or self.depth_sigma_mm < 0:
            raise ConfigError("noise sigmas must be >= 0")
        if not 0 <= lo <= hi:
            raise ConfigError("confidence range must satisfy 0 <= lo <= hi")


@dataclass(frozen=True)
class SceneSpec:
    intrinsics: CameraIntrinsics
    width: int
    height: int
    primitives: tuple = ()
    keypoints3d: Mapping[int, tuple[float, float, float]] = field(default_factory=dict)
    noise: NoiseSpec = NoiseSpec()
    seed: int = 0
    layout: str = "coco17"
    frames: int = 1
    fps: float = 30.0
    # Optional MoCap emulation: markers written in the target frame of this transform.
    mocap_transform: RigidTransform | None = None
    marker_offset: float = 0.01

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError("image size must be at least 1x1")
        if self.frames < 1 or not self.fps > 0:
            raise ConfigError("frames must be >= 1 and fps > 0")
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "keypoints3d",
                           {int(k): tuple(float(c) for c in v) for k, v in self.keypoints3d.items()})
        total = self.layout_obj.total
        for k in self.keypoints3d:
            if not 0 <= k < total:
                raise ConfigError(f"keypoint {k} outside layout {self.layout}")

    @property
    def layout_obj(self) -> KeypointLayout:
        return get_layout(self.layout)


def _primitive(cfg) -> Plane | Sphere | Capsule:
    kind = cfg.get("type")
    if kind == "plane":
        return Plane(float(cfg["z"]))
    if kind == "sphere":
        return Sphere(tuple(cfg["center"]), float(cfg["radius"]))
    if kind == "capsule":
        return Capsule(tuple(cfg["a"]), tuple(cfg["b"]), float(cfg["radius"]))
    raise ConfigError(f"unknown primitive type {kind!r}")


_SCENE_KEYS = {"intrinsics", "width", "height", "primitives", "keypoints", "noise", "seed",
               "layout", "frames", "fps", "mocap"}


def scene_from_dict(cfg: dict) -> SceneSpec:
    if not isinstance(cfg, dict):
        raise ConfigError("scene config must be an object")
    unknown = set(cfg) - _SCENE_KEYS
    if unknown:
        raise ConfigError(f"unknown scene keys: {', '.join(sorted(unknown))}")
    try:
        noise = cfg.get("noise", {})
        mocap = cfg.get("mocap")
        return SceneSpec(
            intrinsics=CameraIntrinsics.from_dict(cfg["intrinsics"]),
            width=int(cfg["width"]),
            height=int(cfg["height"]),
            primitives=tuple(_primitive(p) for p in cfg.get("primitives", [])),
            keypoints3d={int(k): tuple(v) for k, v in cfg.get("keypoints", {}).items()},
            noise=NoiseSpec(float(noise.get("pixel_sigma", 0.0)),
                            float(noise.get("depth_sigma_mm", 0.0)),
                            tuple(noise.get("confidence", (1.0, 1.0)))),
            seed=int(cfg.get("seed", 0)),
            layout=str(cfg.get("layout", "coco17")),
            frames=int(cfg.get("frames", 1)),
            fps=float(cfg.get("fps", 30.0)),
            mocap_transform=RigidTransform.from_dict(mocap["transform"]) if mocap else None,
            marker_offset=float(mocap.get("marker_offset", 0.01)) if mocap else 0.01,
        )
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"scene config: {exc!r}") from None


def load_scene(path) -> SceneSpec:
    try:
        return scene_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def pixel_rays(spec: SceneSpec) -> np.ndarray:
    """``(H, W, 3)`` ray directions with unit z through every pixel center."""
    intr = spec.intrinsics
    cols = (np.arange(spec.width) - intr.cx) / intr.fx
    rows = (np.arange(spec.height) - intr.cy) / intr.fy
    d = np.empty((spec.height, spec.width, 3))
    d[..., 0] = cols[None, :]
    d[..., 1] = rows[:, None]
    d[..., 2] = 1.0
    return d


def analytic_depth(spec: SceneSpec, d: np.ndarray | None = None) -> np.ndarray:
    """Exact z (meters) of the nearest surface per ray; inf on misses."""
    if d is None:
        d = pixel_rays(spec)
    z = np.full(d.shape[:-1], np.inf)
    for prim in spec.primitives:
        z = np.minimum(z, prim.intersect(d))
    return z  # rays have unit z, so ray parameter == depth


def quantize_mm(z: np.ndarray) -> np.ndarray:
    mm = np.floor(np.where(np.isfinite(z), z, 0.0) * 1000.0 + 0.5)
    mm = np.where(np.isfinite(z) & (mm >= 1) & (mm <= 65535), mm, 0)
    return mm.astype(np.uint16)


def render_depth(spec: SceneSpec, rng: np.random.Generator | None = None) -> DepthFrame:
    z = analytic_depth(spec)
    if spec.noise.depth_sigma_mm > 0:
        rng = rng if rng is not None else np.random.default_rng(spec.seed)
        noise = rng.standard_normal(z.shape) * (spec.noise.depth_sigma_mm / 1000.0)
        z = np.where(np.isfinite(z), z + noise, z)
    return DepthFrame(quantize_mm(z))


def surface_point(spec: SceneSpec, u: float, v: float) -> np.ndarray:
    """Analytic 3D surface point seen through image coordinate ``(u, v)``."""
    intr = spec.intrinsics
    d = np.array([[(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0]])
    z = analytic_depth(spec, d)[0]
    if not np.isfinite(z):
        raise ValueError(f"no surface behind pixel ({u}, {v})")
    return d[0] * z


def project_keypoints(spec: SceneSpec) -> dict[int, Keypoint]:
    intr = spec.intrinsics
    out = {}
    for k, (x, y, z) in sorted(spec.keypoints3d.items()):
        if not z > 0:
            raise BehindCameraError(f"keypoint {k} is behind the camera (z={z})")
        out[k] = Keypoint(intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy, 1.0)
    return out


def perturb_detections(spec: SceneSpec, keypoints2d: Mapping[int, Keypoint],
                       rng: np.random.Generator | None = None, image_id=0) -> DetectionRecord:
    """Pseudo-detection: projections plus Gaussian pixel noise and sampled confidences.

    Keypoints absent from ``keypoints2d`` are ``(0, 0, 0)``. The person
    score is the mean sampled confidence.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    total = spec.layout_obj.total
    ids = sorted(keypoints2d)
    kps = np.zeros((total, 3))
    uv = np.array([[keypoints2d[k][0], keypoints2d[k][1]] for k in ids]).reshape(-1, 2)
    if spec.noise.pixel_sigma > 0:
        uv = uv + rng.standard_normal(uv.shape) * spec.noise.pixel_sigma
    lo, hi = spec.noise.confidence
    conf = rng.uniform(lo, hi, len(ids)) if hi > lo else np.full(len(ids), lo)
    for n, k in enumerate(ids):
        kps[k] = (uv[n, 0], uv[n, 1], conf[n])
    score = float(conf.mean()) if len(ids) else 0.0
    return DetectionRecord(image_id=image_id, keypoints=kps, score=score)


@dataclass
class SynthFrame:
    index: int
    t: float
    depth: DepthFrame
    detection: DetectionRecord


def generate_sequence(spec: SceneSpec) -> Iterator[SynthFrame]:
    children = np.random.SeedSequence(spec.seed).spawn(spec.frames)
    projected = project_keypoints(spec)
    for i, child in enumerate(children):
        rng = np.random.Generator(np.random.PCG64(child))
        depth = render_depth(spec, rng)
        det = perturb_detections(spec, projected, rng, image_id=i)
        yield SynthFrame(i, i / spec.fps, depth, det)


def marker_positions(spec: SceneSpec) -> dict[str, np.ndarray]:
    """Two markers per keypoint, ``marker_offset`` either side along x, in the MoCap frame."""
    transform = spec.mocap_transform or RigidTransform.identity("camera", "mocap")
    off = np.array([spec.marker_offset, 0.0, 0.0])
    out = {}
    for k, p in sorted(spec.keypoints3d.items()):
        p = np.asarray(p)
        out[f"k{k}a"] = transform.apply(p - off)
        out[f"k{k}b"] = transform.apply(p + off)
    return out
