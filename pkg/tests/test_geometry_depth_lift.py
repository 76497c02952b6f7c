import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from closekp.annotations import DetectionRecord
from closekp.depth import DepthFrame, decode_pgm, encode_pgm, read_depth, write_depth
from closekp.errors import ConfigError, FrameMismatchError, InvalidDepthError, ParseError, ValidationError
from closekp.geometry import (
    CameraIntrinsics, Point3, RigidTransform, apply_rigid, backproject, load_transform, project,
    save_transform,
)
from closekp.layouts import get_layout
from closekp.lift import (
    InsufficientDepthFailure, LiftStatus, NeighborhoodSpec, NoDepthFailure, OutOfFrameFailure,
    lift_keypoint, lift_person, pixel_radius,
)

import oracles

INTR = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)
SPEC = NeighborhoodSpec()


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def _plane(mm, h=480, w=640):
    return DepthFrame(np.full((h, w), mm, dtype=np.uint16))


# -- geometry -----------------------------------------------------------------

def test_backproject_examples():
    assert backproject(320, 240, 1.0, INTR) == Point3(0.0, 0.0, 1.0)
    p = backproject(920, 240, 1.2, INTR)
    assert p.x == pytest.approx(1.2) and p.z == 1.2
    for k in (0.0, -1.0, float("nan")):
        with pytest.raises(InvalidDepthError):
            backproject(1, 1, k, INTR)


@settings(max_examples=300, deadline=None)
@given(st.floats(-1000, 2000), st.floats(-1000, 2000), st.floats(0.05, 20),
       st.floats(100, 2000), st.floats(100, 2000))
def test_projection_round_trip(u, v, k, fx, fy):
    intr = CameraIntrinsics(fx, fy, 310.5, 250.25)
    pu, pv = project(backproject(u, v, k, intr), intr)
    assert abs(pu - u) <= 1e-9 and abs(pv - v) <= 1e-9


def test_project_behind_camera():
    with pytest.raises(InvalidDepthError):
        project(Point3(0, 0, -1), INTR)


def test_intrinsics_validation():
    with pytest.raises(ConfigError):
        CameraIntrinsics(0, 1, 0, 0)
    with pytest.raises(ConfigError):
        CameraIntrinsics.from_dict({"f_x": 1, "f_y": 1, "c_x": 0})
    intr = CameraIntrinsics.from_dict(INTR.to_dict())
    assert intr == INTR


def test_point_must_be_finite():
    with pytest.raises(ValueError):
        Point3(float("inf"), 0, 0)


def test_apply_rigid_examples():
    p = Point3(0.1, -0.2, 0.3)
    assert apply_rigid(p, RigidTransform.identity()) == Point3(0.1, -0.2, 0.3, "base")
    shift = RigidTransform(np.eye(3), [0, 0, 1])
    assert apply_rigid(Point3(0, 0, 0), shift) == Point3(0, 0, 1, "base")
    with pytest.raises(FrameMismatchError):
        apply_rigid(Point3(0, 0, 0, "base"), shift)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_inverse_composition(seed):
    rng = np.random.default_rng(seed)
    t = RigidTransform(_random_rotation(rng), rng.uniform(-3, 3, 3))
    p = Point3(*rng.uniform(-2, 2, 3))
    back = apply_rigid(apply_rigid(p, t), t.inverse())
    assert back.frame == "camera"
    assert np.abs(back.as_array() - p.as_array()).max() <= 1e-12
    ident = t.inverse().compose(t)
    assert np.allclose(ident.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(ident.translation, 0, atol=1e-12)


def test_compose_frame_check():
    a = RigidTransform(np.eye(3), [1, 0, 0], "camera", "base")
    b = RigidTransform(np.eye(3), [0, 1, 0], "base", "mocap")
    c = b.compose(a)
    assert (c.source, c.target) == ("camera", "mocap")
    assert np.array_equal(c.translation, [1, 1, 0])
    with pytest.raises(FrameMismatchError):
        a.compose(a)


def test_transform_validation():
    with pytest.raises(ConfigError):
        RigidTransform(np.diag([1, 1, -1]), np.zeros(3))
    with pytest.raises(ConfigError):
        RigidTransform(2 * np.eye(3), np.zeros(3))
    with pytest.raises(ConfigError):
        RigidTransform.from_dict({"translation": [0, 0, 0]})
    with pytest.raises(ConfigError):
        RigidTransform.from_dict({"rotation": [1, 0, 0], "translation": [0, 0, 0]})
    with pytest.raises(ConfigError):
        RigidTransform.from_dict({"quaternion": [0, 0, 0, 0], "translation": [0, 0, 0]})


def test_transform_quaternion_and_file(tmp_path):
    # 90 degrees about z, written unnormalized
    h = math.sqrt(0.5)
    t = RigidTransform.from_dict({"quaternion": [2 * h, 0, 0, 2 * h], "translation": [1, 2, 3]})
    assert np.allclose(t.rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
    save_transform(tmp_path / "t.json", t, note="x")
    back = load_transform(tmp_path / "t.json")
    assert back == t


# -- pixel radius ---------------------------------------------------------------

def test_pixel_radius_examples():
    assert pixel_radius(0.020, 1.0, INTR) == pytest.approx(12.0)
    assert pixel_radius(0.020, 2.0, INTR) == pixel_radius(0.020, 1.0, INTR) / 2
    assert pixel_radius(0.003, 0.7, INTR, "x") == pixel_radius(0.003, 0.7, INTR, "y")
    with pytest.raises(InvalidDepthError):
        pixel_radius(0.02, 0.0, INTR)
    with pytest.raises(ConfigError):
        pixel_radius(0.0, 1.0, INTR)


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(0.05, 20), st.floats(10, 5000))
def test_pixel_radius_identity(r, k, f):
    intr = CameraIntrinsics(f, f, 0, 0)
    assert pixel_radius(r, k, intr) * k / f == pytest.approx(r, rel=1e-14)


# -- depth io -------------------------------------------------------------------

def test_depth_frame_validation():
    with pytest.raises(ValidationError):
        DepthFrame(np.zeros((0, 3)))
    with pytest.raises(ValidationError):
        DepthFrame(np.full((2, 2), 70000))
    assert DepthFrame(np.array([[1000]])).meters()[0, 0] == 1.0


@pytest.mark.parametrize("suffix", [".pgm", ".png"])
def test_depth_round_trip(tmp_path, suffix):
    rng = np.random.default_rng(0)
    frame = DepthFrame(rng.integers(0, 65536, (7, 11)).astype(np.uint16))
    write_depth(tmp_path / f"d{suffix}", frame)
    assert read_depth(tmp_path / f"d{suffix}") == frame


def test_pgm_header_variants():
    raster = np.array([[1, 2], [3, 65535]], dtype=">u2").tobytes()
    frame = decode_pgm(b"P5 # comment\n2\t2\n65535\n" + raster)
    assert frame.values.tolist() == [[1, 2], [3, 65535]]
    small = decode_pgm(b"P5\n2 1\n255\n" + bytes([7, 9]))
    assert small.values.tolist() == [[7, 9]]
    assert decode_pgm(encode_pgm(frame)) == frame


@pytest.mark.parametrize("data", [
    b"P2\n2 2\n65535\n", b"P5\n2 2\n", b"P5\n2 x\n65535\n", b"P5\n0 2\n65535\n",
    b"P5\n2 2\n65535\n\x00\x01", b"", b"P5\n2 2\n70000\n" + bytes(8),
])
def test_pgm_errors(data):
    with pytest.raises(ParseError):
        decode_pgm(data)


def test_read_depth_rejects_color_png(tmp_path):
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "c.png")
    with pytest.raises(ParseError):
        read_depth(tmp_path / "c.png")
    (tmp_path / "x.bin").write_bytes(b"hello")
    with pytest.raises(ParseError):
        read_depth(tmp_path / "x.bin")


# -- lifting --------------------------------------------------------------------

def _lift_oracle(values, u, v, r, intr, min_fraction=0.1, rng=None):
    """Plain-loop lift with a shuffled pixel order."""
    h, w = len(values), len(values[0])
    col, row = math.floor(u + 0.5), math.floor(v + 0.5)
    best = None
    for rr in range(row - 1, row + 2):
        for cc in range(col - 1, col + 2):
            if 0 <= rr < h and 0 <= cc < w and values[rr][cc] > 0:
                key = ((cc - u) ** 2 + (rr - v) ** 2, rr, cc)
                if best is None or key < best:
                    best = key
    if best is None:
        return None
    k0 = values[best[1]][best[2]] / 1000.0
    hx = max(1, math.floor(intr.fx / k0 * r + 0.5))
    hy = max(1, math.floor(intr.fy / k0 * r + 0.5))
    pts, total = [], 0
    for rr in range(row - hy, row + hy + 1):
        for cc in range(col - hx, col + hx + 1):
            if 0 <= rr < h and 0 <= cc < w:
                total += 1
                if values[rr][cc] > 0:
                    z = values[rr][cc] / 1000.0
                    pts.append((z * (cc - intr.cx) / intr.fx, z * (rr - intr.cy) / intr.fy, z))
    if len(pts) < min_fraction * total:
        return None
    if rng is not None:
        rng.shuffle(pts)
    return tuple(oracles.sorted_median([p[i] for p in pts]) for i in range(3))


def test_lift_plane_exact():
    p = lift_keypoint(_plane(1000), (100.3, 200.7, 1.0), "body", SPEC, INTR)
    assert p.z == 1.0
    assert p.frame == "camera"


def test_lift_ignores_invalid_half():
    vals = np.zeros((480, 640), np.uint16)
    vals[:, ::2] = 1000
    p = lift_keypoint(DepthFrame(vals), (300, 200, 1), "body", SPEC, INTR)
    assert p.z == 1.0


def test_lift_failures():
    with pytest.raises(OutOfFrameFailure):
        lift_keypoint(_plane(1000), (640, 10, 1), "body", SPEC, INTR)
    with pytest.raises(OutOfFrameFailure):
        lift_keypoint(_plane(1000), (-0.6, 10, 1), "body", SPEC, INTR)
    with pytest.raises(OutOfFrameFailure):
        lift_keypoint(_plane(1000), (float("nan"), 10, 1), "body", SPEC, INTR)
    with pytest.raises(NoDepthFailure):
        lift_keypoint(_plane(0), (10, 10, 1), "body", SPEC, INTR)
    vals = np.zeros((480, 640), np.uint16)
    vals[100, 100] = 1000
    with pytest.raises(InsufficientDepthFailure):
        lift_keypoint(DepthFrame(vals), (100, 100, 1), "body", SPEC, INTR)
    with pytest.raises(ConfigError):
        lift_keypoint(_plane(1000), (10, 10, 1), "tail", SPEC, INTR)


def test_spec_validation():
    with pytest.raises(ConfigError):
        NeighborhoodSpec({"body": 0.0})
    with pytest.raises(ConfigError):
        NeighborhoodSpec(min_valid_fraction=0)
    with pytest.raises(ConfigError):
        NeighborhoodSpec(window="hex")
    assert SPEC.radius("body") == 0.020 and SPEC.radius("hand") == SPEC.radius("face") == 0.003


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lift_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    h, w = 60, 80
    vals = rng.integers(400, 3000, (h, w)).astype(np.uint16)
    vals[rng.random((h, w)) < rng.uniform(0, 0.6)] = 0
    intr = CameraIntrinsics(float(rng.uniform(60, 300)), float(rng.uniform(60, 300)), 40.0, 30.0)
    u, v = rng.uniform(-0.49, w - 0.51), rng.uniform(-0.49, h - 0.51)
    r = float(rng.choice([0.003, 0.02, 0.05]))
    spec = NeighborhoodSpec({"body": r})
    expect = _lift_oracle(vals.tolist(), u, v, r, intr, rng=np.random.default_rng(seed + 1))
    try:
        got = lift_keypoint(DepthFrame(vals), (u, v, 1), "body", spec, intr)
    except (NoDepthFailure, InsufficientDepthFailure):
        assert expect is None
        return
    assert expect is not None
    assert (got.x, got.y, got.z) == pytest.approx(expect, rel=1e-12, abs=1e-15)


def test_disc_window_uses_fewer_pixels():
    vals = np.full((100, 100), 1000, np.uint16)
    # the corners of the 25x25 square hold a farther surface
    yy, xx = np.mgrid[0:100, 0:100]
    corner = ((xx - 50) ** 2 + (yy - 50) ** 2 > 12.5 ** 2)
    vals[corner] = 3000
    vals[50, 50] = 1000
    intr = CameraIntrinsics(600, 600, 50, 50)
    rect = lift_keypoint(DepthFrame(vals), (50, 50, 1), "body", SPEC, intr)
    disc = lift_keypoint(DepthFrame(vals), (50, 50, 1), "body", NeighborhoodSpec(window="disc"), intr)
    assert disc.z == 1.0
    assert rect.z == 1.0  # corners are a minority of the square
    core = (xx - 50) ** 2 + (yy - 50) ** 2 <= 9.5 ** 2
    vals[~core] = 3000
    square = (abs(xx - 50) <= 12) & (abs(yy - 50) <= 12)
    disc_px = (xx - 50) ** 2 + (yy - 50) ** 2 <= 144
    # the near core is a minority of the square but a majority of the disc
    assert (core & square).sum() < square.sum() / 2 and (core & disc_px).sum() > disc_px.sum() / 2
    rect = lift_keypoint(DepthFrame(vals), (50, 50, 1), "body", SPEC, intr)
    disc = lift_keypoint(DepthFrame(vals), (50, 50, 1), "body", NeighborhoodSpec(window="disc"), intr)
    assert rect.z == 3.0 and disc.z == 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_median_robust_to_minority_corruption(seed):
    rng = np.random.default_rng(seed)
    vals = rng.integers(990, 1011, (41, 41)).astype(np.uint16)
    intr = CameraIntrinsics(600, 600, 20, 20)
    clean = lift_keypoint(DepthFrame(vals), (20, 20, 1), "body", SPEC, intr)
    # window half-width is round(600/k0*0.02) = 12: 25x25 = 625 pixels
    win = (slice(8, 33), slice(8, 33))
    flat = np.argwhere(np.ones((25, 25), bool))
    pick = flat[rng.choice(625, int(rng.integers(1, 312)), replace=False)]
    bad = vals.copy()
    bad[pick[:, 0] + 8, pick[:, 1] + 8] = rng.integers(1, 65535, len(pick))
    bad[20, 20] = vals[20, 20]  # keep the seed so the window size is unchanged
    dirty = lift_keypoint(DepthFrame(bad), (20, 20, 1), "body", SPEC, intr)
    z = vals[win].astype(float) / 1000
    assert abs(dirty.z - clean.z) <= z.max() - z.min()


def test_lift_person_thresholds():
    layout = get_layout("coco17")
    kps = np.column_stack([np.linspace(100, 500, 17), np.linspace(100, 400, 17),
                           np.linspace(0, 1, 17)])
    det = DetectionRecord(1, kps, 1.0)
    res01 = lift_person(_plane(1500), det, layout, SPEC, INTR, 0.1)
    res03 = lift_person(_plane(1500), det, layout, SPEC, INTR, 0.3)
    skip01 = {i for i, r in res01.items() if r is LiftStatus.SKIPPED}
    skip03 = {i for i, r in res03.items() if r is LiftStatus.SKIPPED}
    assert skip01 < skip03
    assert skip01 == {i for i in range(17) if kps[i, 2] < 0.1}
    assert all(isinstance(res01[i], Point3) and res01[i].z == 1.5 for i in set(range(17)) - skip01)
    zero = DetectionRecord(1, np.column_stack([kps[:, :2], np.zeros(17)]), 1.0)
    assert all(r is LiftStatus.SKIPPED for r in lift_person(_plane(1), zero, layout, SPEC, INTR).values())


def test_lift_person_records_failures():
    layout = get_layout("coco17")
    kps = np.zeros((17, 3))
    kps[:, 2] = 1
    kps[0, :2] = (5000, 5)
    kps[1, :2] = (10, 10)
    vals = np.full((480, 640), 1000, np.uint16)
    vals[:20, :20] = 0
    res = lift_person(DepthFrame(vals), DetectionRecord(1, kps, 1.0), layout, SPEC, INTR)
    assert res[0] is LiftStatus.OUT_OF_FRAME
    assert res[1] is LiftStatus.NO_DEPTH


def test_lift_person_hand_radius_for_halpe():
    layout = get_layout("halpe136")
    kps = np.zeros((136, 3))
    kps[:, :2] = (320, 240)
    kps[:, 2] = 1
    vals = np.full((480, 640), 1000, np.uint16)
    # ring at distance 5 px: inside the 12 px body window, outside the 2 px hand window
    yy, xx = np.mgrid[0:480, 0:640]
    vals[np.maximum(abs(xx - 320), abs(yy - 240)) >= 3] = 2000
    res = lift_person(DepthFrame(vals), DetectionRecord(1, kps, 1.0), layout, SPEC, INTR)
    assert res[0].z == 2.0  # body window dominated by the far ring
    assert res[100].z == 1.0 and res[50].z == 1.0  # hand and face
