import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from closekp.errors import BehindCameraError, CloseKPError, ConfigError
from closekp.geometry import backproject
from closekp.lift import NeighborhoodSpec, lift_keypoint
from closekp.synth import (
    Capsule, Plane, Sphere, generate_sequence, marker_positions, perturb_detections,
    project_keypoints, quantize_mm, render_depth, scene_from_dict, surface_point,
)

import helpers


def _scene(**kw):
    return scene_from_dict(helpers.scene_dict(**kw))


def test_plane_renders_constant():
    depth = render_depth(_scene())
    assert depth.values.shape == (480, 640)
    assert np.all(depth.values == 1000)


def test_empty_scene_is_invalid():
    assert np.all(render_depth(_scene(primitives=[])).values == 0)


def test_sphere_center_depth():
    spec = _scene(primitives=[{"type": "sphere", "center": [0, 0, 0.8], "radius": 0.15}],
                  width=641, height=481)
    depth = render_depth(spec)
    assert abs(int(depth.values[240, 320]) - 650) <= 1
    assert depth.values[0, 0] == 0


def test_nearest_surface_wins():
    spec = _scene(primitives=[{"type": "plane", "z": 1.5},
                              {"type": "sphere", "center": [0, 0, 1.0], "radius": 0.1}])
    v = render_depth(spec).values
    assert v[240, 320] == 900 and v[0, 0] == 1500


def test_capsule_side_and_caps():
    cap = Capsule((-0.2, 0, 1.0), (0.2, 0, 1.0), 0.05)
    rays = np.array([[0.0, 0, 1], [0.24, 0, 1], [0, 0.5, 1]])
    t = cap.intersect(rays)
    assert t[0] == pytest.approx(0.95)
    # beyond the segment end only the end cap is hit
    assert np.isfinite(t[1]) and t[1] == pytest.approx(Sphere((0.2, 0, 1.0), 0.05).intersect(rays[1:2])[0])
    assert np.isinf(t[2])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_capsule_hits_lie_on_surface(seed):
    rng = np.random.default_rng(seed)
    a = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.8, 1.5)])
    b = a + rng.normal(0, 0.2, 3)
    b[2] = max(b[2], 0.7)
    r = float(rng.uniform(0.02, 0.1))
    cap = Capsule(tuple(a), tuple(b), r)
    rays = np.column_stack([rng.uniform(-0.5, 0.5, 200), rng.uniform(-0.5, 0.5, 200), np.ones(200)])
    t = cap.intersect(rays)
    for ray, tt in zip(rays, t):
        if not np.isfinite(tt):
            continue
        p = ray * tt
        s = np.clip((p - a) @ (b - a) / ((b - a) @ (b - a)), 0, 1)
        assert np.linalg.norm(p - (a + s * (b - a))) == pytest.approx(r, abs=1e-9)


def test_primitive_validation():
    with pytest.raises(ConfigError):
        Plane(0)
    with pytest.raises(ConfigError):
        Sphere((0, 0, 0.1), 0.2)
    with pytest.raises(ConfigError):
        Capsule((0, 0, 1), (0, 0, 0.01), 0.05)
    with pytest.raises(ConfigError):
        scene_from_dict(helpers.scene_dict(primitives=[{"type": "cube"}]))


def test_quantization_rounds_half_up():
    z = np.array([1.0004999, 1.0005, 0.0004, np.inf, 70.0])
    assert quantize_mm(z).tolist() == [1000, 1001, 0, 0, 0]


def test_project_keypoints():
    spec = _scene(keypoints={"0": [0, 0, 1], "3": [0.1, -0.2, 2.0]})
    kp = project_keypoints(spec)
    assert (kp[0].u, kp[0].v) == (320.0, 240.0)
    assert (kp[3].u, kp[3].v) == (350.0, 180.0)
    with pytest.raises(BehindCameraError):
        project_keypoints(_scene(keypoints={"0": [0, 0, -1]}))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projection_round_trip(seed):
    rng = np.random.default_rng(seed)
    pts = {str(k): [float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)), float(rng.uniform(0.3, 4))]
           for k in range(17)}
    spec = _scene(keypoints=pts)
    kp = project_keypoints(spec)
    for k, (x, y, z) in spec.keypoints3d.items():
        assert kp[k].u == pytest.approx(600.0 * x / z + 320.0, abs=1e-12)
        assert kp[k].v == pytest.approx(600.0 * y / z + 240.0, abs=1e-12)
        back = backproject(kp[k].u, kp[k].v, z, spec.intrinsics)
        assert np.abs(back.as_array() - [x, y, z]).max() < 1e-12


def test_perturb_zero_sigma_is_exact():
    spec = _scene(keypoints={"0": [0, 0, 1], "5": [0.1, 0.1, 1]})
    kp = project_keypoints(spec)
    det = perturb_detections(spec, kp)
    assert det.keypoints[0].tolist() == [320, 240, 1] and det.keypoints[5, :2].tolist() == [380, 300]
    assert det.keypoints[1].tolist() == [0, 0, 0]
    assert det.score == 1.0


def test_perturb_sigma_statistics():
    spec = _scene(pixel_sigma=2.0, confidence=(0.2, 0.9),
                  keypoints={str(k): [0, 0, 1] for k in range(17)})
    kp = project_keypoints(spec)
    rng = np.random.default_rng(5)
    devs, confs = [], []
    for _ in range(600):  # 600 * 17 > 1e4 samples
        det = perturb_detections(spec, kp, rng)
        devs.append(det.keypoints[:, 0] - 320)
        confs.append(det.keypoints[:, 2])
    devs = np.concatenate(devs)
    assert devs.size >= 10_000
    assert abs(devs.std() - 2.0) <= 0.1
    confs = np.concatenate(confs)
    assert confs.min() >= 0.2 and confs.max() <= 0.9


def test_perturb_deterministic():
    spec = _scene(pixel_sigma=1.5, confidence=(0.0, 1.0), keypoints={"2": [0.1, 0, 1]})
    kp = project_keypoints(spec)
    a = perturb_detections(spec, kp)
    b = perturb_detections(spec, kp)
    assert np.array_equal(a.keypoints, b.keypoints)


def test_sequence_deterministic_and_distinct_frames():
    spec = _scene(frames=3, pixel_sigma=1.0, depth_sigma_mm=3.0, seed=9)
    one = list(generate_sequence(spec))
    two = list(generate_sequence(spec))
    for a, b in zip(one, two):
        assert a.depth.values.tobytes() == b.depth.values.tobytes()
        assert np.array_equal(a.detection.keypoints, b.detection.keypoints)
    assert not np.array_equal(one[0].depth.values, one[1].depth.values)
    assert [f.t for f in one] == [0.0, 1 / 30, 2 / 30]
    other = list(generate_sequence(_scene(frames=3, pixel_sigma=1.0, depth_sigma_mm=3.0, seed=10)))
    assert not np.array_equal(one[0].depth.values, other[0].depth.values)


def test_sequence_uses_documented_generator():
    spec = _scene(frames=2, depth_sigma_mm=2.0, seed=4, width=8, height=4)
    frames = list(generate_sequence(spec))
    child = np.random.SeedSequence(4).spawn(2)[1]
    rng = np.random.Generator(np.random.PCG64(child))
    z = 1.0 + rng.standard_normal((4, 8)) * 0.002
    expect = np.floor(z * 1000 + 0.5).astype(np.uint16)
    assert np.array_equal(frames[1].depth.values, expect)


def test_noiseless_plane_lift_end_to_end():
    spec = _scene(primitives=[{"type": "plane", "z": 1.2}],
                  keypoints={str(k): [0.05 * k - 0.4, 0.02 * k - 0.15, 1.2] for k in range(17)})
    depth = render_depth(spec)
    for k, kp in project_keypoints(spec).items():
        p = lift_keypoint(depth, (kp.u, kp.v, 1.0), "body", NeighborhoodSpec(), spec.intrinsics)
        truth = surface_point(spec, kp.u, kp.v)
        half_px = 0.5 * 1.2 / 600 * math.sqrt(2)
        assert np.linalg.norm(p.as_array() - truth) <= 0.001 + half_px


def test_surface_point_miss():
    with pytest.raises(ValueError):
        surface_point(_scene(primitives=[]), 10, 10)


def test_marker_positions_midpoint_is_keypoint():
    mocap = {"transform": {"rotation": [0, -1, 0, 1, 0, 0, 0, 0, 1], "translation": [1, 2, 3],
                           "source": "camera", "target": "mocap"}, "marker_offset": 0.02}
    spec = _scene(keypoints={"9": [0.1, 0.2, 1.0]}, mocap=mocap)
    m = marker_positions(spec)
    mid = (m["k9a"] + m["k9b"]) / 2
    assert mid == pytest.approx(spec.mocap_transform.apply([0.1, 0.2, 1.0]))
    assert np.linalg.norm(m["k9a"] - m["k9b"]) == pytest.approx(0.04)


@pytest.mark.parametrize("patch", [
    {"bogus": 1}, {"width": 0}, {"frames": 0}, {"fps": 0}, {"keypoints": {"40": [0, 0, 1]}},
    {"noise": {"pixel_sigma": -1}}, {"noise": {"confidence": [0.9, 0.1]}},
    {"intrinsics": {"f_x": 1}}, {"layout": "nope"},
])
def test_scene_validation(patch):
    cfg = helpers.scene_dict()
    cfg.update(patch)
    with pytest.raises(CloseKPError):
        scene_from_dict(cfg)
