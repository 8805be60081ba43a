import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmslf.rig import (RigConfig, RigError, camera_position, center_view_points, light_position,
                       pixel_ray, project_point, project_points)

from conftest import BANDS, RINGS, make_rig


def test_camera_position_examples():
    cfg = make_rig()
    assert np.allclose(camera_position(0, 0, cfg), [29, 0], atol=1e-12)
    assert np.allclose(camera_position(3, 0, cfg), [0, 29], atol=1e-12)
    # scalar oracle: r cos(pi/6), r sin(pi/6) with r = 31
    assert np.allclose(camera_position(1, 2, cfg), [26.846787517317598, 15.5], atol=1e-12)


def test_light_position_examples():
    cfg = make_rig(light_phase=0.0)
    assert np.allclose(light_position(0, cfg), [80, 0, 0], atol=1e-12)
    assert np.allclose(light_position(6, cfg), [-80, 0, 0], atol=1e-12)
    assert np.allclose(light_position(1, cfg), [69.28203230275508, 40, 0], atol=1e-12)


def test_default_light_phase_avoids_spokes():
    cfg = make_rig()
    assert cfg.light_phase == pytest.approx(math.pi / 12)
    spokes = cfg.spoke_angles
    for th in cfg.light_angles:
        assert np.min(np.abs(np.angle(np.exp(1j * (spokes - th))))) > 0.1


def test_index_errors():
    cfg = make_rig()
    with pytest.raises(IndexError):
        camera_position(12, 0, cfg)
    with pytest.raises(IndexError):
        camera_position(0, -1, cfg)
    with pytest.raises(IndexError):
        light_position(12, cfg)
    with pytest.raises(IndexError):
        pixel_ray(0, 0, 48, 0, cfg)


def test_rings_equidistant_and_equiangular():
    cfg = make_rig()
    pos = cfg.camera_positions()
    for j, r in enumerate(RINGS):
        assert np.allclose(np.linalg.norm(pos[:, j], axis=1), r, atol=1e-12)
        ang = np.unwrap(np.arctan2(pos[:, j, 1], pos[:, j, 0]))
        assert np.allclose(np.diff(ang), 2 * math.pi / 12, atol=1e-12)
    lp = cfg.light_positions()
    assert np.allclose(np.linalg.norm(lp[:, :2], axis=1), 80, atol=1e-12)
    assert np.allclose(lp[:, 2], 0)
    assert np.allclose(np.diff(np.unwrap(np.arctan2(lp[:, 1], lp[:, 0]))), 2 * math.pi / 12)
    assert cfg.num_lights == cfg.num_rings


def test_principal_ray():
    cfg = make_rig(res=49)
    ray = pixel_ray(5, 7, 24, 24, cfg)
    assert np.allclose(ray.direction, [0, 0, 1])
    assert ray.origin[2] == 0
    X = np.array([*camera_position(5, 7, cfg), 117.0])
    assert project_point(X, 5, 7, cfg) == pytest.approx((24, 24), abs=1e-12)


def test_ray_direction_through_metric_point():
    cfg = make_rig(res=320, half_width=0.25)
    cx, cy = cfg.principal_point
    ray = pixel_ray(0, 0, cx + 0.1 / cfg.pixel_pitch, cy, cfg)
    d = np.array([0.1, 0, 1]) / math.hypot(0.1, 1)
    assert np.allclose(ray.direction, d, atol=1e-12)


def test_projection_hand_computed():
    # metric plane spans +-0.25: pitch 0.5/320, u = (0 - 29)/120 / pitch + 159.5
    cfg = make_rig(res=320, half_width=0.25)
    u, v = project_point([0, 0, 120], 0, 0, cfg)
    assert u == pytest.approx(4.833333333333333, abs=1e-9)
    assert v == pytest.approx(159.5, abs=1e-12)


def test_projection_behind_rig():
    with pytest.raises(RigError):
        project_point([0, 0, 0], 0, 0, make_rig())


@settings(max_examples=200, deadline=None)
@given(i=st.integers(0, 11), j=st.integers(0, 11), u=st.floats(0, 47), v=st.floats(0, 47),
       z=st.floats(0.5, 500))
def test_ray_projection_roundtrip(i, j, u, v, z):
    cfg = make_rig()
    X = pixel_ray(i, j, u, v, cfg).at(z)
    assert X[2] == pytest.approx(z, rel=1e-12)
    uu, vv = project_point(X, i, j, cfg)
    assert abs(uu - u) < 1e-9 and abs(vv - v) < 1e-9


def test_vectorised_projection_matches_scalar():
    cfg = make_rig()
    rng = np.random.default_rng(0)
    X = rng.uniform([-10, -10, 100], [10, 10, 130], (20, 3))
    cams = cfg.camera_positions()
    for i, j in [(0, 0), (4, 7), (11, 11)]:
        u, v = project_points(X, cams[i, j], cfg)
        ref = np.array([project_point(x, i, j, cfg) for x in X])
        assert np.allclose(np.stack([u, v], 1), ref, atol=1e-12)


def test_center_view_points_project_back():
    cfg = make_rig()
    u, v, z = np.array([3.0, 20.5]), np.array([40.0, 7.25]), np.array([110.0, 121.0])
    X = center_view_points(u, v, z, cfg)
    uu, vv = project_points(X, np.zeros(2), cfg)
    assert np.allclose(uu, u) and np.allclose(vv, v)


@pytest.mark.parametrize("kw", [
    dict(ring_radii=[29, 30]),                        # too few rings
    dict(cameras_per_ring=2),
    dict(ring_radii=[29, 31, 30] + list(RINGS[3:])),  # not monotone
    dict(ring_radii=[-1.0] + list(RINGS[1:])),
    dict(wavelengths=BANDS[::-1]),
    dict(wavelengths=BANDS[:5]),
    dict(depth_min=130.0),
    dict(depth_step=0.0),
])
def test_invalid_rig(kw):
    base = dict(ring_radii=RINGS, wavelengths=BANDS)
    base.update(kw)
    with pytest.raises(RigError):
        RigConfig(**base)


def test_decreasing_radii_allowed():
    RigConfig(ring_radii=RINGS[::-1], wavelengths=BANDS)


def test_depth_layers_derived_from_range():
    cfg = make_rig()
    d = cfg.depths
    assert d.size == 86
    assert d[0] == 108.0 and d[-1] == pytest.approx(125.0)


def test_dict_roundtrip_and_ranges():
    cfg = RigConfig.from_dict({"ring_radii": {"start": 29, "stop": 40, "step": 1},
                               "wavelengths": {"start": 440, "stop": 660, "step": 20},
                               "depth_range": [108, 125]})
    assert cfg.ring_radii == tuple(RINGS) and cfg.wavelengths == tuple(BANDS)
    assert RigConfig.from_dict(cfg.to_dict()) == cfg
