import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nearps.errors import DomainError
from nearps.geometry import (CameraIntrinsics, DepthMap, NormalMap, angular_error_deg,
                             back_project, flat_plane_init, normals_from_depth, viewing_vector)
from nearps.scenes import plane_scene, sphere_scene

CAM = CameraIntrinsics(500.0, 500.0, 250.0, 250.0, 500, 500)


@pytest.mark.parametrize("u, v, z, expected", [
    (250, 250, 1.0, [0.0, 0.0, 1.0]),
    (500, 250, 1.0, [0.5, 0.0, 1.0]),
    (250, 0, 2.0, [0.0, -1.0, 2.0]),
])
def test_back_project_examples(u, v, z, expected):
    np.testing.assert_allclose(back_project(CAM, u, v, z), expected, atol=1e-15)


def test_back_project_rejects_non_positive_depth():
    with pytest.raises(DomainError):
        back_project(CAM, 10, 10, 0.0)
    with pytest.raises(DomainError):
        back_project(CAM, 10, 10, -1.0)


@given(st.floats(0, 499), st.floats(0, 499), st.floats(1e-3, 1e3))
def test_project_inverts_back_project(u, v, z):
    X = back_project(CAM, u, v, z)
    assert X[2] == z
    pu, pv = CAM.project(X)
    assert abs(pu - u) < 1e-9 * max(1.0, abs(u)) and abs(pv - v) < 1e-9 * max(1.0, abs(v))


def test_viewing_vector_examples():
    np.testing.assert_allclose(viewing_vector(CAM, 250, 250), [0, 0, -1])
    np.testing.assert_allclose(viewing_vector(CAM, 750, 250), np.array([-1, 0, -1]) / np.sqrt(2))
    np.testing.assert_array_equal(viewing_vector(CAM, 30, 70, 0.5), viewing_vector(CAM, 30, 70, 2.0))


@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
def test_viewing_vector_unit_and_facing(u, v):
    V = viewing_vector(CAM, u, v)
    assert abs(np.linalg.norm(V) - 1.0) < 1e-12
    assert V[2] < 0


def test_viewing_vector_matches_negated_point():
    X = back_project(CAM, 123.0, 321.0, 0.7)
    np.testing.assert_allclose(viewing_vector(CAM, 123.0, 321.0, 0.7), -X / np.linalg.norm(X))


def test_depth_map_invariants():
    with pytest.raises(DomainError):
        DepthMap(np.array([[1.0, -1.0]]), np.array([[True, True]]))
    with pytest.raises(DomainError):
        DepthMap(np.array([[1.0, np.nan]]), np.array([[True, True]]))
    d = DepthMap(np.array([[1.0, np.nan]]), np.array([[True, False]]))
    assert d.values[0, 1] == 0.0


def test_normal_map_invariants():
    mask = np.ones((1, 1), dtype=bool)
    with pytest.raises(DomainError):
        NormalMap(np.array([[[0.0, 0.0, 0.5]]]), mask)
    with pytest.raises(DomainError):
        NormalMap(np.array([[[0.0, 0.0, 1.0]]]), mask)
    NormalMap(np.array([[[0.0, 0.0, -1.0]]]), mask)


def test_camera_rejects_bad_intrinsics():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, 9.0, 1.0, 4, 4)


def test_normalized_focal_length():
    assert CAM.f_norm == 2.0


def test_normals_of_constant_depth_face_camera():
    cam = CameraIntrinsics(100.0, 100.0, 20.0, 15.0, 40, 30)
    mask = np.zeros(cam.shape, dtype=bool)
    mask[3:27, 5:35] = True
    n = normals_from_depth(cam, flat_plane_init(cam, mask, 0.5))
    np.testing.assert_allclose(n.values[n.mask], [[0, 0, -1]] * n.mask.sum(), atol=1e-12)


def test_normals_of_sphere_match_analytic():
    s = sphere_scene()
    n = normals_from_depth(s.camera, s.depth)
    # interior: all four neighbours inside the mask
    m = s.depth.mask
    inner = m.copy()
    inner[1:-1, 1:-1] &= m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    inner &= n.mask
    err = angular_error_deg(n.values[inner], s.normals.values[inner])
    assert err.mean() < 1.0


def test_normals_of_slanted_plane_match_analytic():
    s = plane_scene(slope=(0.4, 0.0))
    n = normals_from_depth(s.camera, s.depth)
    inner = n.mask.copy()
    inner[[0, -1], :] = False
    inner[:, [0, -1]] = False
    err = angular_error_deg(n.values[inner], s.normals.values[inner])
    assert err.max() < 0.5


def test_isolated_pixel_is_masked_out():
    cam = CameraIntrinsics(10.0, 10.0, 2.0, 2.0, 5, 5)
    mask = np.zeros(cam.shape, dtype=bool)
    mask[2, 2] = True
    mask[0, 0:2] = True
    mask[1, 0] = True
    n = normals_from_depth(cam, flat_plane_init(cam, mask, 1.0))
    assert not n.mask[2, 2]
    assert n.mask[0, 0]


def test_normals_from_empty_depth_raises():
    cam = CameraIntrinsics(10.0, 10.0, 2.0, 2.0, 5, 5)
    with pytest.raises(DomainError):
        normals_from_depth(cam, flat_plane_init(cam, np.zeros(cam.shape, bool), 1.0))


@pytest.mark.parametrize("dist", [0.3, 1.5])
def test_flat_plane_init_values(dist):
    mask = np.ones(CAM.shape, dtype=bool)
    d = flat_plane_init(CAM, mask, dist)
    assert np.all(d.values == dist)


def test_flat_plane_init_empty_mask():
    d = flat_plane_init(CAM, np.zeros(CAM.shape, dtype=bool), 0.3)
    assert not d.mask.any()


def test_flat_plane_init_rejects_non_positive_distance():
    with pytest.raises(DomainError):
        flat_plane_init(CAM, np.ones(CAM.shape, dtype=bool), 0.0)


@settings(max_examples=50)
@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9))
def test_angular_error_of_known_rotation(a, b):
    theta = abs(a - b)
    n1 = np.array([np.sin(a), 0.0, -np.cos(a)])
    n2 = np.array([np.sin(b), 0.0, -np.cos(b)])
    assert abs(angular_error_deg(n1, n2) - np.degrees(theta)) < 1e-9
