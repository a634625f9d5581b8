import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nearps.errors import DomainError
from nearps.geometry import CameraIntrinsics, DepthMap
from nearps.lighting import (LightSet, PointLight, attenuation, compensate, light_field,
                             lighting_vector)
from nearps.renderer import Material, render_scene, shade
from nearps.geometry import back_project, viewing_vector
from nearps.scenes import ring_lights, sphere_scene


def _light(pos=(0, 0, 0), phi=1.0, d=(0, 0, 1), mu=1.0):
    return PointLight(pos, phi, d, mu)


@pytest.mark.parametrize("P, X, L, dist", [
    ([0, 0, 0], [0, 0, 0.5], [0, 0, -1], 0.5),
    ([0, 0, 0], [0.3, 0, 0.4], [-0.6, 0, -0.8], 0.5),
    ([0.1, 0, 0], [0.1, 0, 1.0], [0, 0, -1], 1.0),
])
def test_lighting_vector_examples(P, X, L, dist):
    L_hat, d = lighting_vector(_light(P), np.array(X))
    np.testing.assert_allclose(L_hat, L, atol=1e-15)
    assert d == pytest.approx(dist, abs=1e-15)


def test_lighting_vector_coincident_point():
    with pytest.raises(DomainError):
        lighting_vector(_light(), np.zeros(3))


def test_attenuation_examples():
    np.testing.assert_allclose(attenuation(_light(), np.array([0, 0, 0.5])), [4, 4, 4])
    np.testing.assert_allclose(attenuation(_light(phi=2.0, mu=2.0), np.array([0.3, 0, 0.4])),
                               [5.12] * 3)
    d = np.array([0.6, 0.0, 0.8])
    X = np.array([0.2, 0.1, 0.3])
    np.testing.assert_allclose(attenuation(_light(d=d, mu=0.0), X), [1 / np.sum(X**2)] * 3)


def test_attenuation_behind_emitter_is_zero():
    a = attenuation(_light(), np.array([0.0, 0.0, -0.5]))
    assert np.all(a == 0)
    assert not light_field([_light()], np.array([0.0, 0.0, -0.5])).valid[0]


@given(st.floats(0.1, 10.0), st.floats(0.0, 3.0))
def test_attenuation_inverse_square(k, mu):
    light = _light(phi=(0.5, 1.0, 2.0), d=(0.0, 0.6, 0.8), mu=mu)
    X = np.array([0.1, 0.2, 0.4])
    ratio = attenuation(light, k * X) / attenuation(light, X)
    np.testing.assert_allclose(ratio, 1.0 / k**2, rtol=1e-12)


@given(st.floats(0.01, 3.0), st.floats(0.0, 1.5), st.floats(0.0, 1.5))
def test_attenuation_monotone_in_angle(mu, t1, t2):
    lo, hi = sorted((t1, t2))
    light = _light(mu=mu)
    X = lambda t: np.array([np.sin(t), 0.0, np.cos(t)])
    assert attenuation(light, X(hi))[0] <= attenuation(light, X(lo))[0]


def test_light_invariants():
    with pytest.raises(ValueError):
        _light(d=(0, 0, 2))
    with pytest.raises(ValueError):
        _light(mu=-0.1)
    with pytest.raises(ValueError):
        _light(phi=(1, 0, 1))


def test_light_field_matches_single_light_evaluation():
    lights = ring_lights(n=5)
    X = np.array([[0.01, -0.02, 0.3], [0.05, 0.0, 0.25]])
    f = light_field(lights, X)
    for m, light in enumerate(lights):
        L_hat, dist = lighting_vector(light, X)
        np.testing.assert_allclose(f.directions[m], L_hat)
        np.testing.assert_allclose(f.distances[m], dist)
        np.testing.assert_allclose(f.attenuation[m], attenuation(light, X))


def test_light_set_indexing_round_trip():
    lights = ring_lights(n=4)
    again = LightSet.from_lights(list(lights))
    np.testing.assert_array_equal(again.positions, lights.positions)
    assert len(lights[1:3]) == 2


def _lambertian_scene():
    s = sphere_scene(CameraIntrinsics(300.0, 300.0, 32.0, 32.0, 64, 64))
    lights = ring_lights(n=6)
    return s, lights


def test_compensate_round_trip_within_one_ulp():
    s, lights = _lambertian_scene()
    mat = Material((0.6, 0.5, 0.4))
    images = render_scene(s.camera, s.depth, s.normals, mat, lights)
    j, valid = compensate(images, s.depth, s.camera, lights)
    vv, uu = np.nonzero(s.depth.mask)
    X = back_project(s.camera, uu, vv, s.depth.values[s.depth.mask])
    B = shade(s.normals.values[s.depth.mask][None], light_field(lights, X).directions,
              viewing_vector(s.camera, uu, vv)[None], mat)
    assert valid[:, vv, uu].all()
    # (a * B) / a is B up to one rounding of the division
    assert np.all(np.abs(j[:, vv, uu] - B) <= np.spacing(B))


def test_compensate_constant_attenuation():
    cam = CameraIntrinsics(10.0, 10.0, 1.0, 1.0, 2, 2)
    depth = DepthMap(np.full((2, 2), 0.5), np.ones((2, 2), bool))
    lights = LightSet([[0, 0, 0]], [[2.0, 4.0, 8.0]], [[0, 0, 1]], [0.0])
    X = back_project(cam, *cam.pixel_grid(), depth.values)
    a = light_field(lights, X).attenuation[0]
    images = (a * 0.3)[None]
    j, _ = compensate(images, depth, cam, lights)
    np.testing.assert_allclose(j[0], 0.3)
    j2, _ = compensate(images, depth, cam, lights, include_brightness=False)
    np.testing.assert_allclose(j2[0] / [2.0, 4.0, 8.0], 0.3)


def test_compensate_error_bounded_by_attenuation_ratio():
    s, lights = _lambertian_scene()
    images = render_scene(s.camera, s.depth, s.normals, Material(0.5), lights)
    wrong = DepthMap(s.depth.values * 1.05, s.depth.mask)
    j_true, _ = compensate(images, s.depth, s.camera, lights)
    j_wrong, valid = compensate(images, wrong, s.camera, lights)
    vv, uu = np.nonzero(s.depth.mask)
    a_true = light_field(lights, back_project(s.camera, uu, vv, s.depth.values[vv, uu])).attenuation
    a_wrong = light_field(lights, back_project(s.camera, uu, vv, wrong.values[vv, uu])).attenuation
    np.testing.assert_allclose(j_wrong[:, vv, uu], j_true[:, vv, uu] * a_true / a_wrong, rtol=1e-12)


def test_compensate_marks_zero_attenuation_invalid():
    cam = CameraIntrinsics(10.0, 10.0, 1.0, 1.0, 2, 2)
    depth = DepthMap(np.full((2, 2), 0.5), np.ones((2, 2), bool))
    lights = LightSet([[0, 0, 1.0]], [1.0], [[0, 0, 1]], [1.0])  # points away from the scene
    j, valid = compensate(np.ones((1, 2, 2, 3)), depth, cam, lights)
    assert not valid.any() and np.all(j == 0)


def test_compensate_shape_mismatch():
    s, lights = _lambertian_scene()
    with pytest.raises(ValueError):
        compensate(np.zeros((2,) + s.camera.shape + (3,)), s.depth, s.camera, lights)
