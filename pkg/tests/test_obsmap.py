import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nearps.errors import DomainError
from nearps.obsmap import build_map, build_maps, cell_center_directions, cell_index

VIEW = np.array([0.0, 0.0, -1.0])


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_cell_index_examples():
    assert tuple(int(i) for i in cell_index(np.array([0.0, 0.0, 1.0]), 32)) == (16, 16)
    L = np.array([0.5, -0.5, np.sqrt(0.5)])
    assert tuple(int(i) for i in cell_index(L, 32)) == (24, 8)


def test_cell_index_clamps_boundary():
    ix, iy = cell_index(np.array([1.0, -1.0, 0.0]), 32)
    assert (ix, iy) == (31, 0)


def test_brightness_normalisation():
    L = np.array([[0.0, 0.0, -1.0]])
    m = build_map(L, np.array([[0.4, 0.4, 0.4]]), [True], np.array([[2.0, 2.0, 2.0]]), VIEW)
    ix, iy = cell_index(L[0], 32)
    np.testing.assert_allclose(m.rgb[ix, iy], [0.2, 0.2, 0.2])
    assert m.occupancy.sum() == 1


def test_view_channels_and_layout():
    L = _unit(np.array([[0.3, 0.1, -1.0], [-0.2, 0.4, -1.0]]))
    v = _unit(np.array([0.1, -0.2, -1.0]))
    m = build_map(L, np.ones((2, 3)), [True, True], np.ones((2, 3)), v, d=8)
    arr = m.as_array()
    assert arr.shape == (8, 8, 6)
    np.testing.assert_allclose(arr[..., 3:], np.broadcast_to(v, (8, 8, 3)), rtol=1e-6)
    assert np.all(arr[..., :3][~m.occupancy] == 0)


def test_collisions_average():
    L = _unit(np.array([[0.01, 0.01, -1.0], [0.02, 0.01, -1.0]]))
    m = build_map(L, np.array([[0.2] * 3, [0.6] * 3]), [True, True], np.ones((2, 3)), VIEW)
    assert m.occupancy.sum() == 1
    np.testing.assert_allclose(m.rgb[m.occupancy], [[0.4] * 3])


def test_invalid_samples_skipped_and_all_invalid_raises():
    L = _unit(np.array([[0.3, 0.1, -1.0], [-0.2, 0.4, -1.0]]))
    m = build_map(L, np.ones((2, 3)), [True, False], np.ones((2, 3)), VIEW)
    assert m.occupancy.sum() == 1
    with pytest.raises(DomainError):
        build_map(L, np.ones((2, 3)), [False, False], np.ones((2, 3)), VIEW)


def test_rejects_tiny_grid():
    with pytest.raises(ValueError):
        build_maps(np.zeros((1, 1, 3)), np.zeros((1, 1, 3)), np.ones((1, 1), bool), np.ones((1, 3)),
                   VIEW[None], d=1)


dirs = st.integers(1, 40).flatmap(lambda k: st.lists(
    st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, -0.05)), min_size=k, max_size=k))


@settings(max_examples=60, deadline=None)
@given(dirs, st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_map_properties(raw, seed, scale):
    L = _unit(np.array(raw))
    k = len(L)
    rng = np.random.default_rng(seed)
    j = rng.uniform(0.0, 1.0, (k, 3))
    phi = rng.uniform(0.5, 2.0, (k, 3))
    valid = np.ones(k, dtype=bool)
    m = build_map(L, j, valid, phi, VIEW, d=16)
    assert m.occupancy.sum() <= k
    assert np.all(m.rgb >= 0)
    perm = rng.permutation(k)
    p = build_map(L[perm], j[perm], valid, phi[perm], VIEW, d=16)
    np.testing.assert_allclose(p.rgb, m.rgb, rtol=1e-12, atol=1e-15)
    s = build_map(L, scale * j, valid, scale * phi, VIEW, d=16)
    np.testing.assert_allclose(s.rgb, m.rgb, rtol=1e-12, atol=1e-15)


def test_batched_maps_match_single():
    rng = np.random.default_rng(0)
    L = _unit(rng.normal(size=(4, 6, 3)) * [1, 1, 0] + [0, 0, -1.5])
    j = rng.uniform(size=(4, 6, 3))
    valid = rng.random((4, 6)) < 0.8
    valid[:, 0] = True
    phi = rng.uniform(0.5, 2, (6, 3))
    views = np.tile(VIEW, (4, 1))
    batch = build_maps(L, j, valid, phi, views, d=8)
    for p in range(4):
        single = build_map(L[p], j[p], valid[p], phi, VIEW, d=8)
        np.testing.assert_array_equal(batch[p].rgb, single.rgb)
        np.testing.assert_array_equal(batch[p].occupancy, single.occupancy)


def test_cell_center_directions_are_unit_and_face_camera():
    c = cell_center_directions(8)
    np.testing.assert_allclose(np.linalg.norm(c, axis=-1), 1.0)
    assert np.all(c[..., 2] <= 0)
    ix, iy = cell_index(c, 8)
    gx, gy = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    # centres outside the unit disk are pulled inwards by the normalisation
    c_lin = (2.0 * np.arange(8) + 1.0) / 8 - 1.0
    inside = c_lin[:, None] ** 2 + c_lin[None, :] ** 2 < 1.0
    assert np.array_equal(ix[inside], gx[inside]) and np.array_equal(iy[inside], gy[inside])
