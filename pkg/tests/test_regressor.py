import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nearps.errors import DomainError
from nearps.obsmap import ObservationMap, build_maps
from nearps.regressor import (LambertianRegressor, angular_loss, angular_loss_grad,
                              lambertian_solve, lambertian_solve_batch)
from nearps.regressor.network import (Architecture, CompactNet, conv3x3_backward, conv3x3_forward,
                                      load_checkpoint, maxpool2_forward, save_checkpoint)
from nearps.regressor.training import (RecordBank, TrainingDiverged, bank_from_stream,
                                       evaluate_mae, train)
from nearps.sampler import PerturbationSpec, SamplerOptions, record_stream

unit3 = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).map(np.array).filter(
    lambda v: np.linalg.norm(v) > 0.1).map(lambda v: v / np.linalg.norm(v))

TINY = Architecture(d=8, channels=(4, 8), hidden=16)
EXACT_LAMBERTIAN = SamplerOptions(materials="lambertian", global_illumination=False, quantization=None)


def test_angular_loss_examples():
    a = np.array([0.0, 0.0, -1.0])
    b = np.array([1.0, 0.0, 0.0])
    assert angular_loss(a, a) == 0.0
    assert angular_loss(a, b) == pytest.approx(np.pi / 2)
    assert angular_loss(a, -a) == pytest.approx(np.pi)


@given(unit3, unit3)
def test_angular_loss_symmetric_and_bounded(p, t):
    v = angular_loss(p, t)
    assert 0.0 <= v <= np.pi
    assert v == angular_loss(t, p)


@settings(max_examples=100)
@given(unit3, st.floats(5.0, 175.0), st.floats(0, 2 * np.pi))
def test_angular_loss_gradient_matches_finite_differences(t, angle, phase):
    # build p at the requested angle from t
    helper = np.array([1.0, 0.0, 0.0]) if abs(t[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(t, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(t, e1)
    a = np.radians(angle)
    p = np.cos(a) * t + np.sin(a) * (np.cos(phase) * e1 + np.sin(phase) * e2)
    g = angular_loss_grad(p, t)
    h = 1e-6
    fd = np.array([(angular_loss(p + h * e, t) - angular_loss(p - h * e, t)) / (2 * h)
                   for e in np.eye(3)])
    assert np.abs(g - fd).max() <= 1e-4 * max(np.abs(fd).max(), 1e-8)


def test_angular_loss_gradient_fallback_near_alignment():
    t = np.array([0.0, 0.0, -1.0])
    np.testing.assert_array_equal(angular_loss_grad(t, t), -t)


def test_conv_and_pool_match_loop_oracles():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 4, 4, 3))
    w = rng.normal(size=(27, 5))
    b = rng.normal(size=5)
    out, cols = conv3x3_forward(x, w, b)
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    W = w.reshape(3, 3, 3, 5)
    ref = np.zeros((2, 4, 4, 5))
    for n in range(2):
        for i in range(4):
            for j in range(4):
                ref[n, i, j] = np.einsum("abc,abco->o", pad[n, i:i + 3, j:j + 3], W) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12)
    p, _ = maxpool2_forward(ref)
    np.testing.assert_array_equal(p, ref.reshape(2, 2, 2, 2, 2, 5).max(axis=(2, 4)))

    dout = rng.normal(size=out.shape)
    dx, dw, db = conv3x3_backward(dout, cols, w, x.shape)
    h = 1e-6
    i = (1, 2, 3, 0)
    xp, xm = x.copy(), x.copy()
    xp[i] += h
    xm[i] -= h
    fd = (np.sum(conv3x3_forward(xp, w, b)[0] * dout) - np.sum(conv3x3_forward(xm, w, b)[0] * dout)) / (2 * h)
    assert abs(dx[i] - fd) < 1e-6 * max(1.0, abs(fd))


def _map_from_dirs(L, values, view=(0.0, 0.0, -1.0), d=32):
    k = len(L)
    return build_maps(L[None], np.repeat(np.asarray(values)[:, None], 3, axis=1)[None],
                      np.ones((1, k), bool), np.ones((k, 3)), np.array([view]), d)[0]


def test_lambertian_symmetric_case():
    L = -np.eye(3)
    obs = _map_from_dirs(L, [0.577, 0.577, 0.577])
    n, rho = lambertian_solve(obs)
    np.testing.assert_allclose(n, -np.ones(3) / np.sqrt(3), atol=1e-12)
    np.testing.assert_allclose(rho, 1.0, atol=1e-3)


def test_lambertian_two_lights_is_degenerate():
    L = np.array([[0.0, 0.0, -1.0], [0.6, 0.0, -0.8]])
    with pytest.raises(DomainError):
        lambertian_solve(_map_from_dirs(L, [0.5, 0.4]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_lambertian_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(12, 3))
    L[:, 2] = -np.abs(L[:, 2]) - 0.5
    L /= np.linalg.norm(L, axis=1, keepdims=True)
    n = np.array([0.2, -0.3, -0.9])
    n /= np.linalg.norm(n)
    vals = np.maximum(L @ n, 0) * 0.7 + rng.uniform(0, 0.01, 12)
    a = _map_from_dirs(L, vals)
    b = ObservationMap(a.rgb * scale, a.view_vector, a.occupancy, a.light_dirs)
    na, _ = lambertian_solve(a)
    nb, _ = lambertian_solve(b)
    np.testing.assert_allclose(na, nb, atol=1e-9)


@pytest.fixture(scope="module")
def lambertian_bank():
    return bank_from_stream(record_stream(41, spec=PerturbationSpec.zero(), options=EXACT_LAMBERTIAN), 1000)


@pytest.fixture(scope="module")
def lambertian_records():
    return list(record_stream(41, spec=PerturbationSpec.zero(), options=EXACT_LAMBERTIAN, count=1000))


def test_lambertian_baseline_on_exact_records(lambertian_records):
    rgb = np.stack([r.map.rgb for r in lambertian_records])
    maps = ObservationMap(rgb, np.stack([r.map.view_vector for r in lambertian_records]),
                          np.stack([r.map.occupancy for r in lambertian_records]),
                          np.stack([r.map.light_dirs for r in lambertian_records]))
    pred = LambertianRegressor().predict_batch(maps)
    targets = np.stack([r.target for r in lambertian_records])
    assert np.degrees(angular_loss(pred, targets)).mean() < 0.5


def test_lambertian_batch_flags_unsolvable_rows():
    rgb = np.zeros((2, 8, 8, 3))
    occ = np.zeros((2, 8, 8), bool)
    maps = ObservationMap(rgb, np.tile([0.0, 0.0, -1.0], (2, 1)), occ)
    normals, _, ok = lambertian_solve_batch(maps)
    assert not ok.any() and np.isnan(normals).all()
    np.testing.assert_array_equal(LambertianRegressor().predict_batch(maps), maps.view_vector)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_network_output_is_unit_and_camera_facing(seed):
    rng = np.random.default_rng(seed)
    net = CompactNet(TINY, seed=seed % 7)
    x = rng.uniform(0, rng.uniform(0, 10), (4, 8, 8, 6)).astype(np.float32)
    y = net.predict_batch(x)
    assert np.all(np.abs(np.linalg.norm(y, axis=1) - 1) < 1e-6)
    assert np.all(y[:, 2] <= 0)


def test_network_degenerate_and_duplicate_inputs():
    net = CompactNet(TINY, seed=1)
    zero = np.zeros((1, 8, 8, 6), np.float32)
    y = net.predict_batch(zero)
    assert np.all(np.isfinite(y)) and abs(np.linalg.norm(y) - 1) < 1e-6
    x = np.random.default_rng(2).uniform(size=(1, 8, 8, 6)).astype(np.float32)
    y2 = net.predict_batch(np.concatenate([x, x]))
    np.testing.assert_array_equal(y2[0], y2[1])


def test_network_rejects_wrong_grid_size():
    net = CompactNet(TINY)
    with pytest.raises(ValueError):
        net.predict_batch(np.zeros((1, 16, 16, 6), np.float32))


def test_architecture_rejects_indivisible_grid():
    with pytest.raises(ValueError):
        Architecture(d=12, channels=(4, 8, 8))


def test_default_architecture_size():
    assert 5e4 < CompactNet().n_params < 1e6


def test_network_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    net = CompactNet(TINY, seed=3, dtype=np.float64)
    x = rng.uniform(size=(3, 8, 8, 6))
    t = rng.normal(size=(3, 3))
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    _, grads = net.loss_and_grads(x, t)
    h = 1e-6
    for k in range(len(net.params)):
        flat = net.params[k].reshape(-1)
        for j in rng.choice(flat.size, size=min(5, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + h
            lp, _ = net.loss_and_grads(x, t)
            flat[j] = old - h
            lm, _ = net.loss_and_grads(x, t)
            flat[j] = old
            fd = (lp - lm) / (2 * h)
            g = grads[k].reshape(-1)[j]
            assert abs(g - fd) <= 1e-4 * max(abs(fd), 1e-6)


def test_checkpoint_round_trip(tmp_path):
    net = CompactNet(TINY, seed=4)
    net.train_config = {"steps": 3, "seed": 4}
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    again = load_checkpoint(path)
    assert again.arch == net.arch and again.train_config == net.train_config
    for a, b in zip(net.params, again.params):
        assert np.array_equal(a, b)
    x = np.random.default_rng(5).uniform(size=(6, 8, 8, 6)).astype(np.float32)
    np.testing.assert_array_equal(net.predict_batch(x), again.predict_batch(x))


def test_checkpoint_rejects_other_files(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_record_bank_densifies_exactly(lambertian_records, lambertian_bank):
    dense = lambertian_bank.dense(np.arange(10))
    for i in range(10):
        np.testing.assert_array_equal(dense[i], lambertian_records[i].map.as_array())
    sub = lambertian_bank.subset([3, 7])
    np.testing.assert_array_equal(sub.dense(np.arange(2)), dense[[3, 7]])
    both = RecordBank.concatenate([sub, lambertian_bank.subset([1])])
    np.testing.assert_array_equal(both.dense(np.arange(3)), dense[[3, 7, 1]])
    maps = ObservationMap(np.stack([r.map.rgb for r in lambertian_records[:4]]),
                          np.stack([r.map.view_vector for r in lambertian_records[:4]]),
                          np.stack([r.map.occupancy for r in lambertian_records[:4]]))
    from_maps = RecordBank.from_maps(maps, lambertian_bank.targets[:4])
    np.testing.assert_array_equal(from_maps.dense(np.arange(4)), dense[:4])


def test_record_bank_rejects_mixed_grid_sizes(lambertian_records):
    small = list(record_stream(42, count=1, options=SamplerOptions(d=8)))
    with pytest.raises(ValueError):
        RecordBank.from_records(lambertian_records[:1] + small)


def _tiny_bank(count, seed):
    opts = SamplerOptions(materials="lambertian", global_illumination=False, quantization=None, d=8)
    return bank_from_stream(record_stream(seed, spec=PerturbationSpec.zero(), options=opts), count)


def test_training_reduces_held_out_error():
    bank, held_out = _tiny_bank(2000, 50), _tiny_bank(300, 51)
    net = CompactNet(TINY, seed=0)
    before = evaluate_mae(net, held_out)
    result = train(net, bank, steps=600, batch_size=64, seed=0, lr=3e-3, steps_per_epoch=100,
                   val_bank=held_out)
    after = evaluate_mae(net, held_out)
    assert after < 0.5 * before
    assert len(result.loss_curve) == 6 and result.loss_curve[-1] < result.loss_curve[0]
    assert net.train_config["steps"] == 600


def test_training_is_deterministic():
    bank = _tiny_bank(300, 52)
    a, b = CompactNet(TINY, seed=1), CompactNet(TINY, seed=1)
    train(a, bank, steps=20, batch_size=32, seed=9)
    train(b, bank, steps=20, batch_size=32, seed=9)
    for p, q in zip(a.params, b.params):
        assert np.array_equal(p, q)


def test_training_aborts_on_divergence():
    bank = _tiny_bank(300, 53)
    net = CompactNet(TINY, seed=2)
    # a negative step ascends the loss, so epoch averages exceed the initial loss
    with pytest.raises(TrainingDiverged):
        train(net, bank, steps=200, batch_size=32, seed=0, lr=-1e-2, steps_per_epoch=10,
              restore_best=False)


def test_training_rejects_mismatched_bank():
    with pytest.raises(ValueError):
        train(CompactNet(Architecture(d=16, channels=(4, 8))), _tiny_bank(10, 54), steps=1)
