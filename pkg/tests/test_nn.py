import numpy as np
import pytest

from msr import autodiff as ad
from msr import nn
from msr.autodiff import Tensor


def batch(n=3, seed=0, size=32):
    return Tensor(np.random.default_rng(seed).uniform(size=(n, 3, size, size)))


@pytest.fixture(scope="module")
def pair():
    return nn.init_models("cifar-tiny", seed=0)


def test_init_is_deterministic_and_target_is_a_copy():
    a, b = nn.init_models("cifar-tiny", seed=3), nn.init_models("cifar-tiny", seed=3)
    for name, t in a.online.params.items():
        np.testing.assert_array_equal(t.data, b.online.params[name].data)
    for name, t in a.target.params.items():
        np.testing.assert_array_equal(t.data, a.online.params[name].data)
        assert t.data is not a.online.params[name].data and not t.requires_grad
    assert not any(k.startswith(nn.PREDICTOR) for k in a.target.params)
    assert set(a.target.params) == {k for k in a.online.params if not k.startswith(nn.PREDICTOR)}
    c = nn.init_models("cifar-tiny", seed=4)
    assert not np.array_equal(c.online.params["encoder.conv0.weight"].data,
                              a.online.params["encoder.conv0.weight"].data)


def test_init_uses_kaiming_uniform_bounds_and_unit_bn():
    p = nn.init_models("cifar-small", seed=0).online
    w = p.params["encoder.conv1.weight"].data
    bound = np.sqrt(6.0 / (32 * 9))
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.9 * bound
    np.testing.assert_array_equal(p.params["encoder.bn0.weight"].data, 1.0)
    np.testing.assert_array_equal(p.params["encoder.bn0.bias"].data, 0.0)
    assert not set(p.buffers) & set(p.params)


def test_unknown_arch():
    with pytest.raises(ValueError, match="unknown architecture"):
        nn.init_models("resnet50")


@pytest.mark.parametrize("arch,d", [("cifar-small", 64), ("cifar-tiny", 32)])
def test_output_shapes(arch, d):
    p = nn.init_models(arch, seed=0)
    for B in (1, 4):
        # batch statistics need two samples, so a single image goes through eval mode
        train = B > 1
        x = batch(B)
        assert nn.encode_online(p.online, x, train_mode=train).shape == (B, d)
        assert nn.encode_target(p.target, x, train_mode=train).shape == (B, d)
    assert nn.features(p.online, batch(2)).shape == (2, nn.get_arch(arch).feature_dim)


def test_shape_mismatch(pair):
    with pytest.raises(ad.ShapeError):
        nn.encode_online(pair.online, Tensor(np.zeros((2, 3, 16, 16))))
    with pytest.raises(ad.ShapeError):
        nn.encode_target(pair.target, Tensor(np.zeros((2, 32, 32, 3))))


def test_eval_mode_is_deterministic(pair):
    x = batch(2)
    a = nn.encode_online(pair.online, x, train_mode=False).data
    b = nn.encode_online(pair.online, x, train_mode=False).data
    np.testing.assert_array_equal(a, b)


def test_target_matches_online_subpath_at_init():
    p = nn.init_models("cifar-tiny", seed=1)
    x = batch(4, seed=2)
    want = nn.project(p.online, x, train_mode=True, update_stats=False).data
    np.testing.assert_array_equal(nn.encode_target(p.target, x).data, want)


def test_target_forward_leaves_its_buffers_alone():
    p = nn.init_models("cifar-tiny", seed=1)
    before = {k: v.copy() for k, v in p.target.buffers.items()}
    nn.encode_target(p.target, batch(4))
    for k, v in p.target.buffers.items():
        np.testing.assert_array_equal(v, before[k])
    # the online train-mode forward does update its running statistics
    on_before = p.online.buffers["encoder.bn0.running_mean"].copy()
    nn.encode_online(p.online, batch(4))
    assert not np.array_equal(on_before, p.online.buffers["encoder.bn0.running_mean"])


def test_online_forward_gives_finite_gradients_everywhere():
    p = nn.init_models("cifar-tiny", seed=0, dtype=np.float64).online
    with ad.fresh_tape():
        out = nn.encode_online(p, batch(4))
        grads = ad.backward(ad.sum(out * out))
    for name, t in p.params.items():
        assert t.id in grads, name
        assert np.all(np.isfinite(grads[t.id]))


def test_online_forward_gradient_matches_finite_differences():
    p = nn.init_models("cifar-tiny", seed=0).online
    x = batch(3).data
    name = "encoder.bn1.weight"
    w0 = p.params[name]
    probe = np.random.default_rng(5).normal(size=(3, 32))

    def scalar(w):
        p.params[name] = w
        try:
            return ad.sum(nn.encode_online(p, Tensor(x), train_mode=True) * Tensor(probe))
        finally:
            p.params[name] = w0

    original = {k: v.copy() for k, v in p.buffers.items()}
    err = ad.grad_check(scalar, w0)
    p.buffers.update(original)
    assert err < 1e-4


def test_target_gradients_are_exactly_zero():
    p = nn.init_models("cifar-tiny", seed=0)
    with ad.fresh_tape():
        z = nn.encode_online(p.online, batch(3))
        w = nn.encode_target(p.target, batch(3, seed=1))
        grads = ad.backward(ad.sum(z * w))
    assert all(t.id not in grads for t in p.target.params.values())
    assert all(t.grad is None for t in p.target.params.values())


def test_ema_update_formula_and_fixed_points():
    pair = nn.init_models("cifar-tiny", seed=0)
    name = "encoder.conv0.weight"
    pair.target.params[name] = Tensor(np.zeros_like(pair.target.params[name].data))
    pair.online.params[name] = Tensor(np.ones_like(pair.online.params[name].data), requires_grad=True)
    nn.ema_update(pair, 0.99)
    np.testing.assert_allclose(pair.target.params[name].data, 0.01, rtol=0, atol=1e-15)
    nn.ema_update(pair, 0.99)
    # two steps: xi_2 = tau^2 xi_0 + (1 - tau^2) theta
    np.testing.assert_allclose(pair.target.params[name].data, 1 - 0.99 ** 2, atol=1e-15)
    snap = {k: v.data.copy() for k, v in pair.target.params.items()}
    nn.ema_update(pair, 1.0)
    for k, v in pair.target.params.items():
        np.testing.assert_array_equal(v.data, snap[k])
    nn.ema_update(pair, 0.0)
    for k, v in pair.target.params.items():
        np.testing.assert_array_equal(v.data, pair.online.params[k].data)
    for k, v in pair.target.buffers.items():
        np.testing.assert_array_equal(v, pair.online.buffers[k])


def test_ema_update_errors():
    pair = nn.init_models("cifar-tiny", seed=0)
    with pytest.raises(ValueError):
        nn.ema_update(pair, 1.5)
    del pair.online.params["encoder.conv0.weight"]
    with pytest.raises(ValueError, match="no matching"):
        nn.ema_update(pair, 0.5)


def test_ema_schedule():
    assert nn.ema_schedule(0, 100, 0.99, "cosine-increase") == pytest.approx(0.99, abs=1e-15)
    assert nn.ema_schedule(100, 100, 0.99, "cosine-increase") == pytest.approx(1.0, abs=1e-15)
    assert all(nn.ema_schedule(k, 100, 0.99) == 0.99 for k in range(101))
    with pytest.raises(ValueError):
        nn.ema_schedule(101, 100, 0.99)
    with pytest.raises(ValueError):
        nn.ema_schedule(0, 100, 0.99, "linear")


def test_float32_models_keep_their_dtype():
    p = nn.init_models("cifar-tiny", seed=0, dtype=np.float32)
    x = Tensor(batch(2).data.astype(np.float32))
    assert nn.encode_online(p.online, x).data.dtype == np.float32
