import warnings

import numpy as np
import pytest

from ungd import rng
from ungd.nets import (
    ConfigError,
    NetConfig,
    NetworkParams,
    ResNetConfig,
    forward,
    forward_resnet,
    format_config,
    init_mixers,
    init_random,
    jacobian_product,
    layer_jacobian,
    load_params,
    parse_config,
    save_params,
)


def test_config_validation():
    with pytest.raises(ConfigError):
        NetConfig([5], 1.0, 0.0)
    with pytest.raises(ConfigError):
        NetConfig([5, 0], 1.0, 0.0)
    with pytest.raises(ConfigError):
        NetConfig([5, 3], -1.0, 0.0)
    with pytest.raises(ConfigError):
        NetConfig([5, 3, 2], [1.0, 1.0, 1.0], 0.0)
    cfg = NetConfig([5, 3, 2], [1.0, 2.0], 0.1, "tanh", 3)
    assert cfg.sigma_w2 == (1.0, 2.0) and cfg.sigma_b2 == (0.1, 0.1)


def test_resnet_config_validation():
    base = NetConfig([4, 4, 4], 1.0, 0.0)
    with pytest.raises(ConfigError):
        ResNetConfig(NetConfig([4, 3], 1.0, 0.0))
    with pytest.raises(ConfigError):
        ResNetConfig(base, alpha=1.5)
    with pytest.warns(RuntimeWarning):
        ResNetConfig(base, alpha=1.0)


def test_zero_bias_variance_gives_zero_biases():
    p = init_random(NetConfig([6, 5, 4], 1.0, 0.0, seed=2))
    assert all(np.all(b == 0.0) for b in p.biases)


def test_same_seed_is_bit_identical():
    cfg = NetConfig([6, 5, 4], 1.5, 0.2, seed=9)
    a, b = init_random(cfg), init_random(cfg)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), init_random(cfg.replace(seed=10)).flat())


def test_weight_variance_at_width_1000():
    p = init_random(NetConfig([1000, 1000], 1.0, 0.0, seed=4))
    assert 0.0009 <= p.weights[0].var() <= 0.0011


def test_forward_elementwise_and_zero_net():
    cfg = NetConfig([4, 3, 2], 1.0, 0.5, "tanh", 1)
    p = init_random(cfg)
    x = rng.normals(1, rng.Stream.INPUTS, 0, 7, 4)
    t = forward(p, x)
    for l in range(1, 3):
        np.testing.assert_array_equal(t.xs[l], np.tanh(t.u(l)))
    zero = NetworkParams([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases], cfg.replace(activation="relu"))
    assert all(np.all(x == 0) for x in forward(zero, x).xs[1:])


def test_linear_identity_net_is_identity():
    cfg = NetConfig([5, 5, 5], 1.0, 0.0, "linear")
    p = NetworkParams([np.eye(5), np.eye(5)], [np.zeros(5), np.zeros(5)], cfg)
    x = np.arange(5.0)
    np.testing.assert_array_equal(forward(p, x).output, x)


def test_forward_rejects_bad_input():
    p = init_random(NetConfig([4, 3], 1.0, 0.0))
    with pytest.raises(ValueError):
        forward(p, np.ones(5))


def test_relu_edge_of_chaos_keeps_activity():
    ratios = []
    for k in range(20):
        p = init_random(NetConfig([500] * 6, 2.0, 0.0, "relu", rng.derive_seed(1, k)))
        x = rng.normals(rng.derive_seed(1, k), rng.Stream.INPUTS, 0, 1, 500)[0]
        t = forward(p, x)
        ratios.append(np.mean(t.output**2) / np.mean(x**2))
    assert abs(np.mean(ratios) - 1.0) < 0.1


def test_resnet_degenerate_cases():
    base = NetConfig([6, 6, 6], 1.0, 0.0, "tanh", 2)
    p = init_random(base)
    x = rng.normals(2, rng.Stream.INPUTS, 0, 1, 6)[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        skip = ResNetConfig(base, sigma_v2=0.0, alpha=1.0)
    t = forward_resnet(p, init_mixers(skip), skip, x)
    assert all(np.array_equal(xl, x) for xl in t.xs)
    res = ResNetConfig(base, 1.0, 0.0)
    V = init_mixers(res)
    t = forward_resnet(p, V, res, x)
    np.testing.assert_allclose(t.xs[1], V[0] @ np.tanh(p.weights[0] @ x), rtol=1e-14)


def test_linear_resnet_activity_ratio():
    base = NetConfig([500] * 4, 1.0, 0.0, "linear", 5)
    ratios = []
    for k in range(5):
        res = ResNetConfig(base.replace(seed=rng.derive_seed(5, k)), 1.0, 0.5)
        p = init_random(res.base)
        x = rng.normals(rng.derive_seed(5, k), rng.Stream.INPUTS, 0, 1, 500)[0]
        t = forward_resnet(p, init_mixers(res), res, x)
        A = [np.mean(xl**2) for xl in t.xs]
        ratios += [A[l] / A[l - 1] for l in range(1, 4)]
    assert abs(np.mean(ratios) - 1.25) < 0.1


def test_layer_jacobians():
    cfg = NetConfig([4, 5, 3], 1.0, 0.1, "linear", 3)
    p = init_random(cfg)
    t = forward(p, np.ones(4))
    np.testing.assert_array_equal(layer_jacobian(t, p, 1), p.weights[0])
    relu = init_random(cfg.replace(activation="relu"))
    relu.biases[0][:] = -1e3
    t = forward(relu, np.ones(4))
    assert np.all(layer_jacobian(t, relu, 1) == 0)


@pytest.mark.parametrize("resnet", [False, True])
def test_jacobian_matches_finite_difference(resnet):
    cfg = NetConfig([5, 5, 5, 5], 1.5, 0.1, "tanh", 8)
    p = init_random(cfg)
    res = ResNetConfig(cfg, 1.0, 0.5) if resnet else None
    V = init_mixers(res) if resnet else None
    run = (lambda x: forward_resnet(p, V, res, x)) if resnet else (lambda x: forward(p, x))
    x = rng.normals(8, rng.Stream.INPUTS, 0, 1, 5)[0]
    t = run(x)
    h = 1e-6
    for top, bottom in [(1, 1), (3, 1), (3, 2)]:
        J = jacobian_product(t, p, top, bottom)
        x_in = t.xs[bottom - 1]
        fd = np.empty_like(J)
        for j in range(5):
            e = np.zeros(5)
            e[j] = h
            plus = _propagate_from(p, V, res, x_in + e, bottom, top)
            minus = _propagate_from(p, V, res, x_in - e, bottom, top)
            fd[:, j] = (plus - minus) / (2 * h)
        np.testing.assert_allclose(J, fd, atol=1e-5)


def _propagate_from(p, V, res, x, bottom, top):
    for l in range(bottom, top + 1):
        y = np.tanh(p.weights[l - 1] @ x + p.biases[l - 1])
        x = V[l - 1] @ y + res.alpha * x if res is not None else y
    return x


def test_config_text_round_trip():
    cfg = NetConfig([4, 3, 2], [1.0, 0.1 + 0.2], 0.05, "sigmoid", 2**40)
    assert parse_config(format_config(cfg)) == cfg
    res = ResNetConfig(NetConfig([3, 3], 1.0, 0.0), 0.7, 0.3)
    assert parse_config(format_config(res)) == res


@pytest.mark.parametrize(
    "text",
    [
        "widths = 3, 2\nsigma_w2 = 1\nsigma_b2 = 0\nactivation = relu\nlearning_rate = 1\n",
        "widths = 3, 2\nwidths = 3, 2\nsigma_w2 = 1\nsigma_b2 = 0\nactivation = relu\n",
        "widths = 3, 2\nsigma_w2 = 1\nactivation = relu\n",
        "widths = 3, x\nsigma_w2 = 1\nsigma_b2 = 0\nactivation = relu\n",
        "widths 3 2\n",
    ],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_params_round_trip(tmp_path):
    res = ResNetConfig(NetConfig([4, 4, 4], 1.0, 0.3, "tanh", 6), 1.0, 0.5)
    p = init_random(res.base)
    V = init_mixers(res)
    path = tmp_path / "p.npz"
    save_params(p, path, V)
    q, W = load_params(path)
    assert q.config == p.config
    assert np.array_equal(q.flat(), p.flat())
    assert all(np.array_equal(a, b) for a, b in zip(V, W))
