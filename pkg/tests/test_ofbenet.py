import json
import math
import struct

import numpy as np
import pytest

from accelbias.errors import InvalidArgumentError, ParseError, ShapeError, StateError
from accelbias.ofbenet import kernels, layers, network, serialize

BACKENDS = kernels.available_backends()


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    monkeypatch.setattr(kernels, "_impl", kernels.get_backend(request.param))
    return request.param


SMALL = network.NetworkConfig(channels=(3, 4, 5, 6), kernel_size=5, pool=2, hidden=5, window_len=64)


def ints(rng, shape, lo=-9, hi=10):
    return rng.integers(lo, hi, size=shape).astype(np.float64)


# ------------------------------------------------------------- naive oracles


def naive_conv(x, w, b):
    T, ci = x.shape
    m, _, co = w.shape
    out = np.zeros((T - m + 1, co))
    for i in range(T - m + 1):
        for k in range(co):
            s = b[k]
            for j in range(m):
                for c in range(ci):
                    s += x[i + j, c] * w[j, c, k]
            out[i, k] = s
    return out


def naive_pool(z, P):
    T, C = z.shape
    out = np.zeros((T // P, C))
    for i in range(T // P):
        for k in range(C):
            s = 0.0
            for r in range(P):
                s += z[i * P + r, k]
            out[i, k] = s / P
    return out


def naive_gap(y):
    T, C = y.shape
    out = np.zeros(C)
    for k in range(C):
        s = 0.0
        for i in range(T):
            s += y[i, k]
        out[k] = s / T
    return out


def naive_dense(h, W, b):
    out = np.zeros(W.shape[1])
    for j in range(W.shape[1]):
        s = 0.0
        for k in range(W.shape[0]):
            s += h[k] * W[k, j]
        out[j] = s + b[j]
    return out


# ------------------------------------------------------------------- layers


def test_conv_identity_tap(backend):
    x = np.arange(10.0)[:, None]
    w = np.array([0, 0, 1, 0, 0], dtype=float).reshape(5, 1, 1)
    z = layers.conv1d(x, w, np.zeros(1))
    np.testing.assert_array_equal(z[:, 0], x[2:8, 0])


def test_conv_all_ones_constant(backend):
    z = layers.conv1d(np.full((12, 1), 3.0), np.ones((5, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(z, 15.0)


def test_conv_matches_oracle_exactly(backend):
    rng = np.random.default_rng(0)
    for _ in range(100):
        m = int(rng.integers(1, 6))
        T = int(rng.integers(m, 13))
        ci, co, B = (int(v) for v in rng.integers(1, 5, 3))
        x = ints(rng, (B, T, ci))
        w = ints(rng, (m, ci, co))
        b = ints(rng, co)
        z = layers.conv1d(x, w, b)
        for n in range(B):
            np.testing.assert_array_equal(z[n], naive_conv(x[n], w, b))


def test_conv_short_input_is_shape_error():
    with pytest.raises(ShapeError):
        layers.conv1d(np.zeros((4, 3)), np.zeros((5, 3, 2)), np.zeros(2))
    with pytest.raises(ShapeError):
        layers.conv1d(np.zeros((8, 3)), np.zeros((5, 2, 2)), np.zeros(2))


def test_pool_examples(backend):
    np.testing.assert_array_equal(layers.avg_pool(np.array([[1.0], [3.0], [5.0], [7.0]]), 2)[:, 0], [2, 6])
    np.testing.assert_array_equal(layers.avg_pool(np.full((9, 2), 4.0), 4), np.full((2, 2), 4.0))


def test_pool_matches_oracle_exactly(backend):
    rng = np.random.default_rng(1)
    for _ in range(100):
        P = int(rng.integers(1, 6))
        T = int(rng.integers(P, 25))
        C, B = (int(v) for v in rng.integers(1, 5, 2))
        z = ints(rng, (B, T, C))
        y = layers.avg_pool(z, P)
        for n in range(B):
            np.testing.assert_array_equal(y[n], naive_pool(z[n], P))


def test_pool_overlapping_stride():
    z = np.arange(6.0)[:, None]
    np.testing.assert_array_equal(layers.avg_pool(z, 2, stride=1)[:, 0], [0.5, 1.5, 2.5, 3.5, 4.5])


def test_gap_examples_and_oracle():
    np.testing.assert_array_equal(layers.global_avg_pool(np.full((7, 3), 2.5)), [2.5] * 3)
    assert layers.global_avg_pool(np.array([[1.0], [2.0], [3.0]]))[0] == 2.0
    rng = np.random.default_rng(2)
    for _ in range(100):
        T, C = (int(v) for v in rng.integers(1, 20, 2))
        y = ints(rng, (T, C))
        np.testing.assert_array_equal(layers.global_avg_pool(y), naive_gap(y))


def test_dense_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        k, j = (int(v) for v in rng.integers(1, 10, 2))
        h, W, b = ints(rng, k), ints(rng, (k, j)), ints(rng, j)
        np.testing.assert_array_equal(layers.dense(h, W, b), naive_dense(h, W, b))
    np.testing.assert_array_equal(layers.dense(np.array([1.0, 2.0]), np.eye(2), np.zeros(2)), [1, 2])
    with pytest.raises(ShapeError):
        layers.dense(np.ones(3), np.ones((2, 2)), np.zeros(2))


def test_leaky_relu():
    np.testing.assert_array_equal(layers.leaky_relu(np.array([2.0, -1.0, 0.0])), [2.0, -0.1, 0.0])


def test_batch_norm_constant_channel():
    z = np.full((2, 10, 3), 5.0)
    out, _ = layers.batch_norm(z, np.ones(3), np.array([1.0, 2.0, 3.0]), "training")
    np.testing.assert_allclose(out, np.broadcast_to([1.0, 2.0, 3.0], z.shape))


def test_batch_norm_training_statistics():
    rng = np.random.default_rng(4)
    z = rng.normal(3.0, 2.0, size=(4, 100, 3))
    gamma, beta = np.array([0.5, -2.0, 1.5]), np.array([0.1, 0.2, -0.3])
    out, cache = layers.batch_norm(z, gamma, beta, "training", np.zeros(3), np.ones(3))
    np.testing.assert_allclose(out.mean(axis=(0, 1)), beta, atol=1e-6)
    np.testing.assert_allclose(out.std(axis=(0, 1)), np.abs(gamma), atol=1e-5)
    np.testing.assert_allclose(cache["running_mean"], 0.1 * z.mean(axis=(0, 1)))
    np.testing.assert_allclose(cache["running_var"], 0.9 + 0.1 * z.var(axis=(0, 1)))


def test_batch_norm_standardised_identity_and_inference():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(2, 500, 2))
    z = (z - z.mean(axis=(0, 1))) / z.std(axis=(0, 1))
    out, _ = layers.batch_norm(z, np.ones(2), np.zeros(2), "training")
    np.testing.assert_allclose(out, z, atol=1e-4)
    inf, cache = layers.batch_norm(z, np.full(2, 2.0), np.ones(2), "inference", np.full(2, 1.0), np.full(2, 4.0))
    assert cache is None
    np.testing.assert_allclose(inf, 2.0 * (z - 1.0) / np.sqrt(4.0 + 1e-5) + 1.0)
    with pytest.raises(InvalidArgumentError):
        layers.batch_norm(z, np.ones(2), np.zeros(2), "inference")


def test_dropout_inference_identity():
    h = np.arange(5.0)
    out, mask = layers.dropout(h, 0.8, "inference")
    assert out is h or np.array_equal(out, h)
    assert mask is None


def test_dropout_expectation():
    rng = np.random.default_rng(6)
    h = np.array([1.0, -2.0, 3.0])
    draws = np.stack([layers.dropout(h, 0.8, "training", rng)[0] for _ in range(100_000)])
    np.testing.assert_allclose(draws.mean(axis=0), h, atol=4 * 3.0 * 0.5 / np.sqrt(100_000) * 3)
    assert set(np.unique(draws[:, 0])) == {0.0, 1.25}


def test_dropout_errors():
    with pytest.raises(InvalidArgumentError):
        layers.dropout(np.ones(3), 0.0, "training", np.random.default_rng())
    with pytest.raises(InvalidArgumentError):
        layers.dropout(np.ones(3), 0.8, "training")
    with pytest.raises(ShapeError):
        layers.dropout(np.ones(3), 0.8, "training", mask=np.ones(2))


@pytest.mark.parametrize("c", [-3.0, 0.0, 7.5])
def test_pool_after_conv_constant(backend, c):
    rng = np.random.default_rng(7)
    w, b = rng.normal(size=(5, 3, 4)), rng.normal(size=4)
    y = layers.avg_pool(layers.conv1d(np.full((40, 3), c), w, b), 4)
    np.testing.assert_allclose(y, np.broadcast_to(y[0], y.shape), atol=1e-12)


# -------------------------------------------------------------- network


def test_param_shapes_and_count():
    cfg = network.NetworkConfig()
    shapes = network.param_shapes(cfg)
    assert shapes["conv1.weight"] == (5, 3, 8)
    assert shapes["conv2.weight"] == (5, 8, 32)
    assert shapes["conv3.weight"] == (5, 32, 64)
    assert shapes["dense.weight"] == (64, 32)
    assert shapes["out.weight"] == (32, 3)
    expected = (5 * 3 * 8 + 8 + 16) + (5 * 8 * 32 + 32 + 64) + (5 * 32 * 64 + 64 + 128) + 64 * 32 + 32 + 32 * 3 + 3
    assert network.n_parameters(cfg) == expected
    assert network.min_window_length(cfg) == 148


def test_temporal_lengths_default():
    # 3000 -> 2996 -> 749 -> 745 -> 186 -> 182 -> 45 steps before GAP
    cfg = network.NetworkConfig()
    params = network.init_params(cfg, 0)
    _, trace = network.forward(params, np.zeros((1, 3000, 3)), cfg, "training", dropout_mask=np.ones((1, 32)))
    assert trace.pool_lengths == [2996, 745, 182]
    assert trace.gap_length == 45


def test_window_below_minimum():
    with pytest.raises(ShapeError, match="minimum 148"):
        network.NetworkConfig(window_len=50)
    cfg = network.NetworkConfig()
    with pytest.raises(ShapeError, match="148"):
        network.forward(network.init_params(cfg), np.zeros((120, 3)), cfg)


def test_zero_input_zero_params_gives_output_bias():
    cfg = network.NetworkConfig()
    params = {k: np.zeros_like(v) for k, v in network.init_params(cfg).items()}
    params["bn1.running_var"] = params["bn2.running_var"] = params["bn3.running_var"] = np.ones(1)
    for i in (1, 2, 3):
        params[f"bn{i}.running_var"] = np.ones(cfg.channels[i])
    params["out.bias"] = np.array([0.1, -0.2, 0.3])
    y, _ = network.forward(params, np.zeros((3000, 3)), cfg)
    np.testing.assert_array_equal(y, [0.1, -0.2, 0.3])


def test_forward_deterministic_and_pure():
    cfg = network.NetworkConfig()
    params = network.init_params(cfg, seed=3)
    x = np.random.default_rng(0).normal(0, 5, size=(2, 3000, 3))
    a, _ = network.forward(params, x, cfg)
    b, _ = network.forward(network.init_params(cfg, seed=3), x.copy(), cfg)
    assert a.tobytes() == b.tobytes()


def test_forward_finite_fuzz():
    cfg = network.NetworkConfig()
    rng = np.random.default_rng(8)
    for s in range(10):
        params = network.init_params(cfg, seed=s)
        for i in (1, 2, 3):
            params[f"bn{i}.running_mean"] = rng.normal(0, 1, cfg.channels[i])
            params[f"bn{i}.running_var"] = rng.uniform(0.1, 3, cfg.channels[i])
        x = rng.uniform(-20, 20, size=(100, 3000, 3))
        assert np.all(np.isfinite(network.predict(params, x, cfg, batch_size=50)))


def test_dropout_changes_training_output_only():
    cfg = SMALL
    params = network.init_params(cfg, 1)
    x = np.random.default_rng(9).normal(size=(4, 64, 3))
    rng = np.random.default_rng(0)
    a, _ = network.forward(params, x, cfg, "training", rng=rng)
    b, _ = network.forward(params, x, cfg, "training", rng=rng)
    assert not np.array_equal(a, b)
    assert np.array_equal(network.forward(params, x, cfg)[0], network.forward(params, x, cfg)[0])


def test_init_seeded():
    a = network.init_params(SMALL, 5)
    b = network.init_params(SMALL, 5)
    c = network.init_params(SMALL, 6)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["conv1.weight"], c["conv1.weight"])
    assert np.all(a["bn1.gamma"] == 1) and np.all(a["conv1.bias"] == 0)


def _loss(params, x, cfg, mask, dy):
    y, _ = network.forward(params, x, cfg, "training", dropout_mask=mask)
    return float(np.sum(y * dy))


def gradient_check(backend_cfg=SMALL, seed=0, step=1e-5):
    """Worst relative error per tensor between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    cfg = backend_cfg
    params = network.init_params(cfg, seed)
    for i in range(1, cfg.n_blocks + 1):
        params[f"bn{i}.gamma"] = rng.uniform(0.5, 1.5, cfg.channels[i])
        params[f"bn{i}.beta"] = rng.normal(0, 0.3, cfg.channels[i])
        params[f"conv{i}.bias"] = rng.normal(0, 0.3, cfg.channels[i])
    x = rng.normal(size=(3, cfg.window_len, 3))
    mask = (rng.random((3, cfg.hidden)) < cfg.keep_prob).astype(float)
    dy = rng.normal(size=(3, 3))
    _, trace = network.forward(params, x, cfg, "training", dropout_mask=mask)
    grads = network.backward(params, trace, dy)
    worst = {}
    peak = max(np.max(np.abs(g)) for g in grads.values())
    for name, g in grads.items():
        num = np.zeros_like(g)
        for idx in np.ndindex(g.shape):
            p = {k: v.copy() for k, v in params.items()}
            p[name][idx] += step
            up = _loss(p, x, cfg, mask, dy)
            p[name][idx] -= 2 * step
            down = _loss(p, x, cfg, mask, dy)
            num[idx] = (up - down) / (2 * step)
        if np.max(np.abs(g)) < 1e-10 * peak:
            # exact zero (conv bias ahead of batch norm): allow roundoff only
            worst[name] = 0.0 if np.max(np.abs(num)) < 1e-8 else math.inf
        else:
            worst[name] = float(np.max(np.abs(g - num)) / max(np.max(np.abs(g)), np.max(np.abs(num))))
    return worst


def test_gradient_check(backend):
    worst = gradient_check()
    assert set(worst) == {n for n in network.param_shapes(SMALL) if network.is_trainable(n)}
    assert max(worst.values()) < 1e-4, worst


def test_zero_output_gradient_gives_zero_grads():
    params = network.init_params(SMALL, 0)
    x = np.random.default_rng(1).normal(size=(2, 64, 3))
    _, trace = network.forward(params, x, SMALL, "training", rng=np.random.default_rng(0))
    for g in network.backward(params, trace, np.zeros((2, 3))).values():
        assert not np.any(g)


def test_backward_linear_in_output_gradient():
    params = network.init_params(SMALL, 0)
    x = np.random.default_rng(1).normal(size=(2, 64, 3))
    _, trace = network.forward(params, x, SMALL, "training", dropout_mask=np.ones((2, 5)))
    rng = np.random.default_rng(2)
    d1, d2 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    g1 = network.backward(params, trace, d1)
    g2 = network.backward(params, trace, d2)
    g12 = network.backward(params, trace, 2.0 * d1 - 3.0 * d2)
    for k in g1:
        np.testing.assert_allclose(g12[k], 2.0 * g1[k] - 3.0 * g2[k], atol=1e-10)


def test_backward_errors():
    params = network.init_params(SMALL, 0)
    x = np.zeros((2, 64, 3))
    with pytest.raises(StateError):
        network.backward(params, None, np.zeros((2, 3)))
    _, trace = network.forward(params, x, SMALL, "training", dropout_mask=np.ones((2, 5)))
    other = network.init_params(network.NetworkConfig(channels=(3, 4, 5, 7), pool=2, hidden=5, window_len=64))
    with pytest.raises(StateError):
        network.backward(other, trace, np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        network.backward(params, trace, np.zeros((3, 3)))


def test_backend_parity():
    if len(BACKENDS) < 2:
        pytest.skip("compiled extension not built")
    c, n = kernels.get_backend("cython"), kernels.get_backend("numpy")
    rng = np.random.default_rng(10)
    x = rng.normal(size=(3, 301, 8))
    w = rng.normal(size=(5, 8, 16))
    b = rng.normal(size=16)
    np.testing.assert_allclose(c.conv1d_forward(x, w, b), n.conv1d_forward(x, w, b), rtol=1e-12, atol=1e-12)
    dz = rng.normal(size=(3, 297, 16))
    for got, want in zip(c.conv1d_backward(x, w, dz, True), n.conv1d_backward(x, w, dz, True)):
        np.testing.assert_allclose(got, want, rtol=1e-11, atol=1e-11)
    assert c.conv1d_backward(x, w, dz, False)[0] is None
    z = rng.normal(size=(3, 301, 8))
    np.testing.assert_allclose(c.avg_pool_forward(z, 4), n.avg_pool_forward(z, 4), rtol=1e-14)
    dy = rng.normal(size=(3, 75, 8))
    np.testing.assert_allclose(c.avg_pool_backward(dy, 4, 301), n.avg_pool_backward(dy, 4, 301), rtol=1e-14)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


# --------------------------------------------------------- serialization


def test_round_trip_bitwise(tmp_path):
    cfg = network.NetworkConfig(hidden=16, keep_prob=0.7)
    params = network.init_params(cfg, 42)
    path = tmp_path / "m.ofbn"
    serialize.save_model(path, params, cfg, seed=42, extra={"note": "x"})
    back, cfg2, header = serialize.load_model(path)
    assert cfg2 == cfg
    assert header["seed"] == 42 and header["extra"] == {"note": "x"}
    assert list(back) == list(params)
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()
    assert serialize.to_bytes(back, cfg2, 42, {"note": "x"}) == path.read_bytes()


def test_byte_layout():
    cfg = SMALL
    params = network.init_params(cfg, 1)
    data = serialize.to_bytes(params, cfg, seed=1)
    assert data[:8] == b"OFBENET1"
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen])
    assert header["tensors"][0] == {"name": "conv1.weight", "shape": [5, 3, 4]}
    first = np.frombuffer(data[16 + hlen : 16 + hlen + 8 * 60], dtype="<f8").reshape(5, 3, 4)
    assert np.array_equal(first, params["conv1.weight"])
    assert len(data) == 16 + hlen + 8 * sum(int(np.prod(s)) for s in network.param_shapes(cfg).values())


def test_corrupt_files():
    data = serialize.to_bytes(network.init_params(SMALL), SMALL)
    with pytest.raises(ParseError):
        serialize.from_bytes(b"NOTAMODEL" + data[9:])
    with pytest.raises(ParseError):
        serialize.from_bytes(data[:-8])
    with pytest.raises(ParseError):
        serialize.from_bytes(data + b"\0" * 8)


def test_save_rejects_wrong_shapes():
    params = network.init_params(SMALL)
    params["dense.bias"] = np.zeros(4)
    with pytest.raises(StateError):
        serialize.to_bytes(params, SMALL)
