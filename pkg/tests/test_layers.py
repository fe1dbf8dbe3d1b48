from pathlib import Path
import sys

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from app.tensor import (  # noqa: E402
    SGD,
    BackwardError,
    Layer,
    LayerSpec,
    LayerSpecError,
    Network,
    ParamSet,
    Sequential,
    ShapeError,
    batchnorm,
    cross_entropy,
    init_params,
    layer_forward,
    sgd_step,
)
from app.tensor.layers import (  # noqa: E402
    avgpool2d_forward,
    batchnorm_spec,
    conv,
    conv2d_forward,
    linear_spec,
    maxpool2d_forward,
    output_shape,
    pool,
    relu_spec,
    residual,
)
from app.tensor.params import RUNNING_MEAN, RUNNING_VAR  # noqa: E402


def _conv_params(weight: np.ndarray, bias: np.ndarray) -> ParamSet:
    return ParamSet(values={"weight": weight, "bias": bias})


def test_conv2d_sums_padded_neighbourhood() -> None:
    spec = conv(1, 1, kernel_size=3, stride=1, padding=1)
    params = _conv_params(np.ones((1, 1, 3, 3), dtype=np.float32), np.zeros(1, dtype=np.float32))
    x = np.ones((1, 1, 3, 3), dtype=np.float32)

    out, _ = layer_forward(spec, params, x)

    expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=np.float32)
    np.testing.assert_array_equal(out[0, 0], expected)
    assert out.dtype == np.float32


def test_conv2d_stride_two_matches_output_shape() -> None:
    spec = conv(3, 5, kernel_size=3, stride=2, padding=1)
    params = init_params(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((2, 3, 9, 9)).astype(np.float32)

    out, _ = layer_forward(spec, params, x)

    assert out.shape[1:] == output_shape(spec, (3, 9, 9)) == (5, 5, 5)


def test_conv2d_rejects_channel_mismatch() -> None:
    spec = conv(3, 4)
    params = init_params(spec, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        layer_forward(spec, params, np.zeros((1, 2, 8, 8), dtype=np.float32))


def test_kernels_preserve_float64() -> None:
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 6, 6))
    for spec in (conv(3, 4), batchnorm_spec(3), relu_spec(), pool("maxpool2d"), pool("avgpool2d"), residual(3, 4, 2)):
        params = init_params(spec, rng, dtype=np.float64)
        out, _ = layer_forward(spec, params, x, training=True)
        assert out.dtype == np.float64, spec.kind


def test_maxpool_and_avgpool_values() -> None:
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    empty = ParamSet()

    maxed, _ = layer_forward(pool("maxpool2d"), empty, x)
    averaged, _ = layer_forward(pool("avgpool2d"), empty, x)

    np.testing.assert_array_equal(maxed[0, 0], [[5, 7], [13, 15]])
    np.testing.assert_allclose(averaged[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def _conv_reference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    f, _, k, _ = weight.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + w] = x
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, f, h_out, w_out))
    for b in range(n):
        for o in range(f):
            for i in range(h_out):
                for j in range(w_out):
                    total = bias[o]
                    for ch in range(c):
                        for di in range(k):
                            for dj in range(k):
                                total += xp[b, ch, i * stride + di, j * stride + dj] * weight[o, ch, di, dj]
                    out[b, o, i, j] = total
    return out


def _pool_reference(x: np.ndarray, kernel: int, stride: int, reduce) -> np.ndarray:
    n, c, h, w = x.shape
    h_out = (h - kernel) // stride + 1
    w_out = (w - kernel) // stride + 1
    out = np.zeros((n, c, h_out, w_out))
    for b in range(n):
        for ch in range(c):
            for i in range(h_out):
                for j in range(w_out):
                    out[b, ch, i, j] = reduce(x[b, ch, i * stride : i * stride + kernel, j * stride : j * stride + kernel])
    return out


def test_conv2d_matches_nested_loop_reference_on_random_configurations() -> None:
    rng = np.random.default_rng(2024)
    for _ in range(60):
        n, c, f = (int(v) for v in rng.integers(1, 4, size=3))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, k))
        h, w = (int(v) for v in rng.integers(max(k - 2 * padding, 1), 8, size=2))
        x = rng.standard_normal((n, c, h, w))
        weight = rng.standard_normal((f, c, k, k))
        bias = rng.standard_normal(f)

        out, _ = conv2d_forward(x, weight, bias, stride=stride, padding=padding)

        expected = _conv_reference(x, weight, bias, stride, padding)
        assert out.shape == expected.shape, (n, c, h, w, k, stride, padding)
        np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-10)


def test_pooling_matches_nested_loop_reference_on_random_configurations() -> None:
    rng = np.random.default_rng(7)
    for _ in range(60):
        n, c = (int(v) for v in rng.integers(1, 4, size=2))
        kernel = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 4))
        h, w = (int(v) for v in rng.integers(kernel, 9, size=2))
        x = rng.standard_normal((n, c, h, w))

        maxed, _ = maxpool2d_forward(x, kernel, stride)
        averaged, _ = avgpool2d_forward(x, kernel, stride)

        np.testing.assert_allclose(maxed, _pool_reference(x, kernel, stride, np.max), rtol=1e-12)
        np.testing.assert_allclose(averaged, _pool_reference(x, kernel, stride, np.mean), rtol=1e-10, atol=1e-12)


def test_batchnorm_train_mode_normalises_and_updates_running_stats() -> None:
    rng = np.random.default_rng(0)
    x = (3.0 + 2.0 * rng.standard_normal((8, 2, 4, 4))).astype(np.float32)
    params = init_params(batchnorm_spec(2), rng)

    out = batchnorm(x, params, mode="train")

    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    count = 8 * 4 * 4
    mean = x.mean(axis=(0, 2, 3))
    unbiased = x.var(axis=(0, 2, 3)) * count / (count - 1)
    np.testing.assert_allclose(params[RUNNING_MEAN], 0.1 * mean, rtol=1e-5)
    np.testing.assert_allclose(params[RUNNING_VAR], 0.9 + 0.1 * unbiased, rtol=1e-5)


def test_batchnorm_constant_channel_outputs_beta() -> None:
    params = init_params(batchnorm_spec(1), np.random.default_rng(0))
    params.values["bn-beta"][...] = 0.75
    x = np.full((4, 1, 3, 3), 2.5, dtype=np.float32)

    out = batchnorm(x, params, mode="train")

    np.testing.assert_allclose(out, 0.75, atol=1e-6)


def test_batchnorm_eval_uses_running_stats_and_leaves_them_alone() -> None:
    params = init_params(batchnorm_spec(2), np.random.default_rng(0))
    params.values[RUNNING_MEAN][...] = [1.0, -1.0]
    params.values[RUNNING_VAR][...] = [4.0, 1.0]
    x = np.ones((2, 2, 2, 2), dtype=np.float32)

    out = batchnorm(x, params, mode="eval")

    np.testing.assert_allclose(out[:, 0], 0.0, atol=1e-6)
    np.testing.assert_allclose(out[:, 1], 2.0 / np.sqrt(1.0 + 1e-5), rtol=1e-5)
    np.testing.assert_array_equal(params[RUNNING_MEAN], [1.0, -1.0])


def test_frozen_batchnorm_ignores_training_flag() -> None:
    params = init_params(batchnorm_spec(2), np.random.default_rng(0))
    params.freeze()
    x = np.random.default_rng(1).standard_normal((4, 2, 3, 3)).astype(np.float32)

    trained, _ = layer_forward(batchnorm_spec(2), params, x, training=True)
    evaluated, _ = layer_forward(batchnorm_spec(2), params, x, training=False)

    np.testing.assert_array_equal(trained, evaluated)
    np.testing.assert_array_equal(params[RUNNING_MEAN], 0.0)


def test_batchnorm_rejects_unknown_mode() -> None:
    params = init_params(batchnorm_spec(1), np.random.default_rng(0))
    with pytest.raises(ValueError):
        batchnorm(np.zeros((1, 1, 2, 2), dtype=np.float32), params, mode="inference")


def test_layer_spec_validation() -> None:
    with pytest.raises(LayerSpecError):
        LayerSpec("dropout", {})
    with pytest.raises(LayerSpecError):
        LayerSpec("conv2d", {"in_channels": 3, "out_channels": 4})
    with pytest.raises(LayerSpecError):
        residual(4, 8, stride=1, projection=False)
    spec = residual(4, 8)
    assert spec["projection"] == 1
    assert LayerSpec.from_dict(spec.to_dict()) == spec


def test_layer_backward_without_forward_raises() -> None:
    layer = Layer(linear_spec(4, 2), rng=np.random.default_rng(0))
    with pytest.raises(BackwardError):
        layer.backward(np.zeros((1, 2), dtype=np.float32))


def test_cross_entropy_uniform_logits() -> None:
    logits = np.zeros((2, 4), dtype=np.float32)

    loss, grad = cross_entropy(logits, np.array([0, 3]))

    assert loss == pytest.approx(np.log(4.0))
    np.testing.assert_allclose(grad[0], [-0.375, 0.125, 0.125, 0.125], rtol=1e-6)


def test_cross_entropy_is_finite_for_large_logits() -> None:
    logits = np.array([[1e4, -1e4, 0.0]], dtype=np.float32)

    loss, grad = cross_entropy(logits, np.array([1]))

    assert np.isfinite(loss) and loss > 0
    assert np.all(np.isfinite(grad))


def test_cross_entropy_rejects_out_of_range_labels() -> None:
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 3), dtype=np.float32), np.array([3]))


def test_sgd_momentum_step_and_frozen_groups() -> None:
    params = ParamSet(values={"weight": np.array([1.0, 2.0], dtype=np.float32)})
    params.set_grad("weight", np.array([0.5, -1.0], dtype=np.float32))

    sgd_step(params, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_allclose(params["weight"], [0.95, 2.1], rtol=1e-6)
    sgd_step(params, lr=0.1, momentum=0.9, weight_decay=0.0)
    # v = 0.9 * g + g
    np.testing.assert_allclose(params["weight"], [0.95 - 0.095, 2.1 + 0.19], rtol=1e-6)

    frozen = ParamSet(values={"weight": np.ones(2, dtype=np.float32)}, frozen=True)
    frozen.set_grad("weight", np.ones(2, dtype=np.float32))
    SGD(0.1).step([frozen])
    np.testing.assert_array_equal(frozen["weight"], 1.0)


def test_sgd_weight_decay_and_buffers_untouched() -> None:
    params = init_params(batchnorm_spec(2), np.random.default_rng(0))
    params.values[RUNNING_MEAN][...] = 5.0

    sgd_step(params, lr=0.5, momentum=0.0, weight_decay=0.1)

    np.testing.assert_allclose(params["bn-gamma"], 1.0 - 0.5 * 0.1, rtol=1e-6)
    np.testing.assert_array_equal(params[RUNNING_MEAN], 5.0)


def test_network_backward_stops_at_frozen_prefix() -> None:
    rng = np.random.default_rng(0)
    frozen = Sequential([Layer(conv(3, 2), rng=rng), Layer(relu_spec())])
    for _, group in frozen.param_groups():
        group.freeze()
    head = Sequential([Layer(linear_spec(2 * 4 * 4, 3), rng=rng)])
    network = Network([("cell1", frozen), ("head", head)])
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)

    logits = network.forward(x, training=True)
    _, dlogits = cross_entropy(logits, np.array([0, 2]))

    assert network.frozen_prefix_length() == 1
    assert network.backward(dlogits) is None
    assert network.num_trainable() == 2 * 4 * 4 * 3 + 3
    assert network.num_params() == network.num_trainable() + 2 * 3 * 9 + 2


def test_state_dict_round_trip_and_mismatch() -> None:
    rng = np.random.default_rng(0)

    def make() -> Network:
        return Network([("cell1", Sequential([Layer(conv(3, 2), rng=rng), Layer(batchnorm_spec(2))]))])

    source, target = make(), make()
    target.load_state_dict(source.state_dict())
    for name, value in source.state_dict().items():
        np.testing.assert_array_equal(target.state_dict()[name], value)

    with pytest.raises(KeyError):
        target.load_state_dict({"cell1.0.weight": np.zeros((2, 3, 3, 3), dtype=np.float32)})
