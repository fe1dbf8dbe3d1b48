from pathlib import Path
import math
import sys

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from app.adapters import AdapterBlock, adapter_backward, adapter_forward, plan_adapter  # noqa: E402
from app.tensor import cross_entropy, init_params, layer_backward, layer_forward  # noqa: E402
from app.tensor.layers import batchnorm_spec, conv, linear_spec, pool, relu_spec, residual  # noqa: E402

STEP = 1e-5
TOLERANCE = 1e-5


def numeric_grad(f, x: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(x)
    for index in np.ndindex(*x.shape):
        original = x[index]
        x[index] = original + STEP
        plus = f()
        x[index] = original - STEP
        minus = f()
        x[index] = original
        grad[index] = (plus - minus) / (2 * STEP)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


LAYER_CASES = [
    ("conv-pad", conv(2, 3, kernel_size=3, stride=1, padding=1), (2, 2, 5, 5)),
    ("conv-stride", conv(2, 3, kernel_size=3, stride=2, padding=1), (2, 2, 6, 6)),
    ("conv-1x1", conv(3, 2, kernel_size=1, stride=1, padding=0), (2, 3, 3, 3)),
    ("batchnorm", batchnorm_spec(3), (4, 3, 3, 3)),
    ("relu", relu_spec(), (2, 3, 4, 4)),
    ("maxpool", pool("maxpool2d"), (2, 2, 4, 4)),
    ("avgpool", pool("avgpool2d"), (2, 2, 4, 4)),
    ("linear", linear_spec(18, 4), (3, 2, 3, 3)),
    ("residual-projection", residual(2, 3, stride=2), (3, 2, 4, 4)),
    ("residual-identity", residual(3, 3), (3, 3, 4, 4)),
]


def _random_layer_cases(per_kind: int = 3):
    rng = np.random.default_rng(2718)
    cases = []

    def small(low: int, high: int) -> int:
        return int(rng.integers(low, high + 1))

    for index in range(per_kind):
        k = small(1, 3)
        padding = small(0, k - 1)
        stride = small(1, 2)
        c_in = small(1, 3)
        cases.append((f"conv-random-{index}", conv(c_in, small(1, 3), k, stride, padding), (2, c_in, small(k, 5), small(k, 5))))
        cases.append((f"batchnorm-random-{index}", batchnorm_spec(c_in), (small(2, 4), c_in, small(2, 3), small(2, 3))))
        cases.append((f"relu-random-{index}", relu_spec(), (small(1, 3), c_in, small(1, 4), small(1, 4))))
        kernel = small(2, 3)
        for kind in ("maxpool2d", "avgpool2d"):
            shape = (small(1, 2), c_in, small(kernel, 5), small(kernel, 5))
            cases.append((f"{kind}-random-{index}", pool(kind, kernel, small(1, 2)), shape))
        shape = (small(1, 3), c_in, small(1, 3), small(1, 3))
        cases.append((f"linear-random-{index}", linear_spec(int(np.prod(shape[1:])), small(1, 4)), shape))
        residual_spec = residual(c_in, small(1, 4), stride=small(1, 2))
        cases.append((f"residual-random-{index}", residual_spec, (small(2, 3), c_in, small(3, 5), small(3, 5))))
    return cases


RANDOM_LAYER_CASES = _random_layer_cases()


@pytest.mark.parametrize(
    "name,spec,shape", LAYER_CASES + RANDOM_LAYER_CASES, ids=[case[0] for case in LAYER_CASES + RANDOM_LAYER_CASES]
)
def test_layer_gradients_match_finite_differences(name, spec, shape) -> None:
    rng = np.random.default_rng(7)
    params = init_params(spec, rng, dtype=np.float64)
    for value_name in params.trainable_names():
        params.values[value_name] += 0.1 * rng.standard_normal(params[value_name].shape)
    x = rng.standard_normal(shape)
    out, cache = layer_forward(spec, params, x, training=True)
    upstream = rng.standard_normal(out.shape)

    def objective() -> float:
        return float((layer_forward(spec, params, x, training=True)[0] * upstream).sum())

    dx, grads = layer_backward(spec, cache, upstream)

    assert dx.shape == x.shape
    assert relative_error(dx, numeric_grad(objective, x)) < TOLERANCE, name
    for value_name in params.trainable_names():
        expected = numeric_grad(objective, params.values[value_name])
        assert relative_error(grads[value_name], expected) < TOLERANCE, f"{name}:{value_name}"


ADAPTER_CASES = [(8, 4), (4, 8), (6, 4), (4, 6), (5, 3), (3, 7)]


def _random_adapter_cases(per_kind: int = 3):
    rng = np.random.default_rng(1618)
    buckets = {"chp": [], "chdp": [], "ext-chp": [], "ext-chdp": []}
    while min(len(pairs) for pairs in buckets.values()) < per_kind:
        c_in, c_out = (int(v) for v in rng.integers(1, 25, size=2))
        kind = plan_adapter(c_in, c_out).kind
        if kind == "ext-chp" and math.gcd(c_in, c_out) == 1:
            continue
        if kind in buckets and len(buckets[kind]) < per_kind:
            buckets[kind].append((c_in, c_out))
    return [pair for pairs in buckets.values() for pair in pairs]


RANDOM_ADAPTER_CASES = _random_adapter_cases()


@pytest.mark.parametrize("c_in,c_out", ADAPTER_CASES + RANDOM_ADAPTER_CASES)
def test_adapter_gradients_match_finite_differences(c_in, c_out) -> None:
    rng = np.random.default_rng(c_in * 10 + c_out)
    plan = plan_adapter(c_in, c_out)
    x = rng.standard_normal((2, c_in, 3, 3))
    upstream = rng.standard_normal((2, c_out, 3, 3))

    def objective() -> float:
        return float((adapter_forward(plan, x) * upstream).sum())

    dx = adapter_backward(plan, upstream)

    assert relative_error(dx, numeric_grad(objective, x)) < TOLERANCE, plan.kind


def test_baseline_adapter_gradient_flows_through_block() -> None:
    rng = np.random.default_rng(3)
    block = AdapterBlock(plan_adapter(6, 4, use_baseline=True), rng=rng)
    assert block.conv is not None
    for name in block.conv.params.trainable_names():
        block.conv.params.values[name] = block.conv.params.values[name].astype(np.float64)
    block.conv.params.grads = {name: np.zeros_like(v) for name, v in block.conv.params.values.items()}
    x = rng.standard_normal((2, 6, 3, 3))
    upstream = rng.standard_normal((2, 4, 3, 3))

    def objective() -> float:
        return float((block.forward(x, record=False) * upstream).sum())

    block.forward(x, training=True)
    dx = block.backward(upstream)

    assert relative_error(dx, numeric_grad(objective, x)) < TOLERANCE
    weight = block.conv.params.values["weight"]
    assert relative_error(block.conv.params.grads["weight"], numeric_grad(objective, weight)) < TOLERANCE


def test_cross_entropy_gradient_matches_finite_differences() -> None:
    rng = np.random.default_rng(11)
    logits = rng.standard_normal((4, 5))
    labels = np.array([0, 4, 2, 2])

    _, grad = cross_entropy(logits, labels)

    expected = numeric_grad(lambda: cross_entropy(logits, labels)[0], logits)
    assert relative_error(grad, expected) < TOLERANCE
