"""Layer specifications and numpy forward/backward kernels (NCHW layout)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .params import RUNNING_MEAN, RUNNING_VAR, ParamSet

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

LAYER_SCHEMAS: Dict[str, Tuple[str, ...]] = {
    "conv2d": ("in_channels", "out_channels", "kernel_size", "stride", "padding"),
    "batchnorm": ("channels",),
    "relu": (),
    "maxpool2d": ("kernel_size", "stride"),
    "avgpool2d": ("kernel_size", "stride"),
    "linear": ("in_features", "out_features"),
    "residual-block": ("in_channels", "out_channels", "stride", "projection"),
}
LAYER_KINDS = tuple(LAYER_SCHEMAS)

Cache = Any
Grads = Dict[str, np.ndarray]


class LayerSpecError(ValueError):
    """Raised when a layer specification does not match its kind's schema."""


class ShapeError(ValueError):
    """Raised when an input tensor does not fit the layer it is fed to."""


class BackwardError(RuntimeError):
    """Raised when backward is requested without saved forward activations."""


@dataclass(frozen=True)
class LayerSpec:
    """Kind plus integer hyperparameters of a single layer."""

    kind: str
    hyperparams: Mapping[str, int] = field(default_factory=dict)
    trainable: bool = True

    def __post_init__(self) -> None:
        schema = LAYER_SCHEMAS.get(self.kind)
        if schema is None:
            raise LayerSpecError(f"Unknown layer kind {self.kind!r}")
        given = set(self.hyperparams)
        expected = set(schema)
        if given != expected:
            missing = sorted(expected - given)
            extra = sorted(given - expected)
            raise LayerSpecError(
                f"{self.kind} hyperparameters mismatch (missing={missing}, unexpected={extra})"
            )
        object.__setattr__(self, "hyperparams", {k: int(self.hyperparams[k]) for k in schema})
        for name in ("out_channels", "out_features", "channels", "in_channels", "in_features"):
            if name in self.hyperparams and self.hyperparams[name] < 1:
                raise LayerSpecError(f"{self.kind}: {name} must be >= 1")
        for name in ("kernel_size", "stride"):
            if name in self.hyperparams and self.hyperparams[name] < 1:
                raise LayerSpecError(f"{self.kind}: {name} must be >= 1")
        if self.hyperparams.get("padding", 0) < 0:
            raise LayerSpecError(f"{self.kind}: padding must be >= 0")
        if self.kind == "residual-block" and not self.hyperparams["projection"]:
            hp = self.hyperparams
            if hp["in_channels"] != hp["out_channels"] or hp["stride"] != 1:
                raise LayerSpecError(
                    "residual-block identity shortcut needs matching channels and stride 1 "
                    f"(got {hp['in_channels']}->{hp['out_channels']}, stride {hp['stride']})"
                )

    def __getitem__(self, name: str) -> int:
        return self.hyperparams[name]

    @property
    def stride(self) -> int:
        return self.hyperparams.get("stride", 1)

    @property
    def is_reduction(self) -> bool:
        return self.kind in {"conv2d", "maxpool2d", "avgpool2d", "residual-block"} and self.stride == 2

    @property
    def out_channels(self) -> Optional[int]:
        if self.kind == "batchnorm":
            return self.hyperparams["channels"]
        return self.hyperparams.get("out_channels")

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "hyperparams": dict(self.hyperparams), "trainable": self.trainable}

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "LayerSpec":
        return cls(
            kind=str(payload["kind"]),
            hyperparams=dict(payload.get("hyperparams", {})),
            trainable=bool(payload.get("trainable", True)),
        )


def conv(in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1, padding: int = 1) -> LayerSpec:
    return LayerSpec(
        "conv2d",
        {
            "in_channels": in_channels,
            "out_channels": out_channels,
            "kernel_size": kernel_size,
            "stride": stride,
            "padding": padding,
        },
    )


def batchnorm_spec(channels: int) -> LayerSpec:
    return LayerSpec("batchnorm", {"channels": channels})


def relu_spec() -> LayerSpec:
    return LayerSpec("relu", {})


def pool(kind: str = "maxpool2d", kernel_size: int = 2, stride: int = 2) -> LayerSpec:
    return LayerSpec(kind, {"kernel_size": kernel_size, "stride": stride})


def linear_spec(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("linear", {"in_features": in_features, "out_features": out_features})


def residual(in_channels: int, out_channels: int, stride: int = 1, projection: Optional[bool] = None) -> LayerSpec:
    if projection is None:
        projection = stride != 1 or in_channels != out_channels
    return LayerSpec(
        "residual-block",
        {
            "in_channels": in_channels,
            "out_channels": out_channels,
            "stride": stride,
            "projection": int(projection),
        },
    )


# ----------------------------------------------------------------------------
# Initialisation


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype: Any) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _conv_values(prefix: str, c_in: int, c_out: int, k: int, rng: np.random.Generator, dtype: Any) -> Dict[str, np.ndarray]:
    return {
        f"{prefix}weight": _uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype),
        f"{prefix}bias": np.zeros(c_out, dtype=dtype),
    }


def _bn_values(prefix: str, channels: int, dtype: Any) -> Dict[str, np.ndarray]:
    return {
        f"{prefix}bn-gamma": np.ones(channels, dtype=dtype),
        f"{prefix}bn-beta": np.zeros(channels, dtype=dtype),
        f"{prefix}{RUNNING_MEAN}": np.zeros(channels, dtype=dtype),
        f"{prefix}{RUNNING_VAR}": np.ones(channels, dtype=dtype),
    }


def init_params(spec: LayerSpec, rng: np.random.Generator, dtype: Any = np.float32) -> ParamSet:
    """Fresh parameters for ``spec`` with uniform fan-in scaled weights."""
    hp = spec.hyperparams
    values: Dict[str, np.ndarray] = {}
    if spec.kind == "conv2d":
        values = _conv_values("", hp["in_channels"], hp["out_channels"], hp["kernel_size"], rng, dtype)
    elif spec.kind == "batchnorm":
        values = _bn_values("", hp["channels"], dtype)
    elif spec.kind == "linear":
        values = {
            "weight": _uniform(rng, (hp["out_features"], hp["in_features"]), hp["in_features"], dtype),
            "bias": np.zeros(hp["out_features"], dtype=dtype),
        }
    elif spec.kind == "residual-block":
        c_in, c_out = hp["in_channels"], hp["out_channels"]
        values.update(_conv_values("a.", c_in, c_out, 3, rng, dtype))
        values.update(_bn_values("a.", c_out, dtype))
        values.update(_conv_values("b.", c_out, c_out, 3, rng, dtype))
        values.update(_bn_values("b.", c_out, dtype))
        if hp["projection"]:
            values.update(_conv_values("shortcut.", c_in, c_out, 1, rng, dtype))
            values.update(_bn_values("shortcut.", c_out, dtype))
    return ParamSet(values=values, frozen=not spec.trainable)


# ----------------------------------------------------------------------------
# Kernels


def _windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    return sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def _check_4d(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an (N, C, H, W) tensor, got shape {x.shape}")


def conv2d_forward(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0
) -> Tuple[np.ndarray, Cache]:
    _check_4d(x, "conv2d")
    n, c, h, w = x.shape
    f, c_w, kh, kw = weight.shape
    if c != c_w:
        raise ShapeError(f"conv2d input has {c} channels, weight expects {c_w}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    cols = _windows(xp, kh, stride)
    out = np.tensordot(cols, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out + bias.reshape(1, -1, 1, 1), dtype=x.dtype)
    return out, (x, weight, stride, padding)


def conv2d_backward(
    dout: np.ndarray, cache: Cache, need_param_grads: bool = True
) -> Tuple[np.ndarray, Grads]:
    x, weight, stride, padding = cache
    _, _, h, w = x.shape
    _, _, kh, kw = weight.shape
    _, _, h_out, w_out = dout.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    grads: Grads = {}
    if need_param_grads:
        cols = _windows(xp, kh, stride)
        grads["weight"] = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3])).astype(weight.dtype)
        grads["bias"] = dout.sum(axis=(0, 2, 3)).astype(weight.dtype)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(dout, weight[:, :, i, j], axes=([1], [0]))
            dxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += contrib.transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
    return np.ascontiguousarray(dx), grads


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, Cache]:
    return np.maximum(x, 0).astype(x.dtype, copy=False), x


def relu_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
    return np.where(cache > 0, dout, 0).astype(dout.dtype, copy=False)


def _pool_shape(x: np.ndarray, kernel: int, what: str) -> None:
    _check_4d(x, what)
    if x.shape[2] < kernel or x.shape[3] < kernel:
        raise ShapeError(f"{what} kernel {kernel} larger than input {x.shape[2:]}")


def maxpool2d_forward(x: np.ndarray, kernel: int, stride: int) -> Tuple[np.ndarray, Cache]:
    _pool_shape(x, kernel, "maxpool2d")
    win = _windows(x, kernel, stride)
    n, c, h_out, w_out = win.shape[:4]
    flat = win.reshape(n, c, h_out, w_out, kernel * kernel)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (x.shape, argmax, kernel, stride)


def maxpool2d_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
    shape, argmax, kernel, stride = cache
    _, _, h_out, w_out = dout.shape
    dx = np.zeros(shape, dtype=dout.dtype)
    for i in range(kernel):
        for j in range(kernel):
            routed = np.where(argmax == i * kernel + j, dout, 0)
            dx[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += routed
    return dx


def avgpool2d_forward(x: np.ndarray, kernel: int, stride: int) -> Tuple[np.ndarray, Cache]:
    _pool_shape(x, kernel, "avgpool2d")
    out = _windows(x, kernel, stride).mean(axis=(4, 5), dtype=x.dtype)
    return np.ascontiguousarray(out), (x.shape, kernel, stride)


def avgpool2d_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
    shape, kernel, stride = cache
    _, _, h_out, w_out = dout.shape
    dx = np.zeros(shape, dtype=dout.dtype)
    share = dout / (kernel * kernel)
    for i in range(kernel):
        for j in range(kernel):
            dx[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += share
    return dx


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, Cache]:
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear expects {weight.shape[1]} input features, got {flat.shape[1]}")
    out = flat @ weight.T + bias
    return out.astype(x.dtype, copy=False), (x.shape, flat, weight)


def linear_backward(dout: np.ndarray, cache: Cache, need_param_grads: bool = True) -> Tuple[np.ndarray, Grads]:
    shape, flat, weight = cache
    grads: Grads = {}
    if need_param_grads:
        grads["weight"] = (dout.T @ flat).astype(weight.dtype, copy=False)
        grads["bias"] = dout.sum(axis=0).astype(weight.dtype, copy=False)
    dx = (dout @ weight).reshape(shape)
    return dx, grads


def _bn_axes(x: np.ndarray) -> Tuple[int, ...]:
    return (0, 2, 3) if x.ndim == 4 else (0,)


def _bn_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(1, -1, 1, 1) if ndim == 4 else v.reshape(1, -1)


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tuple[np.ndarray, Cache, Optional[Tuple[np.ndarray, np.ndarray]]]:
    """Batch normalisation; returns (out, cache, updated running stats or None)."""
    if x.ndim not in (2, 4) or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm over {gamma.shape[0]} channels got input {x.shape}")
    axes = _bn_axes(x)
    updated = None
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        count = x.size // x.shape[1]
        unbiased = var * (count / (count - 1)) if count > 1 else var
        updated = (
            ((1 - momentum) * running_mean + momentum * mean).astype(running_mean.dtype),
            ((1 - momentum) * running_var + momentum * unbiased).astype(running_var.dtype),
        )
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - _bn_view(mean, x.ndim)) * _bn_view(inv_std, x.ndim)
    out = _bn_view(gamma, x.ndim) * xhat + _bn_view(beta, x.ndim)
    return out.astype(x.dtype, copy=False), (xhat, gamma, inv_std, training), updated


def batchnorm_backward(dout: np.ndarray, cache: Cache, need_param_grads: bool = True) -> Tuple[np.ndarray, Grads]:
    xhat, gamma, inv_std, training = cache
    axes = _bn_axes(dout)
    ndim = dout.ndim
    grads: Grads = {}
    if need_param_grads:
        grads["bn-gamma"] = (dout * xhat).sum(axis=axes).astype(gamma.dtype)
        grads["bn-beta"] = dout.sum(axis=axes).astype(gamma.dtype)
    dxhat = dout * _bn_view(gamma, ndim)
    if not training:
        return (dxhat * _bn_view(inv_std, ndim)).astype(dout.dtype), grads
    m = dout.size // dout.shape[1]
    sum_dxhat = dxhat.sum(axis=axes, keepdims=True)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes, keepdims=True)
    dx = _bn_view(inv_std, ndim) / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx.astype(dout.dtype), grads


# ----------------------------------------------------------------------------
# LayerSpec dispatch


def _bn_apply(
    x: np.ndarray, params: ParamSet, prefix: str, training: bool
) -> Tuple[np.ndarray, Cache]:
    v = params.values
    out, cache, updated = batchnorm_forward(
        x,
        v[f"{prefix}bn-gamma"],
        v[f"{prefix}bn-beta"],
        v[f"{prefix}{RUNNING_MEAN}"],
        v[f"{prefix}{RUNNING_VAR}"],
        training,
    )
    if updated is not None:
        v[f"{prefix}{RUNNING_MEAN}"][...] = updated[0]
        v[f"{prefix}{RUNNING_VAR}"][...] = updated[1]
    return out, cache


def _residual_forward(spec: LayerSpec, params: ParamSet, x: np.ndarray, bn_training: bool) -> Tuple[np.ndarray, Cache]:
    v = params.values
    stride = spec["stride"]
    a, conv_a = conv2d_forward(x, v["a.weight"], v["a.bias"], stride, 1)
    a, bn_a = _bn_apply(a, params, "a.", bn_training)
    a, relu_a = relu_forward(a)
    b, conv_b = conv2d_forward(a, v["b.weight"], v["b.bias"], 1, 1)
    b, bn_b = _bn_apply(b, params, "b.", bn_training)
    if spec["projection"]:
        s, conv_s = conv2d_forward(x, v["shortcut.weight"], v["shortcut.bias"], stride, 0)
        s, bn_s = _bn_apply(s, params, "shortcut.", bn_training)
        shortcut = (conv_s, bn_s)
    else:
        if x.shape != b.shape:
            raise ShapeError(f"identity shortcut shape {x.shape} does not match block output {b.shape}")
        s, shortcut = x, None
    out, relu_out = relu_forward(b + s)
    return out, (conv_a, bn_a, relu_a, conv_b, bn_b, shortcut, relu_out)


def _residual_backward(dout: np.ndarray, cache: Cache, need_param_grads: bool) -> Tuple[np.ndarray, Grads]:
    conv_a, bn_a, relu_a, conv_b, bn_b, shortcut, relu_out = cache
    grads: Grads = {}

    def collect(prefix: str, part: Grads) -> None:
        grads.update({f"{prefix}{name}": g for name, g in part.items()})

    d = relu_backward(dout, relu_out)
    db, g = batchnorm_backward(d, bn_b, need_param_grads)
    collect("b.", g)
    db, g = conv2d_backward(db, conv_b, need_param_grads)
    collect("b.", g)
    db = relu_backward(db, relu_a)
    db, g = batchnorm_backward(db, bn_a, need_param_grads)
    collect("a.", g)
    dx, g = conv2d_backward(db, conv_a, need_param_grads)
    collect("a.", g)
    if shortcut is None:
        dx = dx + d
    else:
        conv_s, bn_s = shortcut
        ds, g = batchnorm_backward(d, bn_s, need_param_grads)
        collect("shortcut.", g)
        ds, g = conv2d_backward(ds, conv_s, need_param_grads)
        collect("shortcut.", g)
        dx = dx + ds
    return dx, grads


def layer_forward(
    spec: LayerSpec, params: ParamSet, x: np.ndarray, training: bool = False
) -> Tuple[np.ndarray, Cache]:
    """Run one layer; BN uses batch statistics only when training an unfrozen group."""
    hp = spec.hyperparams
    bn_training = training and not params.frozen
    if spec.kind == "conv2d":
        _check_4d(x, "conv2d")
        if x.shape[1] != hp["in_channels"]:
            raise ShapeError(f"conv2d expects {hp['in_channels']} channels, got {x.shape[1]}")
        return conv2d_forward(x, params["weight"], params["bias"], hp["stride"], hp["padding"])
    if spec.kind == "batchnorm":
        return _bn_apply(x, params, "", bn_training)
    if spec.kind == "relu":
        return relu_forward(x)
    if spec.kind == "maxpool2d":
        return maxpool2d_forward(x, hp["kernel_size"], hp["stride"])
    if spec.kind == "avgpool2d":
        return avgpool2d_forward(x, hp["kernel_size"], hp["stride"])
    if spec.kind == "linear":
        return linear_forward(x, params["weight"], params["bias"])
    if spec.kind == "residual-block":
        _check_4d(x, "residual-block")
        if x.shape[1] != hp["in_channels"]:
            raise ShapeError(f"residual-block expects {hp['in_channels']} channels, got {x.shape[1]}")
        return _residual_forward(spec, params, x, bn_training)
    raise LayerSpecError(f"Unknown layer kind {spec.kind!r}")


def layer_backward(
    spec: LayerSpec, cache: Optional[Cache], dout: np.ndarray, need_param_grads: bool = True
) -> Tuple[np.ndarray, Grads]:
    """Return (input gradient, parameter gradients) from the saved forward state."""
    if cache is None:
        raise BackwardError(f"{spec.kind}: backward called without saved forward activations")
    if spec.kind == "conv2d":
        return conv2d_backward(dout, cache, need_param_grads)
    if spec.kind == "batchnorm":
        return batchnorm_backward(dout, cache, need_param_grads)
    if spec.kind == "relu":
        return relu_backward(dout, cache), {}
    if spec.kind == "maxpool2d":
        return maxpool2d_backward(dout, cache), {}
    if spec.kind == "avgpool2d":
        return avgpool2d_backward(dout, cache), {}
    if spec.kind == "linear":
        return linear_backward(dout, cache, need_param_grads)
    if spec.kind == "residual-block":
        return _residual_backward(dout, cache, need_param_grads)
    raise LayerSpecError(f"Unknown layer kind {spec.kind!r}")


def conv2d(x: np.ndarray, params: ParamSet, spec: LayerSpec) -> np.ndarray:
    if spec.kind != "conv2d":
        raise LayerSpecError(f"conv2d called with a {spec.kind} spec")
    return layer_forward(spec, params, x)[0]


def batchnorm(x: np.ndarray, params: ParamSet, mode: str = "eval") -> np.ndarray:
    """Standalone BN over ``params``; ``mode`` is ``"train"`` or ``"eval"``."""
    if mode not in {"train", "eval"}:
        raise ValueError(f"Unknown batchnorm mode {mode!r}")
    spec = batchnorm_spec(params["bn-gamma"].shape[0])
    return layer_forward(spec, params, x, training=mode == "train")[0]


def output_shape(spec: LayerSpec, shape: Tuple[int, int, int]) -> Tuple[int, ...]:
    """Per-sample output shape of ``spec`` for an input of ``(C, H, W)``."""
    c, h, w = shape
    hp = spec.hyperparams
    if spec.kind == "conv2d":
        k, s, p = hp["kernel_size"], hp["stride"], hp["padding"]
        return (hp["out_channels"], (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
    if spec.kind in {"maxpool2d", "avgpool2d"}:
        k, s = hp["kernel_size"], hp["stride"]
        return (c, (h - k) // s + 1, (w - k) // s + 1)
    if spec.kind == "residual-block":
        s = hp["stride"]
        return (hp["out_channels"], (h - 1) // s + 1, (w - 1) // s + 1)
    if spec.kind == "linear":
        return (hp["out_features"],)
    return shape
