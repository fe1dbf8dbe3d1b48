"""Channel-count adapters placed between consecutive inherited modules.

All kinds except the 1x1-convolution baseline are fixed linear maps with no
parameters: channel pooling (average of ``k`` consecutive channels), channel
de-pooling (cyclic duplication), and their extensions for counts that do not
divide each other (GCD rotation for pooling, slicing for de-pooling).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .tensor import Layer, LayerSpec, ParamSet, ShapeError
from .tensor.layers import conv

ADAPTER_KINDS = ("identity", "chp", "chdp", "ext-chp", "ext-chdp", "conv1x1-baseline")


@dataclass(frozen=True)
class AdapterPlan:
    kind: str
    in_channels: int
    out_channels: int
    k: int = 1
    eta: int = 0
    groups: int = 1

    def __str__(self) -> str:
        return f"{self.kind}({self.in_channels}->{self.out_channels})"

    @property
    def parameter_free(self) -> bool:
        return self.kind != "conv1x1-baseline"


def plan_adapter(in_channels: int, out_channels: int, use_baseline: bool = False) -> AdapterPlan:
    """Choose the adapter connecting ``in_channels`` to ``out_channels``.

    Equal counts always connect through identity; otherwise the baseline flag
    selects a trainable 1x1 convolution, and without it the order is chp,
    chdp, ext-chp, ext-chdp.
    """
    if in_channels < 1 or out_channels < 1:
        raise ValueError(f"channel counts must be >= 1, got ({in_channels}, {out_channels})")
    if in_channels == out_channels:
        return AdapterPlan("identity", in_channels, out_channels)
    if use_baseline:
        return AdapterPlan("conv1x1-baseline", in_channels, out_channels)
    if in_channels % out_channels == 0:
        return AdapterPlan("chp", in_channels, out_channels, k=in_channels // out_channels)
    if out_channels % in_channels == 0:
        return AdapterPlan("chdp", in_channels, out_channels, k=out_channels // in_channels)
    if in_channels > out_channels:
        eta = math.gcd(in_channels, out_channels)
        return AdapterPlan(
            "ext-chp",
            in_channels,
            out_channels,
            k=in_channels // eta,
            eta=eta,
            groups=out_channels // eta,
        )
    return AdapterPlan("ext-chdp", in_channels, out_channels, k=math.ceil(out_channels / in_channels))


def chp(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    if k < 1 or c % k:
        raise ShapeError(f"channel pooling needs channels divisible by k (C={c}, k={k})")
    return x.reshape(n, c // k, k, h, w).mean(axis=2, dtype=x.dtype)


def chp_backward(dout: np.ndarray, k: int) -> np.ndarray:
    return np.repeat(dout / dout.dtype.type(k), k, axis=1)


def chdp(x: np.ndarray, k: int) -> np.ndarray:
    if k < 1:
        raise ShapeError(f"channel de-pooling needs k >= 1, got {k}")
    return np.tile(x, (1, k, 1, 1))


def chdp_backward(dout: np.ndarray, in_channels: int) -> np.ndarray:
    n, c_out, h, w = dout.shape
    k = math.ceil(c_out / in_channels)
    padded = dout
    if c_out != k * in_channels:
        padded = np.zeros((n, k * in_channels, h, w), dtype=dout.dtype)
        padded[:, :c_out] = dout
    return padded.reshape(n, k, in_channels, h, w).sum(axis=1)


def _require(plan: AdapterPlan, kind: str) -> None:
    if plan.kind != kind:
        raise ValueError(f"expected a {kind} plan, got {plan.kind}")


def ext_chp(x: np.ndarray, plan: AdapterPlan) -> np.ndarray:
    _require(plan, "ext-chp")
    return np.concatenate(
        [chp(np.roll(x, -i, axis=1), plan.k) for i in range(plan.groups)], axis=1
    )


def ext_chp_backward(dout: np.ndarray, plan: AdapterPlan) -> np.ndarray:
    dx: Optional[np.ndarray] = None
    for i in range(plan.groups):
        group = dout[:, i * plan.eta : (i + 1) * plan.eta]
        contribution = np.roll(chp_backward(group, plan.k), i, axis=1)
        dx = contribution if dx is None else dx + contribution
    assert dx is not None
    return dx


def ext_chdp(x: np.ndarray, plan: AdapterPlan) -> np.ndarray:
    _require(plan, "ext-chdp")
    return chdp(x, plan.k)[:, : plan.out_channels]


def conv1x1_baseline(x: np.ndarray, params: ParamSet) -> np.ndarray:
    weight = params["weight"]
    if weight.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ShapeError(f"baseline adapter needs a (C_out, C, 1, 1) kernel, got {weight.shape}")
    spec = conv(weight.shape[1], weight.shape[0], kernel_size=1, stride=1, padding=0)
    return Layer(spec, params).forward(x, record=False)


def adapter_forward(plan: AdapterPlan, x: np.ndarray) -> np.ndarray:
    """Apply a parameter-free plan."""
    if x.ndim != 4 or x.shape[1] != plan.in_channels:
        raise ShapeError(f"{plan} received input of shape {x.shape}")
    if plan.kind == "identity":
        return x
    if plan.kind == "chp":
        return chp(x, plan.k)
    if plan.kind == "chdp":
        return chdp(x, plan.k)
    if plan.kind == "ext-chp":
        return ext_chp(x, plan)
    if plan.kind == "ext-chdp":
        return ext_chdp(x, plan)
    raise ValueError(f"{plan.kind} adapters carry parameters; use AdapterBlock")


def adapter_backward(plan: AdapterPlan, dout: np.ndarray) -> np.ndarray:
    if plan.kind == "identity":
        return dout
    if plan.kind == "chp":
        return chp_backward(dout, plan.k)
    if plan.kind in {"chdp", "ext-chdp"}:
        return chdp_backward(dout, plan.in_channels)
    if plan.kind == "ext-chp":
        return ext_chp_backward(dout, plan)
    raise ValueError(f"{plan.kind} adapters carry parameters; use AdapterBlock")


class AdapterBlock:
    """Network block wrapping an :class:`AdapterPlan` (and the baseline's conv)."""

    def __init__(self, plan: AdapterPlan, *, rng: Optional[np.random.Generator] = None) -> None:
        self.plan = plan
        self.conv: Optional[Layer] = None
        if plan.kind == "conv1x1-baseline":
            spec = conv(plan.in_channels, plan.out_channels, kernel_size=1, stride=1, padding=0)
            self.conv = Layer(spec, rng=rng if rng is not None else np.random.default_rng(0))

    def __repr__(self) -> str:
        return f"AdapterBlock({self.plan})"

    @property
    def spec(self) -> Optional[LayerSpec]:
        return self.conv.spec if self.conv is not None else None

    def forward(self, x: np.ndarray, training: bool = False, record: bool = True) -> np.ndarray:
        if self.conv is not None:
            return self.conv.forward(x, training, record)
        return adapter_forward(self.plan, x)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self.conv is not None:
            return self.conv.backward(dout)
        return adapter_backward(self.plan, dout)

    def param_groups(self) -> List[Tuple[str, ParamSet]]:
        return self.conv.param_groups() if self.conv is not None else []

    def layers(self) -> Iterator[Layer]:
        if self.conv is not None:
            yield self.conv

    def num_trainable(self) -> int:
        return self.conv.params.num_trainable() if self.conv is not None else 0
